#include "vitscope/sae/stats.hpp"

#include <algorithm>
#include <map>

namespace vitscope::sae {
namespace {

bool exemplar_before(const Exemplar& a, const Exemplar& b) {
  if (a.value != b.value) return a.value > b.value;
  if (a.image != b.image) return a.image < b.image;
  return a.token < b.token;
}

void prune(std::vector<Exemplar>& v, int m, bool force) {
  if (!force && static_cast<int>(v.size()) <= 4 * m) return;
  const auto keep = std::min<std::size_t>(v.size(), m);
  std::partial_sort(v.begin(), v.begin() + keep, v.end(), exemplar_before);
  v.resize(keep);
}

Json exemplars_to_json(const std::vector<Exemplar>& v) {
  Json out = Json::array();
  for (const auto& e : v) out.push_back({{"image", e.image}, {"token", e.token}, {"value", e.value}});
  return out;
}

std::vector<Exemplar> exemplars_from_json(const Json& j) {
  std::vector<Exemplar> out;
  for (const auto& e : j) out.push_back({e.at("image").get<int>(), e.at("token").get<int>(), e.at("value").get<double>()});
  return out;
}

RowVector row_from_json(const Json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const RowVector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  const std::size_t n = values.size();
  auto mid = values.begin() + n / 2;
  std::nth_element(values.begin(), mid, values.end());
  const double hi = *mid;
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(values.begin(), mid);
  return 0.5 * (lo + hi);
}

double median_with_zeros(std::vector<double> values, long zeros) {
  const long n = static_cast<long>(values.size()) + zeros;
  if (n == 0) return 0.0;
  std::sort(values.begin(), values.end());
  // Sorted sequence is `zeros` zeros followed by the (non-negative) values.
  auto at = [&](long i) { return i < zeros ? 0.0 : values[i - zeros]; };
  if (n % 2 == 1) return at(n / 2);
  return 0.5 * (at(n / 2 - 1) + at(n / 2));
}

RowVector FeatureStats::feature_medians() const {
  RowVector out(num_features());
  for (int i = 0; i < num_features(); ++i) out(i) = features[i].median;
  return out;
}

FeatureStatsAccumulator::FeatureStatsAccumulator(int layer_id, int num_features, int num_tokens, int width,
                                                 int exemplars)
    : layer_id_(layer_id),
      f_(num_features),
      tokens_(num_tokens),
      width_(width),
      m_(exemplars),
      values_(num_features),
      pos_count_(num_features, std::vector<long>(num_tokens - 1, 0)),
      pos_sum_(num_features, std::vector<double>(num_tokens - 1, 0.0)),
      best_per_image_(num_features),
      patches_(num_features),
      error_values_(width),
      residual_values_(width) {
  if (num_tokens < 2) throw InputError("feature stats need a class token and at least one patch token");
}

void FeatureStatsAccumulator::add_image(int image_id, const std::vector<SparseCode>& codes, const Matrix& error,
                                        const Matrix& residual, int predicted_class) {
  if (static_cast<int>(codes.size()) != tokens_ || error.rows() != tokens_ || residual.rows() != tokens_ ||
      error.cols() != width_ || residual.cols() != width_) {
    throw InputError("feature stats: image " + std::to_string(image_id) + " has mismatched token or width counts");
  }
  std::vector<Exemplar> best(f_, Exemplar{image_id, -1, 0.0});
  for (int t = 0; t < tokens_; ++t) {
    const auto& c = codes[t];
    for (std::size_t j = 0; j < c.size(); ++j) {
      const int i = c.index[j];
      const double v = c.value[j];
      values_[i].push_back(v);
      if (t > 0) {
        ++pos_count_[i][t - 1];
        pos_sum_[i][t - 1] += v;
      }
      patches_[i].push_back({image_id, t, v});
      if (best[i].token < 0 || v > best[i].value) best[i] = {image_id, t, v};
    }
  }
  for (int i = 0; i < f_; ++i) {
    if (best[i].token >= 0) {
      best_per_image_[i].push_back(best[i]);
      prune(best_per_image_[i], m_, false);
    }
    prune(patches_[i], m_, false);
  }
  for (int c = 0; c < width_; ++c) {
    for (int t = 0; t < tokens_; ++t) {
      error_values_[c].push_back(error(t, c));
      residual_values_[c].push_back(residual(t, c));
    }
  }
  predictions_.emplace_back(image_id, predicted_class);
  ++images_;
}

void FeatureStatsAccumulator::merge(const FeatureStatsAccumulator& o) {
  if (o.f_ != f_ || o.tokens_ != tokens_ || o.width_ != width_ || o.layer_id_ != layer_id_) {
    throw InputError("cannot merge feature stats of different shapes");
  }
  for (int i = 0; i < f_; ++i) {
    values_[i].insert(values_[i].end(), o.values_[i].begin(), o.values_[i].end());
    for (int p = 0; p < tokens_ - 1; ++p) {
      pos_count_[i][p] += o.pos_count_[i][p];
      pos_sum_[i][p] += o.pos_sum_[i][p];
    }
    best_per_image_[i].insert(best_per_image_[i].end(), o.best_per_image_[i].begin(), o.best_per_image_[i].end());
    patches_[i].insert(patches_[i].end(), o.patches_[i].begin(), o.patches_[i].end());
    prune(best_per_image_[i], m_, false);
    prune(patches_[i], m_, false);
  }
  for (int c = 0; c < width_; ++c) {
    error_values_[c].insert(error_values_[c].end(), o.error_values_[c].begin(), o.error_values_[c].end());
    residual_values_[c].insert(residual_values_[c].end(), o.residual_values_[c].begin(), o.residual_values_[c].end());
  }
  predictions_.insert(predictions_.end(), o.predictions_.begin(), o.predictions_.end());
  images_ += o.images_;
}

FeatureStats FeatureStatsAccumulator::finalize() const {
  FeatureStats s;
  s.layer_id = layer_id_;
  s.num_tokens = tokens_;
  s.images = images_;
  const long total = images_ * tokens_;
  std::map<int, int> predicted(predictions_.begin(), predictions_.end());
  s.features.resize(f_);
  for (int i = 0; i < f_; ++i) {
    FeatureRecord& r = s.features[i];
    const auto& vals = values_[i];
    r.active_tokens = static_cast<long>(vals.size());
    double sum = 0.0;
    for (double v : vals) sum += v;
    if (total > 0) {
      r.frequency = static_cast<double>(r.active_tokens) / static_cast<double>(total);
      r.mean = sum / static_cast<double>(total);
    }
    r.mean_active = r.active_tokens > 0 ? sum / static_cast<double>(r.active_tokens) : 0.0;
    r.median = median_with_zeros(vals, total - r.active_tokens);
    r.position_frequency.resize(tokens_ - 1);
    r.position_mean.resize(tokens_ - 1);
    for (int p = 0; p < tokens_ - 1; ++p) {
      r.position_frequency[p] = images_ > 0 ? static_cast<double>(pos_count_[i][p]) / static_cast<double>(images_) : 0.0;
      r.position_mean[p] = images_ > 0 ? pos_sum_[i][p] / static_cast<double>(images_) : 0.0;
    }
    r.top_images = best_per_image_[i];
    prune(r.top_images, m_, true);
    r.top_patches = patches_[i];
    prune(r.top_patches, m_, true);
    std::map<int, int> counts;
    for (const auto& e : r.top_images) {
      auto it = predicted.find(e.image);
      if (it != predicted.end()) ++counts[it->second];
    }
    r.top_classes.assign(counts.begin(), counts.end());
    std::stable_sort(r.top_classes.begin(), r.top_classes.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
  }
  s.error_median.resize(width_);
  s.residual_median.resize(width_);
  for (int c = 0; c < width_; ++c) {
    s.error_median(c) = median(error_values_[c]);
    s.residual_median(c) = median(residual_values_[c]);
  }
  return s;
}

Json to_json(const FeatureStats& s) {
  Json features = Json::array();
  for (int i = 0; i < s.num_features(); ++i) {
    const auto& r = s.features[i];
    Json classes = Json::array();
    for (const auto& [c, n] : r.top_classes) classes.push_back({{"class", c}, {"count", n}});
    features.push_back({{"layer", s.layer_id},
                        {"index", i},
                        {"active_tokens", r.active_tokens},
                        {"frequency", r.frequency},
                        {"mean", r.mean},
                        {"mean_active", r.mean_active},
                        {"median", r.median},
                        {"position_frequency", r.position_frequency},
                        {"position_mean", r.position_mean},
                        {"top_images", exemplars_to_json(r.top_images)},
                        {"top_patches", exemplars_to_json(r.top_patches)},
                        {"top_classes", classes}});
  }
  return {{"layer", s.layer_id},
          {"num_tokens", s.num_tokens},
          {"images", s.images},
          {"error_median", std::vector<double>(s.error_median.data(), s.error_median.data() + s.error_median.size())},
          {"residual_median",
           std::vector<double>(s.residual_median.data(), s.residual_median.data() + s.residual_median.size())},
          {"features", features}};
}

FeatureStats feature_stats_from_json(const Json& j) {
  FeatureStats s;
  s.layer_id = j.at("layer").get<int>();
  s.num_tokens = j.at("num_tokens").get<int>();
  s.images = j.at("images").get<long>();
  s.error_median = row_from_json(j.at("error_median"));
  s.residual_median = row_from_json(j.at("residual_median"));
  for (const auto& f : j.at("features")) {
    FeatureRecord r;
    r.active_tokens = f.at("active_tokens").get<long>();
    r.frequency = f.at("frequency").get<double>();
    r.mean = f.at("mean").get<double>();
    r.mean_active = f.at("mean_active").get<double>();
    r.median = f.at("median").get<double>();
    r.position_frequency = f.at("position_frequency").get<std::vector<double>>();
    r.position_mean = f.at("position_mean").get<std::vector<double>>();
    r.top_images = exemplars_from_json(f.at("top_images"));
    r.top_patches = exemplars_from_json(f.at("top_patches"));
    for (const auto& c : f.at("top_classes")) r.top_classes.emplace_back(c.at("class").get<int>(), c.at("count").get<int>());
    s.features.push_back(std::move(r));
  }
  return s;
}

void save_feature_stats(const std::filesystem::path& path, const FeatureStats& s, const Json& provenance) {
  Json j = to_json(s);
  j["provenance"] = provenance;
  write_json_atomic(path, j);
}

FeatureStats load_feature_stats(const std::filesystem::path& path, Json* provenance) {
  const Json j = read_json(path);
  if (provenance) *provenance = j.value("provenance", Json::object());
  return feature_stats_from_json(j);
}

}  // namespace vitscope::sae
