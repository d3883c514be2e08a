#include "vitscope/features/cards.hpp"

#include <algorithm>
#include <map>

namespace vitscope::features {
using backbone::Image;

namespace {

Json pairs_to_json(const std::vector<std::pair<int, int>>& v) {
  Json out = Json::array();
  for (const auto& [c, n] : v) out.push_back({{"class", c}, {"count", n}});
  return out;
}

std::vector<std::uint8_t> overlay(const Image& img, const std::vector<double>& heat, int patch, double max_value) {
  std::vector<std::uint8_t> out(img.rgb);
  const int side = img.size / patch;
  for (int y = 0; y < img.size; ++y) {
    for (int x = 0; x < img.size; ++x) {
      const double h = max_value > 0.0 ? heat[(y / patch) * side + x / patch] / max_value : 0.0;
      std::uint8_t* p = &out[(static_cast<std::size_t>(y) * img.size + x) * 3];
      const double a = 0.6 * std::clamp(h, 0.0, 1.0);
      p[0] = static_cast<std::uint8_t>(std::lround(p[0] * (1 - a) + 255 * a));
      p[1] = static_cast<std::uint8_t>(std::lround(p[1] * (1 - a)));
      p[2] = static_cast<std::uint8_t>(std::lround(p[2] * (1 - a)));
    }
  }
  return out;
}

std::vector<std::uint8_t> crop(const Image& img, int token, int patch, int scale) {
  const int side = img.size / patch;
  const int r = (token - 1) / side, c = (token - 1) % side;
  const int n = patch * scale;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n) * n * 3);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const auto px = img.pixel(c * patch + x / scale, r * patch + y / scale);
      std::copy(px, px + 3, &out[(static_cast<std::size_t>(y) * n + x) * 3]);
    }
  }
  return out;
}

}  // namespace

std::string card_stem(int layer, int index) { return "L" + std::to_string(layer) + "_F" + std::to_string(index); }

std::vector<std::pair<int, double>> logit_lens(const backbone::ResidualBackbone& bb, const sae::SaeParams& sae,
                                               int feature) {
  if (feature < 0 || feature >= sae.num_features()) throw InputError("feature index out of range");
  Matrix dir = Matrix::Zero(1, bb.width());
  dir.row(0) = sae.w_dec.col(feature).transpose().cwiseProduct(sae.in_std);
  RowVector with, without;
  bb.forward_head(dir, with);
  bb.forward_head(Matrix::Zero(1, bb.width()), without);
  RowVector lens = with - without;
  lens.array() -= lens.mean();
  std::vector<std::pair<int, double>> out;
  for (int c = 0; c < lens.size(); ++c) out.emplace_back(c, lens(c));
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

std::vector<FeatureCard> build_feature_cards(const backbone::ResidualBackbone& bb, const sae::SaeParams& sae,
                                             const sae::FeatureStats& stats, const backbone::Dataset& dataset,
                                             const std::vector<int>& indices) {
  const int layer = sae.layer_id;
  struct Cached {
    std::vector<sae::SparseCode> codes;
    int predicted = 0;
  };
  std::map<int, Cached> cache;
  auto get = [&](int image) -> const Cached& {
    auto it = cache.find(image);
    if (it != cache.end()) return it->second;
    if (image < 0 || image >= static_cast<int>(dataset.size())) {
      throw InputError("exemplar image " + std::to_string(image) + " is outside the dataset");
    }
    const auto rec = backbone::run_forward(bb, dataset.samples[image].image, {}, false);
    Cached c;
    c.codes = sae::encode(sae, rec.read_points[layer]);
    Eigen::Index arg;
    rec.logits.maxCoeff(&arg);
    c.predicted = static_cast<int>(arg);
    return cache.emplace(image, std::move(c)).first->second;
  };

  std::vector<FeatureCard> cards;
  for (int i : indices) {
    if (i < 0 || i >= stats.num_features()) throw NotFoundError("feature " + card_stem(layer, i) + " does not exist");
    const auto& rec = stats.features[i];
    FeatureCard card;
    card.layer = layer;
    card.index = i;
    card.frequency = rec.frequency;
    card.dead = rec.active_tokens == 0;
    card.patches = rec.top_patches;
    card.top_classes = rec.top_classes;
    card.logit_lens = logit_lens(bb, sae, i);
    for (const auto& e : rec.top_images) {
      const auto& c = get(e.image);
      CardImage ci;
      ci.image = e.image;
      ci.token = e.token;
      ci.value = e.value;
      ci.label = dataset.samples[e.image].label;
      ci.predicted = c.predicted;
      ci.heatmap.assign(c.codes.size() - 1, 0.0);
      for (std::size_t t = 0; t < c.codes.size(); ++t) {
        const auto& code = c.codes[t];
        for (std::size_t j = 0; j < code.size(); ++j) {
          if (code.index[j] != i) continue;
          if (t == 0) {
            ci.class_token_value = code.value[j];
          } else {
            ci.heatmap[t - 1] = code.value[j];
          }
        }
      }
      card.images.push_back(std::move(ci));
    }
    cards.push_back(std::move(card));
  }
  return cards;
}

Json to_json(const FeatureCard& card) {
  Json images = Json::array();
  for (const auto& im : card.images) {
    images.push_back({{"image", im.image},
                      {"token", im.token},
                      {"value", im.value},
                      {"label", im.label},
                      {"predicted", im.predicted},
                      {"class_token_value", im.class_token_value},
                      {"heatmap", im.heatmap}});
  }
  Json patches = Json::array();
  for (const auto& p : card.patches) patches.push_back({{"image", p.image}, {"token", p.token}, {"value", p.value}});
  Json lens = Json::array();
  for (const auto& [c, v] : card.logit_lens) lens.push_back({{"class", c}, {"value", v}});
  return {{"layer", card.layer},       {"index", card.index},     {"dead", card.dead},
          {"frequency", card.frequency}, {"images", images},      {"patches", patches},
          {"top_classes", pairs_to_json(card.top_classes)},       {"logit_lens", lens}};
}

FeatureCard feature_card_from_json(const Json& j) {
  FeatureCard card;
  card.layer = j.at("layer").get<int>();
  card.index = j.at("index").get<int>();
  card.dead = j.at("dead").get<bool>();
  card.frequency = j.at("frequency").get<double>();
  for (const auto& im : j.at("images")) {
    CardImage ci;
    ci.image = im.at("image").get<int>();
    ci.token = im.at("token").get<int>();
    ci.value = im.at("value").get<double>();
    ci.label = im.at("label").get<int>();
    ci.predicted = im.at("predicted").get<int>();
    ci.class_token_value = im.at("class_token_value").get<double>();
    ci.heatmap = im.at("heatmap").get<std::vector<double>>();
    card.images.push_back(std::move(ci));
  }
  for (const auto& p : j.at("patches")) {
    card.patches.push_back({p.at("image").get<int>(), p.at("token").get<int>(), p.at("value").get<double>()});
  }
  for (const auto& c : j.at("top_classes")) card.top_classes.emplace_back(c.at("class").get<int>(), c.at("count").get<int>());
  for (const auto& c : j.at("logit_lens")) card.logit_lens.emplace_back(c.at("class").get<int>(), c.at("value").get<double>());
  return card;
}

Json export_feature_card(const FeatureCard& card, const backbone::Dataset& dataset, int patch_size,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string stem = card_stem(card.layer, card.index);
  Json doc = to_json(card);
  double max_value = 0.0;
  for (const auto& im : card.images) {
    for (double h : im.heatmap) max_value = std::max(max_value, h);
  }
  for (std::size_t n = 0; n < card.images.size(); ++n) {
    const auto& im = card.images[n];
    const Image& img = dataset.samples.at(im.image).image;
    const std::string name = stem + "_image" + std::to_string(n) + ".png";
    write_file_atomic(dir / name, encode_png(img.size, img.size, overlay(img, im.heatmap, patch_size, max_value)));
    doc["images"][n]["file"] = name;
  }
  for (std::size_t n = 0; n < card.patches.size(); ++n) {
    const auto& p = card.patches[n];
    if (p.token == 0) continue;  // class token has no spatial extent
    const Image& img = dataset.samples.at(p.image).image;
    const std::string name = stem + "_patch" + std::to_string(n) + ".png";
    const int scale = 4;
    write_file_atomic(dir / name, encode_png(patch_size * scale, patch_size * scale, crop(img, p.token, patch_size, scale)));
    doc["patches"][n]["file"] = name;
  }
  write_json_atomic(dir / (stem + ".json"), doc);
  return doc;
}

}  // namespace vitscope::features
