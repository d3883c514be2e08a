#include "vitscope/intervene/intervention.hpp"

#include "vitscope/attribution/objective.hpp"
#include "vitscope/circuits/metrics.hpp"
#include "vitscope/sae/tokens.hpp"

#include <algorithm>
#include <cmath>
#include <regex>

namespace vitscope::intervene {

std::string to_string(Policy p) { return p == Policy::kMedian ? "median" : "zero"; }

Policy policy_from_string(const std::string& s) {
  if (s == "median") return Policy::kMedian;
  if (s == "zero") return Policy::kZero;
  throw InputError("field 'policy': '" + s + "' is not one of median, zero");
}

InterventionSpec InterventionSpec::normalized() const {
  InterventionSpec out = *this;
  std::sort(out.nodes.begin(), out.nodes.end());
  out.nodes.erase(std::unique(out.nodes.begin(), out.nodes.end()), out.nodes.end());
  return out;
}

InterventionSpec combine(const InterventionSpec& a, const InterventionSpec& b) {
  if (a.policy != b.policy) throw InputError("cannot combine interventions with different policies");
  InterventionSpec out = a;
  out.nodes.insert(out.nodes.end(), b.nodes.begin(), b.nodes.end());
  return out.normalized();
}

Json to_json(const InterventionSpec& s) {
  Json nodes = Json::array();
  for (const auto& n : s.nodes) nodes.push_back({{"layer", n.layer}, {"index", n.index}});
  return {{"nodes", nodes}, {"policy", to_string(s.policy)}};
}

FeatureRef parse_feature_ref(const std::string& label) {
  static const std::regex kRe(R"(L(\d+)#(\d+))");
  std::smatch m;
  if (!std::regex_match(label, m, kRe)) throw InputError("field 'nodes': '" + label + "' is not a feature label like L3#12");
  return {std::stoi(m[1]), std::stoi(m[2])};
}

InterventionSpec intervention_spec_from_json(const Json& j) {
  if (!j.is_object()) throw InputError("intervention spec must be a JSON object");
  if (!j.contains("nodes")) throw InputError("field 'nodes': missing");
  const auto& nodes = j.at("nodes");
  if (!nodes.is_array()) throw InputError("field 'nodes': expected an array");
  InterventionSpec s;
  for (const auto& n : nodes) {
    if (n.is_string()) {
      s.nodes.push_back(parse_feature_ref(n.get<std::string>()));
    } else if (n.is_object() && n.contains("layer") && n.contains("index") && n.at("layer").is_number_integer() &&
               n.at("index").is_number_integer()) {
      s.nodes.push_back({n.at("layer").get<int>(), n.at("index").get<int>()});
    } else {
      throw InputError("field 'nodes': each entry needs integer 'layer' and 'index' or a label like L3#12");
    }
  }
  if (j.contains("policy")) {
    if (!j.at("policy").is_string()) throw InputError("field 'policy': expected a string");
    s.policy = policy_from_string(j.at("policy").get<std::string>());
  }
  return s;
}

InterventionHandle::InterventionHandle(const backbone::ResidualBackbone& bb,
                                       std::vector<std::shared_ptr<const sae::SaeParams>> saes,
                                       std::vector<RowVector> replacement, InterventionSpec spec)
    : bb_(&bb), saes_(std::move(saes)), replacement_(std::move(replacement)), spec_(spec.normalized()) {
  pinned_.assign(saes_.size(), {});
  for (const auto& n : spec_.nodes) {
    if (n.layer < 0 || n.layer >= static_cast<int>(saes_.size()) || !saes_[n.layer]) {
      throw NotFoundError("no SAE at layer " + std::to_string(n.layer));
    }
    if (n.index < 0 || n.index >= saes_[n.layer]->num_features()) {
      throw NotFoundError("feature L" + std::to_string(n.layer) + "#" + std::to_string(n.index) + " does not exist");
    }
    pinned_[n.layer].push_back(n.index);
  }
}

backbone::ReadPointHook InterventionHandle::hook() const {
  return [this](int l, Matrix& x) {
    if (l >= static_cast<int>(pinned_.size()) || pinned_[l].empty()) return;
    const auto& s = *saes_[l];
    const Matrix pre = sae::pre_activations(s, x);
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      const auto code = sae::topk_relu(pre.row(t).data(), s.num_features(), s.k);
      for (int i : pinned_[l]) {
        double a = 0.0;
        for (std::size_t j = 0; j < code.size(); ++j) {
          if (code.index[j] == i) a = code.value[j];
        }
        const double v = replacement_[l](i);
        if (a == v) continue;
        x.row(t) += (v - a) * s.w_dec.col(i).transpose().cwiseProduct(s.in_std);
      }
    }
  };
}

RowVector InterventionHandle::logits(const backbone::Image& img) const {
  return backbone::run_forward(*bb_, img, hook(), false).logits;
}

int InterventionHandle::predict(const backbone::Image& img) const {
  Eigen::Index arg = 0;
  logits(img).maxCoeff(&arg);
  return static_cast<int>(arg);
}

InterventionHandle apply_intervention(const backbone::ResidualBackbone& bb,
                                      std::vector<std::shared_ptr<const sae::SaeParams>> saes,
                                      const std::vector<sae::FeatureStats>& stats, const InterventionSpec& spec) {
  for (const auto& n : spec.nodes) {
    if (n.layer < 0 || n.layer >= static_cast<int>(saes.size()) || !saes[n.layer] || n.index < 0 ||
        n.index >= saes[n.layer]->num_features()) {
      throw NotFoundError("feature L" + std::to_string(n.layer) + "#" + std::to_string(n.index) + " does not exist");
    }
  }
  std::vector<RowVector> repl(saes.size());
  for (std::size_t l = 0; l < saes.size(); ++l) {
    if (!saes[l]) continue;
    repl[l] = RowVector::Zero(saes[l]->num_features());
  }
  if (spec.policy == Policy::kMedian) {
    for (const auto& n : spec.nodes) {
      if (n.layer < 0 || n.layer >= static_cast<int>(stats.size()) || stats[n.layer].features.empty()) {
        throw ConfigError("median policy needs feature stats for layer " + std::to_string(n.layer));
      }
    }
    for (std::size_t l = 0; l < saes.size() && l < stats.size(); ++l) {
      if (!saes[l] || stats[l].features.empty()) continue;
      const auto med = stats[l].feature_medians();
      if (static_cast<int>(med.size()) != saes[l]->num_features()) {
        throw ConfigError("feature stats of layer " + std::to_string(l) + " do not match the SAE width");
      }
      for (int i = 0; i < repl[l].size(); ++i) repl[l](i) = med[i];
    }
  }
  return InterventionHandle(bb, std::move(saes), std::move(repl), spec);
}

Histogram histogram(const std::vector<double>& values, int bins) {
  Histogram h;
  h.counts.assign(bins, 0);
  if (values.empty()) return h;
  h.lo = *std::min_element(values.begin(), values.end());
  h.hi = *std::max_element(values.begin(), values.end());
  const double w = (h.hi - h.lo) / bins;
  for (double v : values) {
    int b = w > 0 ? static_cast<int>((v - h.lo) / w) : 0;
    h.counts[std::clamp(b, 0, bins - 1)]++;
  }
  return h;
}

DebiasReport debias_eval(const InterventionHandle& h, const backbone::Dataset& eval,
                         const backbone::Dataset& spurious_only, const backbone::Dataset& class_only,
                         int planted_class, int threads) {
  if (eval.size() == 0) throw InputError("debias evaluation needs a non-empty eval split");
  if (spurious_only.size() == 0) throw InputError("debias evaluation needs a non-empty spurious-only split");
  if (class_only.size() == 0) throw InputError("debias evaluation needs a non-empty class-only split");

  DebiasReport r;
  r.spec = h.spec();
  r.planted_class = planted_class;
  r.eval_images = static_cast<int>(eval.size());

  std::vector<char> correct(eval.size(), 0);
  sae::parallel_for(static_cast<int>(eval.size()), threads,
                    [&](int i) { correct[i] = h.predict(eval.samples[i].image) == eval.samples[i].label; });
  r.accuracy = static_cast<double>(std::count(correct.begin(), correct.end(), 1)) / static_cast<double>(eval.size());

  auto score = [&](const backbone::Dataset& ds, std::vector<double>& out, std::vector<char>* planted) {
    out.assign(ds.size(), 0.0);
    if (planted) planted->assign(ds.size(), 0);
    sae::parallel_for(static_cast<int>(ds.size()), threads, [&](int i) {
      const RowVector lg = h.logits(ds.samples[i].image);
      if (planted_class < 0 || planted_class >= lg.size()) throw InputError("planted class out of range");
      out[i] = attribution::normalized_logit(lg, planted_class);
      if (planted) {
        Eigen::Index arg = 0;
        lg.maxCoeff(&arg);
        (*planted)[i] = arg == planted_class;
      }
    });
  };
  std::vector<char> planted;
  score(class_only, r.class_only_scores, nullptr);
  score(spurious_only, r.spurious_only_scores, &planted);
  r.spurious_planted_rate =
      static_cast<double>(std::count(planted.begin(), planted.end(), 1)) / static_cast<double>(planted.size());
  r.auc = circuits::rank_auc(r.class_only_scores, r.spurious_only_scores);
  return r;
}

namespace {
Json to_json(const Histogram& h) { return {{"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}}; }
}  // namespace

Json to_json(const DebiasReport& r) {
  return {{"spec", to_json(r.spec)},
          {"planted_class", r.planted_class},
          {"accuracy", r.accuracy},
          {"auc", r.auc},
          {"eval_images", r.eval_images},
          {"spurious_planted_rate", r.spurious_planted_rate},
          {"histograms",
           {{"class_only", to_json(histogram(r.class_only_scores))},
            {"spurious_only", to_json(histogram(r.spurious_only_scores))}}}};
}

}  // namespace vitscope::intervene
