#include "vitscope/intervene/selection.hpp"

#include "vitscope/attribution/importance.hpp"
#include "vitscope/circuits/discovery.hpp"

#include <algorithm>
#include <map>

namespace vitscope::intervene {

Json to_json(const SelectionConfig& c) {
  return {{"discovery_images", c.discovery_images}, {"circuit_k", c.circuit_k},
          {"candidates", c.candidates},             {"holdout_images", c.holdout_images},
          {"max_accuracy_drop", c.max_accuracy_drop}, {"policy", to_string(c.policy)}};
}

SelectionConfig selection_config_from_json(const Json& j) {
  SelectionConfig c;
  c.discovery_images = j.value("discovery_images", c.discovery_images);
  c.circuit_k = j.value("circuit_k", c.circuit_k);
  c.candidates = j.value("candidates", c.candidates);
  c.holdout_images = j.value("holdout_images", c.holdout_images);
  c.max_accuracy_drop = j.value("max_accuracy_drop", c.max_accuracy_drop);
  if (j.contains("policy")) c.policy = policy_from_string(j.at("policy").get<std::string>());
  if (c.discovery_images < 1 || c.circuit_k < 1 || c.candidates < 1 || c.holdout_images < 1) {
    throw ConfigError("selection counts must be positive");
  }
  return c;
}

backbone::Dataset holdout_split(const backbone::ShapesConfig& config, backbone::Split split, int n) {
  backbone::Dataset ds;
  ds.split = split;
  const int start = backbone::split_count(config, split);
  for (int i = 0; i < n; ++i) ds.samples.push_back(backbone::generate_sample(config, split, start + i));
  return ds;
}

Selection select_spurious_feature(const attribution::ReplacementModel& rm,
                                  const std::vector<sae::FeatureStats>& stats, const backbone::ShapesConfig& config,
                                  const SelectionConfig& sc, int threads) {
  if (!config.spurious_plant) throw ConfigError("dataset config has no spurious plant");
  rm.validate();
  const int planted = config.spurious_plant->class_id;
  const auto& bb = *rm.backbone;

  const auto spurious = holdout_split(config, backbone::Split::kSpuriousOnly, sc.holdout_images);
  const auto class_only = holdout_split(config, backbone::Split::kClassOnly, sc.holdout_images);
  const auto eval = holdout_split(config, backbone::Split::kEval, sc.holdout_images);

  std::map<FeatureRef, double> score;
  const auto m = attribution::Objective::logit(planted);
  for (int i = 0; i < sc.discovery_images && i < static_cast<int>(spurious.size()); ++i) {
    attribution::ImageAttribution ctx(rm, spurious.samples[i].image, m, backbone::GradMode::kCorrected);
    circuits::AttributionScoreSource src(ctx);
    circuits::DiscoveryOptions opt;
    opt.k = sc.circuit_k;
    opt.include_errors = false;
    opt.record_edges = false;
    const auto g = circuits::discover_circuit(src, opt);
    for (int l = 0; l <= g.top; ++l) {
      for (const auto& n : g.layers[l]) score[{l, n.key.index}] += n.importance;
    }
  }
  std::vector<std::pair<FeatureRef, double>> ranked(score.begin(), score.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (static_cast<int>(ranked.size()) > sc.candidates) ranked.resize(sc.candidates);

  Selection out;
  InterventionSpec none;
  none.policy = sc.policy;
  const auto base = debias_eval(apply_intervention(bb, rm.saes, stats, none), eval, spurious, class_only, planted, threads);
  out.base_accuracy = base.accuracy;
  out.base_auc = base.auc;
  double best = 0.0;
  for (const auto& [node, s] : ranked) {
    InterventionSpec spec;
    spec.nodes = {node};
    spec.policy = sc.policy;
    const auto r = debias_eval(apply_intervention(bb, rm.saes, stats, spec), eval, spurious, class_only, planted, threads);
    out.candidates.push_back({node, s, r.accuracy, r.auc});
    const double gain = r.auc - base.auc;
    if (base.accuracy - r.accuracy <= sc.max_accuracy_drop && gain > best) {
      best = gain;
      out.chosen = node;
    }
  }
  return out;
}

Json to_json(const Selection& s) {
  Json c = Json::array();
  for (const auto& x : s.candidates) {
    c.push_back({{"layer", x.node.layer}, {"index", x.node.index}, {"circuit_score", x.circuit_score},
                 {"accuracy", x.accuracy}, {"auc", x.auc}});
  }
  Json j = {{"base_accuracy", s.base_accuracy}, {"base_auc", s.base_auc}, {"candidates", c}, {"chosen", nullptr}};
  if (s.chosen) j["chosen"] = {{"layer", s.chosen->layer}, {"index", s.chosen->index}};
  return j;
}

}  // namespace vitscope::intervene
