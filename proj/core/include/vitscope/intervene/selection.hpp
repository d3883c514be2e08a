#pragma once

#include "vitscope/attribution/basis.hpp"
#include "vitscope/backbone/shapes.hpp"
#include "vitscope/intervene/intervention.hpp"

#include <optional>
#include <vector>

namespace vitscope::intervene {

/// Scripted stand-in for the human pick: circuits of the planted-class logit
/// on a few spurious-only images propose candidates, and each candidate is
/// scored by the debias protocol on held-out images (indices past the
/// configured split sizes, so the reported evaluation never sees them).
struct SelectionConfig {
  int discovery_images = 5;
  int circuit_k = 3;
  int candidates = 12;
  int holdout_images = 100;  // per split
  double max_accuracy_drop = 0.01;
  Policy policy = Policy::kMedian;
};

Json to_json(const SelectionConfig& c);
SelectionConfig selection_config_from_json(const Json& j);

struct Candidate {
  FeatureRef node;
  double circuit_score = 0.0;  // summed node importance over the discovery images
  double accuracy = 0.0;
  double auc = 0.0;
};

struct Selection {
  double base_accuracy = 0.0;
  double base_auc = 0.0;
  std::vector<Candidate> candidates;
  std::optional<FeatureRef> chosen;  // best AUC gain within the accuracy budget
};

/// Images [count, count + n) of a split.
backbone::Dataset holdout_split(const backbone::ShapesConfig& config, backbone::Split split, int n);

Selection select_spurious_feature(const attribution::ReplacementModel& rm,
                                  const std::vector<sae::FeatureStats>& stats, const backbone::ShapesConfig& config,
                                  const SelectionConfig& sc, int threads = 1);

Json to_json(const Selection& s);

}  // namespace vitscope::intervene
