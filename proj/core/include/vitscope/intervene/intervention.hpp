#pragma once

#include "vitscope/backbone/residual_backbone.hpp"
#include "vitscope/backbone/shapes.hpp"
#include "vitscope/io.hpp"
#include "vitscope/sae/sae.hpp"
#include "vitscope/sae/stats.hpp"

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace vitscope::intervene {

enum class Policy { kMedian, kZero };

std::string to_string(Policy p);
Policy policy_from_string(const std::string& s);

struct FeatureRef {
  int layer = 0;
  int index = 0;

  auto operator<=>(const FeatureRef&) const = default;
};

/// Features pinned at every token of every input.
struct InterventionSpec {
  std::vector<FeatureRef> nodes;
  Policy policy = Policy::kMedian;

  /// Sorted, duplicates removed. Applying a spec twice is applying its
  /// normalized form once.
  InterventionSpec normalized() const;
};

/// Union of two specs with the same policy. Order does not matter.
InterventionSpec combine(const InterventionSpec& a, const InterventionSpec& b);

Json to_json(const InterventionSpec& s);
/// Accepts {"nodes": [{"layer": l, "index": i}, ... or "L3#12"], "policy": "median"|"zero"}.
InterventionSpec intervention_spec_from_json(const Json& j);
FeatureRef parse_feature_ref(const std::string& label);

class InterventionHandle {
 public:
  InterventionHandle(const backbone::ResidualBackbone& bb, std::vector<std::shared_ptr<const sae::SaeParams>> saes,
                     std::vector<RowVector> replacement, InterventionSpec spec);

  const InterventionSpec& spec() const { return spec_; }
  const backbone::ResidualBackbone& backbone() const { return *bb_; }

  /// Pins every named feature to its replacement value; the residual moves
  /// by (v - a) along the feature's raw-space decoder direction, so tokens
  /// where a == v are left untouched bit for bit.
  backbone::ReadPointHook hook() const;

  RowVector logits(const backbone::Image& img) const;
  int predict(const backbone::Image& img) const;

 private:
  const backbone::ResidualBackbone* bb_;
  std::vector<std::shared_ptr<const sae::SaeParams>> saes_;
  std::vector<RowVector> replacement_;  // per layer, per feature
  std::vector<std::vector<int>> pinned_;  // per layer
  InterventionSpec spec_;
};

/// `stats` may be empty for the zero policy. Throws NotFoundError for a
/// node outside the SAE set, ConfigError for median without stats.
InterventionHandle apply_intervention(const backbone::ResidualBackbone& bb,
                                      std::vector<std::shared_ptr<const sae::SaeParams>> saes,
                                      const std::vector<sae::FeatureStats>& stats, const InterventionSpec& spec);

struct Histogram {
  double lo = 0.0, hi = 0.0;
  std::vector<int> counts;
};

Histogram histogram(const std::vector<double>& values, int bins = 20);

struct DebiasReport {
  InterventionSpec spec;
  int planted_class = 0;
  double accuracy = 0.0;
  double auc = 0.0;
  int eval_images = 0;
  std::vector<double> class_only_scores;
  std::vector<double> spurious_only_scores;
  double spurious_planted_rate = 0.0;  // spurious-only images predicted as the planted class
};

/// Accuracy on `eval`; rank AUC of the planted-class normalized logit with
/// class-only images as positives and spurious-only images as negatives.
DebiasReport debias_eval(const InterventionHandle& h, const backbone::Dataset& eval,
                         const backbone::Dataset& spurious_only, const backbone::Dataset& class_only,
                         int planted_class, int threads = 1);

Json to_json(const DebiasReport& r);

}  // namespace vitscope::intervene
