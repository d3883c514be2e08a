#pragma once

#include "vitscope/attribution/basis.hpp"

#include <string>

namespace vitscope::attribution {

/// Scalar m explained by a circuit: the target logit minus the mean logit,
/// or the token-averaged activation of one SAE feature.
struct Objective {
  enum class Kind { kNormalizedLogit, kFeature };

  Kind kind = Kind::kNormalizedLogit;
  int target_class = 0;
  int layer = 0;    // feature objectives
  int feature = 0;  // feature objectives

  static Objective logit(int target_class);
  static Objective feature_activation(int layer, int feature);
  /// Parses "logit:<class>" or "feature:<layer>:<index>".
  static Objective parse(const std::string& s);

  std::string description() const;
  /// Highest read point whose nodes may appear in a circuit for this objective.
  int top_layer(const backbone::ResidualBackbone& bb) const;
  void validate(const ReplacementModel& rm) const;
};

Json to_json(const Objective& o);
Objective objective_from_json(const Json& j);

double normalized_logit(const RowVector& logits, int target);

/// m from a finished forward pass (read points and logits).
double eval_objective(const ReplacementModel& rm, const Objective& m, const backbone::ForwardRecord& rec);
double eval_objective(const ReplacementModel& rm, const Objective& m, const backbone::Image& img);

/// dm/dx at read points down_to..top_layer + 1 (other entries are empty).
/// `bias_contribution` receives the bias terms on the backward path down to
/// `down_to`, including the objective's own affine offset.
std::vector<Matrix> objective_gradients(const ReplacementModel& rm, const Objective& m,
                                        const backbone::ForwardRecord& rec, backbone::GradMode mode,
                                        double* bias_contribution = nullptr, int down_to = 0);

}  // namespace vitscope::attribution
