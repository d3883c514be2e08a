#pragma once

#include "vitscope/attribution/objective.hpp"

#include <map>
#include <vector>

namespace vitscope::attribution {

/// Forward pass, node decompositions and objective gradients of one image,
/// shared by every importance query on it. Upstream pullbacks of
/// downstream nodes are memoized, so repeated discovery at different
/// circuit sizes pays for each backward pass once.
///
/// Node vectors at a layer hold the feature nodes followed by the error
/// node (when the basis has one). Importances are summed over tokens.
class ImageAttribution {
 public:
  ImageAttribution(const ReplacementModel& rm, const backbone::Image& img, const Objective& m,
                   backbone::GradMode mode);

  const ReplacementModel& model() const { return *rm_; }
  const Objective& objective() const { return m_; }
  backbone::GradMode mode() const { return mode_; }
  double objective_value() const { return value_; }
  int top_layer() const { return top_; }
  int num_nodes(int layer) const;
  const backbone::ForwardRecord& record() const { return rec_; }
  const Decomposition& decomposition(int layer) const { return dec_.at(layer); }
  /// dm/dx at a read point.
  const Matrix& gradient(int layer) const { return grads_.at(layer); }
  double bias_contribution() const { return bias_; }

  /// Token-averaged node activations (error node: mean norm of the error).
  RowVector node_activation(int layer) const;
  /// sum_t dm/du_t (u_t - u').
  RowVector node_importance(int layer) const;

  /// d/dx_layer of s_d = sum_t (dm/dd_t) d_t for a node d at layer + 1,
  /// one backward pass through block `layer`.
  const Matrix& upstream_pullback(int layer, int downstream);
  /// I(u -> d) for every upstream node u at `layer`.
  RowVector edge_scores(int layer, int downstream);
  /// Columns follow `downstream`.
  Matrix edge_importance(int layer, const std::vector<int>& downstream);
  /// Same matrix from one backward pass per (downstream node, token).
  Matrix naive_edge_importance(int layer, const std::vector<int>& downstream) const;

  long backward_passes() const { return backward_passes_; }

 private:
  Matrix downstream_cotangent(int layer_above, int downstream, int only_token) const;
  RowVector contract(int layer, const Matrix& h) const;

  const ReplacementModel* rm_;
  Objective m_;
  backbone::GradMode mode_;
  backbone::ForwardRecord rec_;
  std::vector<Decomposition> dec_;
  std::vector<Matrix> grads_;
  double value_ = 0.0;
  double bias_ = 0.0;
  int top_ = 0;
  std::map<std::pair<int, int>, Matrix> pullbacks_;
  long backward_passes_ = 0;
};

/// |m - (sum over nodes of the chosen layer of dm/du . u + dm/de . e + all
/// bias terms)|. Exact (to rounding) only for GradMode::kCorrected.
double completeness_residual(const ReplacementModel& rm, const Objective& m, const backbone::Image& img, int layer,
                             backbone::GradMode mode);

/// As completeness_residual, but throws UnsupportedError for vanilla
/// gradients, for which the identity does not hold.
double verify_completeness(const ReplacementModel& rm, const Objective& m, const backbone::Image& img, int layer,
                           backbone::GradMode mode = backbone::GradMode::kCorrected);

}  // namespace vitscope::attribution
