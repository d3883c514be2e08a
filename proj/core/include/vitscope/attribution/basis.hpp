#pragma once

#include "vitscope/backbone/residual_backbone.hpp"
#include "vitscope/sae/sae.hpp"
#include "vitscope/sae/stats.hpp"

#include <memory>
#include <vector>

namespace vitscope::attribution {

/// One read point written as node activations plus (for SAEs) an error term.
struct Decomposition {
  Matrix acts;   // tokens x nodes, dense
  Matrix error;  // tokens x width; empty for the neuron basis
  Matrix recon;  // tokens x width; acts decoded (SAE) or acts itself (neurons)
};

/// How the residual at one read point is split into graph nodes: SAE
/// features plus an error node, or raw residual channels ("neurons").
class LayerBasis {
 public:
  enum class Kind { kSae, kNeuron };

  static LayerBasis from_sae(std::shared_ptr<const sae::SaeParams> sae, const sae::FeatureStats& stats);
  static LayerBasis from_sae(std::shared_ptr<const sae::SaeParams> sae, RowVector feature_median,
                             RowVector error_median);
  static LayerBasis neurons(RowVector channel_median);

  Kind kind() const { return kind_; }
  int size() const;  // feature nodes, excluding the error node
  bool has_error() const { return kind_ == Kind::kSae; }
  /// Index used for the error node in node vectors (== size()).
  int error_index() const { return size(); }
  int width() const;
  const sae::SaeParams* sae() const { return sae_.get(); }
  const RowVector& baseline() const { return baseline_; }
  const RowVector& error_baseline() const { return error_baseline_; }

  Decomposition decompose(const Matrix& x) const;
  /// Residual from (possibly modified) activations and error.
  Matrix compose(const Matrix& acts, const Matrix& error) const;

  /// dm/d(acts) given dm/dx, tokens x nodes.
  Matrix node_grad(const Matrix& g) const;
  /// Cotangent at x for s = sum_t coeff(t) * acts(t, node).
  Matrix pullback_node(const Decomposition& d, int node, const Vector& coeff) const;
  /// Cotangent at x for s = sum_t g_t . error_t, i.e. g - J_enc^T J_dec^T g.
  Matrix pullback_error(const Decomposition& d, const Matrix& g) const;

 private:
  Kind kind_ = Kind::kNeuron;
  std::shared_ptr<const sae::SaeParams> sae_;
  RowVector baseline_;
  RowVector error_baseline_;
};

/// Backbone plus one node basis per read point. `saes` is kept separately
/// so feature objectives can be evaluated even over a neuron basis.
struct ReplacementModel {
  const backbone::ResidualBackbone* backbone = nullptr;
  std::vector<LayerBasis> layers;
  std::vector<std::shared_ptr<const sae::SaeParams>> saes;

  int num_read_points() const { return static_cast<int>(layers.size()); }
  void validate() const;
};

ReplacementModel make_sae_model(const backbone::ResidualBackbone& bb,
                                const std::vector<std::shared_ptr<const sae::SaeParams>>& saes,
                                const std::vector<sae::FeatureStats>& stats);
ReplacementModel make_neuron_model(const backbone::ResidualBackbone& bb,
                                   const std::vector<std::shared_ptr<const sae::SaeParams>>& saes,
                                   const std::vector<sae::FeatureStats>& stats);

}  // namespace vitscope::attribution
