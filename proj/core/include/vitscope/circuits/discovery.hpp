#pragma once

#include "vitscope/attribution/importance.hpp"
#include "vitscope/circuits/graph.hpp"

#include <cstdint>
#include <memory>

namespace vitscope::circuits {

enum class Strategy { kEdge, kNode, kTopP, kThreshold, kRandom };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

/// What discovery needs to know about one image's replacement graph. Node
/// vectors list the features of a layer followed by the error node, if any.
class ScoreSource {
 public:
  virtual ~ScoreSource() = default;
  virtual int top_layer() const = 0;
  virtual int num_features(int layer) const = 0;
  virtual bool has_error(int layer) const = 0;
  /// Importance of every node at `layer` for the objective.
  virtual RowVector node_scores(int layer) = 0;
  /// sum over every downstream node d of I(u -> d).
  virtual RowVector outgoing_total(int layer) = 0;
  /// I(u -> d) for every u at `layer`, d a node index at layer + 1.
  virtual RowVector edge_scores(int layer, int downstream) = 0;
  virtual RowVector node_activation(int layer) = 0;
};

/// Scores from a real image. outgoing_total equals the node importance of
/// the layer by the chain rule (the sum of all downstream cotangents is
/// the layer's own gradient).
class AttributionScoreSource final : public ScoreSource {
 public:
  explicit AttributionScoreSource(attribution::ImageAttribution& ctx) : ctx_(&ctx) {}
  int top_layer() const override { return ctx_->top_layer(); }
  int num_features(int layer) const override { return ctx_->model().layers.at(layer).size(); }
  bool has_error(int layer) const override { return ctx_->model().layers.at(layer).has_error(); }
  RowVector node_scores(int layer) override { return ctx_->node_importance(layer); }
  RowVector outgoing_total(int layer) override { return ctx_->node_importance(layer); }
  RowVector edge_scores(int layer, int downstream) override { return ctx_->edge_scores(layer, downstream); }
  RowVector node_activation(int layer) override { return ctx_->node_activation(layer); }

 private:
  attribution::ImageAttribution* ctx_;
};

struct DiscoveryOptions {
  Strategy strategy = Strategy::kEdge;
  int k = 10;              // nodes per layer (edge, node, random)
  double fraction = 0.01;  // top-p, as a fraction of the layer's features
  double threshold = 0.0;  // cumulative-importance target
  bool include_errors = true;
  bool record_edges = true;
  std::uint64_t seed = 0;
};

/// Selects per-layer node sets from the top layer down to read point 0.
/// Ties go to the lower feature index. k above a layer's width is clamped
/// and noted in the graph's warnings.
CircuitGraph discover_circuit(ScoreSource& src, const DiscoveryOptions& opt);

}  // namespace vitscope::circuits
