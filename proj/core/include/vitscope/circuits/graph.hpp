#pragma once

#include "vitscope/attribution/objective.hpp"
#include "vitscope/backbone/residual_backbone.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace vitscope::circuits {

struct NodeKey {
  int layer = 0;
  bool error = false;
  int index = 0;  // feature index; unused for the error node

  friend bool operator==(const NodeKey&, const NodeKey&) = default;
  friend auto operator<=>(const NodeKey&, const NodeKey&) = default;
};

struct CircuitNode {
  NodeKey key;
  double activation = 0.0;  // token-averaged
  double importance = 0.0;
};

struct CircuitEdge {
  NodeKey src;
  NodeKey dst;
  double importance = 0.0;
};

/// Per-layer node sets over read points [0, top] plus the scored edges
/// between adjacent layers. Layers above `top` are outside the circuit and
/// never intervened on.
struct CircuitGraph {
  attribution::Objective objective;
  std::string strategy;
  std::string basis = "sae";
  backbone::GradMode mode = backbone::GradMode::kCorrected;
  int k = 0;
  int image = -1;
  int top = 0;
  std::vector<std::vector<CircuitNode>> layers;  // layers[l], l in [0, top]
  std::vector<CircuitEdge> edges;
  std::vector<std::string> warnings;

  int num_layers() const { return static_cast<int>(layers.size()); }
  bool contains(int layer, int feature) const;
  bool has_error(int layer) const;
  std::vector<int> features(int layer) const;
  std::size_t num_nodes() const;

  /// Every feature (and error node when `errors`) of layers [0, top].
  static CircuitGraph full(const std::vector<int>& layer_sizes, int top, bool errors = true);
  static CircuitGraph empty(int top);
  /// Same layers, keeping exactly the nodes not in this circuit.
  CircuitGraph complement(const std::vector<int>& layer_sizes, bool errors_exist = true) const;
};

Json to_json(const NodeKey& k);
NodeKey node_key_from_json(const Json& j);
std::string node_label(const NodeKey& k);

/// Document layout: objective, strategy, layers with nodes {layer, kind,
/// index, activation, importance, card}, edges {src, dst, importance} and
/// normalization constants for shading.
Json to_json(const CircuitGraph& g);
CircuitGraph circuit_from_json(const Json& j);
void save_circuit(const std::filesystem::path& path, const CircuitGraph& g);
CircuitGraph load_circuit(const std::filesystem::path& path);

}  // namespace vitscope::circuits
