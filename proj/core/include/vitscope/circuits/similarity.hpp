#pragma once

#include "vitscope/circuits/graph.hpp"
#include "vitscope/sae/sae.hpp"

#include <memory>
#include <optional>
#include <vector>

namespace vitscope::circuits {

struct DiceScore {
  double dice = 0.0;
  double expected = 0.0;  // 2|A||B| / (N (|A| + |B|))
  double adjusted = 0.0;
};

/// Adjusted Dice of two index sets from a universe of n; nullopt when both
/// are empty.
std::optional<DiceScore> adjusted_dice(const std::vector<int>& a, const std::vector<int>& b, int n);
std::optional<DiceScore> circuit_similarity(const CircuitGraph& c1, const CircuitGraph& c2, int layer, int n);

double cosine(const Vector& a, const Vector& b);
/// Cosine between the child and the normalized sum of the normalized parents.
double combined_cosine(const std::vector<Vector>& parents, const Vector& child);

/// Decoder direction of a feature in residual coordinates.
Vector decoder_direction(const sae::SaeParams& sae, int feature);

struct SimilarityEntry {
  NodeKey node;
  int best_next = -1;  // next-layer feature with the largest decoder cosine
  double best_cosine = 0.0;
  bool best_in_circuit = false;
  bool best_is_max_edge = false;  // u's strongest outgoing edge lands on best_next
};

struct ParentEntry {
  NodeKey child;
  std::vector<NodeKey> parents;  // the two strongest feature parents by edge
  std::vector<double> parent_cosines;
  double combined = 0.0;
};

struct SimilarityReport {
  std::vector<SimilarityEntry> preserved;
  std::vector<ParentEntry> combined;
};

SimilarityReport feature_similarity_trace(const CircuitGraph& c,
                                          const std::vector<std::shared_ptr<const sae::SaeParams>>& saes);

Json to_json(const SimilarityReport& r);
Json to_json(const DiceScore& d);

}  // namespace vitscope::circuits
