#include "vitscope/circuits/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace vitscope::circuits {

std::optional<DiceScore> adjusted_dice(const std::vector<int>& a, const std::vector<int>& b, int n) {
  const std::set<int> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return std::nullopt;
  if (n <= 0) throw InputError("universe size must be positive");
  int inter = 0;
  for (int x : sa) inter += static_cast<int>(sb.count(x));
  const double na = static_cast<double>(sa.size()), nb = static_cast<double>(sb.size());
  DiceScore d;
  d.dice = 2.0 * inter / (na + nb);
  d.expected = 2.0 * na * nb / (static_cast<double>(n) * (na + nb));
  d.adjusted = d.dice - d.expected;
  return d;
}

std::optional<DiceScore> circuit_similarity(const CircuitGraph& c1, const CircuitGraph& c2, int layer, int n) {
  return adjusted_dice(c1.features(layer), c2.features(layer), n);
}

double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

double combined_cosine(const std::vector<Vector>& parents, const Vector& child) {
  if (parents.empty()) return 0.0;
  Vector sum = Vector::Zero(child.size());
  for (const auto& p : parents) {
    const double n = p.norm();
    if (n > 0.0) sum += p / n;
  }
  return cosine(sum, child);
}

Vector decoder_direction(const sae::SaeParams& sae, int feature) {
  return sae.w_dec.col(feature).cwiseProduct(sae.in_std.transpose());
}

SimilarityReport feature_similarity_trace(const CircuitGraph& c,
                                          const std::vector<std::shared_ptr<const sae::SaeParams>>& saes) {
  SimilarityReport r;
  for (int l = 0; l + 1 < c.num_layers(); ++l) {
    if (l + 1 >= static_cast<int>(saes.size()) || !saes[l] || !saes[l + 1]) {
      throw NotFoundError("feature similarity needs decoders for layers " + std::to_string(l) + " and " +
                          std::to_string(l + 1));
    }
    const auto& up = *saes[l];
    const auto& down = *saes[l + 1];
    Matrix next(down.width(), down.num_features());
    for (int j = 0; j < down.num_features(); ++j) next.col(j) = decoder_direction(down, j).normalized();
    for (int u : c.features(l)) {
      SimilarityEntry e;
      e.node = {l, false, u};
      const Vector cos = next.transpose() * decoder_direction(up, u).normalized();
      Eigen::Index arg = 0;
      e.best_cosine = cos.maxCoeff(&arg);
      e.best_next = static_cast<int>(arg);
      e.best_in_circuit = c.contains(l + 1, e.best_next);
      const CircuitEdge* strongest = nullptr;
      for (const auto& edge : c.edges) {
        if (edge.src == e.node && !edge.dst.error && (!strongest || edge.importance > strongest->importance)) {
          strongest = &edge;
        }
      }
      e.best_is_max_edge = strongest && strongest->dst.index == e.best_next;
      r.preserved.push_back(e);
    }
    for (int d : c.features(l + 1)) {
      std::vector<std::pair<double, int>> parents;
      for (const auto& edge : c.edges) {
        if (edge.dst == NodeKey{l + 1, false, d} && !edge.src.error) parents.emplace_back(edge.importance, edge.src.index);
      }
      if (parents.size() < 2) continue;
      std::stable_sort(parents.begin(), parents.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      ParentEntry p;
      p.child = {l + 1, false, d};
      const Vector child = decoder_direction(down, d);
      std::vector<Vector> vecs;
      for (int q = 0; q < 2; ++q) {
        p.parents.push_back({l, false, parents[q].second});
        vecs.push_back(decoder_direction(up, parents[q].second));
        p.parent_cosines.push_back(cosine(vecs.back(), child));
      }
      p.combined = combined_cosine(vecs, child);
      r.combined.push_back(p);
    }
  }
  return r;
}

Json to_json(const DiceScore& d) { return {{"dice", d.dice}, {"expected", d.expected}, {"adjusted", d.adjusted}}; }

Json to_json(const SimilarityReport& r) {
  Json pres = Json::array();
  for (const auto& e : r.preserved) {
    pres.push_back({{"node", to_json(e.node)},
                    {"best_next", e.best_next},
                    {"cosine", e.best_cosine},
                    {"in_circuit", e.best_in_circuit},
                    {"carries_max_edge", e.best_is_max_edge}});
  }
  Json comb = Json::array();
  for (const auto& p : r.combined) {
    Json parents = Json::array();
    for (std::size_t i = 0; i < p.parents.size(); ++i) {
      parents.push_back({{"node", to_json(p.parents[i])}, {"cosine", p.parent_cosines[i]}});
    }
    comb.push_back({{"child", to_json(p.child)}, {"parents", parents}, {"combined_cosine", p.combined}});
  }
  return {{"preserved", pres}, {"combined", comb}};
}

}  // namespace vitscope::circuits
