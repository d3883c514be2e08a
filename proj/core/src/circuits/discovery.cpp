#include "vitscope/circuits/discovery.hpp"

#include "vitscope/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vitscope::circuits {
namespace {

// Feature indices ordered by descending score, lower index first on ties.
std::vector<int> ranking(const RowVector& scores, int n) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores(a) > scores(b); });
  return order;
}

std::vector<int> prefix_to_threshold(const RowVector& scores, int n, double tau) {
  const auto order = ranking(scores, n);
  double cum = 0.0, best = -std::numeric_limits<double>::infinity();
  std::size_t best_len = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    cum += scores(order[i]);
    if (cum >= tau) return {order.begin(), order.begin() + static_cast<long>(i) + 1};
    if (cum > best) {
      best = cum;
      best_len = i + 1;
    }
  }
  // Target unreachable: keep the prefix with the largest cumulative score.
  return {order.begin(), order.begin() + static_cast<long>(best_len)};
}

}  // namespace

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kEdge: return "edge";
    case Strategy::kNode: return "node";
    case Strategy::kTopP: return "top-p";
    case Strategy::kThreshold: return "threshold";
    case Strategy::kRandom: return "random";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  for (auto v : {Strategy::kEdge, Strategy::kNode, Strategy::kTopP, Strategy::kThreshold, Strategy::kRandom}) {
    if (to_string(v) == s) return v;
  }
  if (s == "edge-based") return Strategy::kEdge;
  if (s == "node-based") return Strategy::kNode;
  throw ConfigError("unknown strategy '" + s + "' (edge, node, top-p, threshold, random)");
}

CircuitGraph discover_circuit(ScoreSource& src, const DiscoveryOptions& opt) {
  const int top = src.top_layer();
  if (top < 0) throw InputError("objective leaves no layers to build a circuit from");
  if (opt.k < 0) throw InputError("k must be non-negative");
  CircuitGraph g;
  g.strategy = to_string(opt.strategy);
  g.k = opt.k;
  g.top = top;
  g.layers.resize(top + 1);

  auto layer_k = [&](int layer) {
    const int f = src.num_features(layer);
    int k = opt.k;
    if (opt.strategy == Strategy::kTopP) {
      if (opt.fraction < 0.0 || opt.fraction > 1.0) throw InputError("top-p fraction must lie in [0, 1]");
      k = static_cast<int>(std::lround(opt.fraction * f));
    }
    if (k > f) {
      g.warnings.push_back("k=" + std::to_string(k) + " exceeds the " + std::to_string(f) + " features of layer " +
                           std::to_string(layer) + "; clamped");
      k = f;
    }
    return k;
  };

  auto select = [&](int layer, const RowVector& scores) -> std::vector<int> {
    const int f = src.num_features(layer);
    if (opt.strategy == Strategy::kThreshold) return prefix_to_threshold(scores, f, opt.threshold);
    const int k = layer_k(layer);
    if (opt.strategy == Strategy::kRandom) {
      Rng rng(derive_seed({opt.seed, static_cast<std::uint64_t>(layer)}));
      std::vector<int> all(f);
      std::iota(all.begin(), all.end(), 0);
      for (int i = 0; i < k; ++i) std::swap(all[i], all[rng.uniform_int(i, f - 1)]);
      all.resize(k);
      std::sort(all.begin(), all.end());
      return all;
    }
    auto order = ranking(scores, f);
    order.resize(k);
    return order;
  };

  // Downstream node indices (features then error) of the selection at a layer.
  std::vector<std::vector<int>> chosen(top + 1);
  auto with_error = [&](int layer) {
    std::vector<int> d = chosen[layer];
    if (opt.include_errors && src.has_error(layer)) d.push_back(src.num_features(layer));
    return d;
  };

  const bool random = opt.strategy == Strategy::kRandom;
  RowVector top_scores = random ? RowVector::Zero(src.num_features(top) + (src.has_error(top) ? 1 : 0))
                                : src.node_scores(top);
  chosen[top] = select(top, top_scores);
  std::vector<RowVector> layer_scores(top + 1);
  layer_scores[top] = top_scores;

  for (int l = top - 1; l >= 0; --l) {
    const int n = src.num_features(l) + (src.has_error(l) ? 1 : 0);
    RowVector scores = RowVector::Zero(n);
    if (opt.strategy == Strategy::kNode) {
      scores = src.outgoing_total(l);
    } else if (!random) {
      for (int d : with_error(l + 1)) scores += src.edge_scores(l, d);
    }
    chosen[l] = select(l, scores);
    layer_scores[l] = scores;
  }

  for (int l = 0; l <= top; ++l) {
    const RowVector act = src.node_activation(l);
    for (int i : with_error(l)) {
      const bool err = src.has_error(l) && i == src.num_features(l);
      g.layers[l].push_back({{l, err, err ? 0 : i}, act(i), layer_scores[l](i)});
    }
  }
  if (opt.record_edges) {
    for (int l = 0; l < top; ++l) {
      const auto ups = with_error(l);
      for (int d : with_error(l + 1)) {
        const RowVector s = src.edge_scores(l, d);
        const bool d_err = src.has_error(l + 1) && d == src.num_features(l + 1);
        for (int u : ups) {
          const bool u_err = src.has_error(l) && u == src.num_features(l);
          g.edges.push_back({{l, u_err, u_err ? 0 : u}, {l + 1, d_err, d_err ? 0 : d}, s(u)});
        }
      }
    }
  }
  return g;
}

}  // namespace vitscope::circuits
