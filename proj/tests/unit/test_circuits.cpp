#include "fixtures.hpp"

#include "vitscope/attribution/importance.hpp"
#include "vitscope/circuits/discovery.hpp"
#include "vitscope/circuits/evaluate.hpp"
#include "vitscope/circuits/metrics.hpp"
#include "vitscope/circuits/similarity.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

using namespace vitscope;
using namespace vitscope::circuits;
using attribution::Objective;

namespace {

// Layer 1 holds x (0) and y (1), layer 0 holds a (0) and b (1).
class FixtureSource final : public ScoreSource {
 public:
  int top_layer() const override { return 1; }
  int num_features(int) const override { return 2; }
  bool has_error(int) const override { return false; }
  RowVector node_scores(int layer) override {
    RowVector r(2);
    if (layer == 1) {
      r << 3, 2;
    } else {
      r << 5, 5;
    }
    return r;
  }
  RowVector outgoing_total(int layer) override { return node_scores(layer); }
  RowVector edge_scores(int, int downstream) override {
    RowVector r(2);
    if (downstream == 0) {
      r << 5, 1;
    } else {
      r << 0, 4;
    }
    return r;
  }
  RowVector node_activation(int) override { return RowVector::Ones(2); }
};

std::vector<int> features_at(const CircuitGraph& g, int layer) { return g.features(layer); }

std::vector<int> layer_sizes(const attribution::ReplacementModel& rm, int top) {
  std::vector<int> s;
  for (int l = 0; l <= top; ++l) s.push_back(rm.layers[l].size());
  return s;
}

std::shared_ptr<const sae::SaeParams> identity_sae(int d) {
  auto s = std::make_shared<sae::SaeParams>();
  s->k = d;
  s->w_enc = Matrix::Identity(d, d);
  s->w_dec = Matrix::Identity(d, d);
  s->b_pre = RowVector::Zero(d);
  s->in_mean = RowVector::Zero(d);
  s->in_std = RowVector::Ones(d);
  return s;
}

attribution::ReplacementModel identity_sae_model(const backbone::ResidualBackbone& bb) {
  attribution::ReplacementModel rm;
  rm.backbone = &bb;
  for (int l = 0; l < bb.num_read_points(); ++l) {
    auto s = identity_sae(bb.width());
    rm.saes.push_back(s);
    rm.layers.push_back(attribution::LayerBasis::from_sae(s, RowVector::Zero(bb.width()), RowVector::Zero(bb.width())));
  }
  return rm;
}

CircuitGraph hand_circuit(const std::vector<std::vector<int>>& features, bool errors = false) {
  CircuitGraph g;
  g.objective = Objective::logit(0);
  g.top = static_cast<int>(features.size()) - 1;
  g.layers.resize(features.size());
  for (std::size_t l = 0; l < features.size(); ++l) {
    for (int i : features[l]) g.layers[l].push_back({{static_cast<int>(l), false, i}, 0.0, 0.0});
    if (errors) g.layers[l].push_back({{static_cast<int>(l), true, 0}, 0.0, 0.0});
  }
  return g;
}

// Keep-only evaluation written out with the SAE primitives directly.
double keep_only_oracle(const fixtures::TinyModel& t, const CircuitGraph& c, const backbone::Image& img) {
  const auto rec = backbone::run_forward(
      t.vit, img,
      [&](int rp, Matrix& x) {
        if (rp > c.top) return;
        const auto& s = *t.saes[rp];
        const RowVector med = t.stats[rp].feature_medians();
        const auto codes = sae::encode(s, x);
        const Matrix err = x - sae::decode(s, codes);
        std::vector<sae::SparseCode> pinned(x.rows());
        for (Eigen::Index tok = 0; tok < x.rows(); ++tok) {
          for (int i = 0; i < s.num_features(); ++i) {
            double v = 0.0;
            for (std::size_t j = 0; j < codes[tok].size(); ++j) {
              if (codes[tok].index[j] == i) v = codes[tok].value[j];
            }
            if (!c.contains(rp, i)) v = med(i);
            if (v != 0.0) {
              pinned[tok].index.push_back(i);
              pinned[tok].value.push_back(v);
            }
          }
        }
        Matrix out = sae::decode(s, pinned);
        if (c.has_error(rp)) {
          out += err;
        } else {
          out.rowwise() += t.stats[rp].error_median;
        }
        x = out;
      },
      false);
  return attribution::normalized_logit(rec.logits, c.objective.target_class);
}

}  // namespace

TEST_CASE("hand-built graph") {
  FixtureSource src;
  DiscoveryOptions opt;
  opt.k = 1;
  opt.strategy = Strategy::kEdge;
  auto g = discover_circuit(src, opt);
  CHECK(features_at(g, 1) == std::vector<int>{0});
  CHECK(features_at(g, 0) == std::vector<int>{0});

  opt.strategy = Strategy::kNode;
  g = discover_circuit(src, opt);
  CHECK(features_at(g, 1) == std::vector<int>{0});
  CHECK(features_at(g, 0) == std::vector<int>{0});

  opt.strategy = Strategy::kThreshold;
  opt.threshold = 5.0;
  g = discover_circuit(src, opt);
  CHECK(features_at(g, 0) == std::vector<int>{0});

  opt.strategy = Strategy::kEdge;
  g = discover_circuit(src, opt);
  REQUIRE(g.edges.size() == 1);
  CHECK(g.edges[0].importance == 5.0);
}

TEST_CASE("strategy names") {
  CHECK(strategy_from_string("edge-based") == Strategy::kEdge);
  CHECK(strategy_from_string("top-p") == Strategy::kTopP);
  CHECK_THROWS_AS(strategy_from_string("greedy"), ConfigError);
}

TEST_CASE("discovery on the transformer") {
  const auto t = fixtures::tiny_model(11);
  const auto rm = t.sae_model();
  attribution::ImageAttribution ctx(rm, t.images[0], Objective::logit(1), backbone::GradMode::kCorrected);
  AttributionScoreSource src(ctx);

  SUBCASE("random strategy is reproducible") {
    DiscoveryOptions opt;
    opt.strategy = Strategy::kRandom;
    opt.k = 3;
    opt.seed = 5;
    const auto a = discover_circuit(src, opt);
    const auto b = discover_circuit(src, opt);
    for (int l = 0; l <= a.top; ++l) {
      CHECK(a.features(l) == b.features(l));
      CHECK(a.features(l).size() == 3);
    }
  }
  SUBCASE("k above the layer width is clamped with a warning") {
    DiscoveryOptions opt;
    opt.k = 100;
    const auto g = discover_circuit(src, opt);
    CHECK_FALSE(g.warnings.empty());
    for (int l = 0; l <= g.top; ++l) CHECK(g.features(l).size() == 6);
  }
  SUBCASE("k equal to the width gives the full graph") {
    DiscoveryOptions opt;
    opt.k = 6;
    auto g = discover_circuit(src, opt);
    g.objective = Objective::logit(1);
    CHECK(g.num_nodes() == CircuitGraph::full(layer_sizes(rm, g.top), g.top).num_nodes());
    CHECK(faithfulness(rm, g, t.images[0]).value() == 1.0);
  }
  SUBCASE("edge-based picks the top nodes by node importance at the top layer") {
    DiscoveryOptions opt;
    opt.k = 2;
    const auto g = discover_circuit(src, opt);
    const RowVector imp = ctx.node_importance(g.top);
    const auto feats = g.features(g.top);
    for (int i = 0; i < 6; ++i) {
      if (std::find(feats.begin(), feats.end(), i) != feats.end()) continue;
      for (int j : feats) CHECK(imp(j) >= imp(i));
    }
  }
}

TEST_CASE("evaluation boundaries") {
  const auto t = fixtures::tiny_model(12);
  const auto rm = t.sae_model();
  const int top = 2;
  auto full = CircuitGraph::full(layer_sizes(rm, top), top);
  auto empty = CircuitGraph::empty(top);
  full.objective = empty.objective = Objective::logit(2);
  for (const auto& img : t.images) {
    const RowVector base = backbone::forward_logits(t.vit, img);
    CHECK((run_with_circuit(rm, full, img, CircuitMode::kKeepOnly).logits - base).cwiseAbs().maxCoeff() <= 1e-5);
    CHECK((run_with_circuit(rm, empty, img, CircuitMode::kAblate).logits.array() == base.array()).all());
    const auto terms = faithfulness_terms(rm, full.objective, top, img);
    CHECK(circuit_objective(rm, empty, img, CircuitMode::kKeepOnly) == terms.m_empty);
    if (!terms.defined()) continue;
    CHECK(faithfulness(rm, full, img, terms).value() == 1.0);
    CHECK(faithfulness(rm, empty, img, terms).value() == 0.0);
    CHECK(reported_completeness(rm, empty, img, terms).value() == 0.0);
    CHECK(reported_completeness(rm, full, img, terms).value() == 1.0);
  }
}

TEST_CASE("faithfulness matches a straight-line keep-only recomputation") {
  const auto t = fixtures::tiny_model(13, 6, 2, 1);
  const auto rm = t.sae_model();
  for (int img = 0; img < 6; ++img) {
    attribution::ImageAttribution ctx(rm, t.images[img], Objective::logit(img % 3), backbone::GradMode::kCorrected);
    AttributionScoreSource src(ctx);
    DiscoveryOptions opt;
    opt.k = 2;
    auto c = discover_circuit(src, opt);
    c.objective = Objective::logit(img % 3);
    const double m_c = keep_only_oracle(t, c, t.images[img]);
    auto none = hand_circuit({{}, {}});
    none.objective = c.objective;
    const double m_0 = keep_only_oracle(t, none, t.images[img]);
    const double m_g = attribution::normalized_logit(backbone::forward_logits(t.vit, t.images[img]), img % 3);
    const auto f = faithfulness(rm, c, t.images[img]);
    REQUIRE(f.has_value());
    CHECK(*f == doctest::Approx((m_c - m_0) / (m_g - m_0)).epsilon(1e-9));
  }
}

TEST_CASE("completeness of the feature that gates the decision") {
  // One class token, two channels; the logit reads channel 0 only.
  fixtures::LinearToy toy;
  toy.x0 = Matrix(1, 2);
  toy.x0 << 3.0, 1.0;
  toy.head = Matrix(2, 2);
  toy.head << 1, -1, 0, 0;
  const auto rm = identity_sae_model(toy);
  auto gate = hand_circuit({{0}});
  CHECK(reported_completeness(rm, gate, backbone::Image(8)).value() == doctest::Approx(1.0));
  auto other = hand_circuit({{1}});
  CHECK(reported_completeness(rm, other, backbone::Image(8)).value() == doctest::Approx(0.0));
}

TEST_CASE("causality") {
  // Identity block: read point 1 copies read point 0.
  auto toy = fixtures::random_linear_toy(1, 2, 1, 2, 3);
  toy.mix[0].setZero();
  toy.x0 << 3.0, 2.0;
  const auto rm = identity_sae_model(toy);
  const backbone::Image img(8);
  CHECK(causality(rm, hand_circuit({{0}, {0}}), img).value() == doctest::Approx(1.0));
  CHECK(std::abs(causality(rm, hand_circuit({{0}, {1}}), img).value()) <= 1e-12);
  CHECK_FALSE(causality(rm, hand_circuit({{0}, {}}), img).has_value());
}

TEST_CASE("k grid and AUC") {
  CHECK(k_fractions().size() == 11);
  CHECK(k_grid(64) == std::vector<int>{0, 1, 3, 6, 13, 32, 64});
  CHECK(metric_auc([](int) { return 1.0; }, 64).auc == 1.0);
  const auto capped = metric_auc([](int k) { return k == 13 ? 1.2 : 1.0; }, 64);
  CHECK(capped.auc == 1.0);
  CHECK(capped.raw[4] == 1.2);
  const auto mono = metric_auc([](int k) { return k / 64.0; }, 64);
  CHECK(mono.auc >= 0.0);
  CHECK(mono.auc <= 1.0);
  CHECK(mono.auc == doctest::Approx((0 + 1 + 3 + 6 + 13 + 32 + 64) / 64.0 / 7.0));
  const auto nan = curve_from_values({0, 1}, {std::nan(""), 1.0});
  CHECK(nan.auc == doctest::Approx(0.5));
}

TEST_CASE("paired t-test") {
  const auto r = paired_t_test({3, 5, 7, 9, 11}, {2, 3, 4, 5, 6});
  CHECK(r.n == 5);
  CHECK(r.mean_difference == doctest::Approx(3.0));
  CHECK(r.t == doctest::Approx(4.242640687119285));
  CHECK(r.p_one_sided == doctest::Approx(0.0066177997818413475).epsilon(1e-6));
}

TEST_CASE("rank AUC") {
  CHECK(rank_auc({3, 4, 5}, {0, 1, 2}) == 1.0);
  CHECK(rank_auc({0, 1, 2}, {3, 4, 5}) == 0.0);
  CHECK(rank_auc({1, 2, 3}, {1, 2, 3}) == 0.5);
  CHECK(rank_auc({1}, {1}) == 0.5);
}

TEST_CASE("adjusted Dice") {
  std::vector<int> a(10);
  std::iota(a.begin(), a.end(), 0);
  const auto same = adjusted_dice(a, a, 100).value();
  CHECK(same.dice == 1.0);
  CHECK(same.expected == doctest::Approx(0.1));
  CHECK(same.adjusted == doctest::Approx(0.9));

  // Monte Carlo check of the expectation: random B of size 10.
  Rng rng(17);
  double sum = 0.0, adj = 0.0;
  const int trials = 100000;
  std::vector<int> pool(100);
  std::iota(pool.begin(), pool.end(), 0);
  for (int s = 0; s < trials; ++s) {
    for (int i = 0; i < 10; ++i) std::swap(pool[i], pool[rng.uniform_int(i, 99)]);
    const std::vector<int> b(pool.begin(), pool.begin() + 10);
    const auto d = adjusted_dice(a, b, 100).value();
    sum += d.dice;
    adj += d.adjusted;
  }
  CHECK(sum / trials == doctest::Approx(same.expected).epsilon(0.02));
  CHECK(std::abs(adj / trials) <= 0.003);

  const auto disjoint = adjusted_dice({0, 1, 2}, {3, 4, 5}, 50).value();
  CHECK(disjoint.dice == 0.0);
  CHECK(disjoint.adjusted == doctest::Approx(-disjoint.expected));
  CHECK_FALSE(adjusted_dice({}, {}, 10).has_value());
}

TEST_CASE("decoder cosines") {
  Vector child(2), p1(2), p2(2);
  const double pi = std::acos(-1.0);
  p1 << std::cos(pi / 6), std::sin(pi / 6);
  p2 << std::cos(pi / 6), -std::sin(pi / 6);
  child << 1, 0;
  CHECK(cosine(p1, child) == doctest::Approx(0.8660254));
  CHECK(combined_cosine({p1, p2}, child) == doctest::Approx(1.0));
  Vector e0 = Vector::Unit(3, 0), e1 = Vector::Unit(3, 1);
  CHECK(cosine(e0, e1) == 0.0);
  CHECK(cosine(e0, e0) == doctest::Approx(1.0));

  std::vector<std::shared_ptr<const sae::SaeParams>> saes{identity_sae(3), identity_sae(3)};
  auto c = hand_circuit({{1}, {1}});
  c.edges.push_back({{0, false, 1}, {1, false, 1}, 2.0});
  const auto rep = feature_similarity_trace(c, saes);
  REQUIRE(rep.preserved.size() == 1);
  CHECK(rep.preserved[0].best_next == 1);
  CHECK(rep.preserved[0].best_cosine == doctest::Approx(1.0));
  CHECK(rep.preserved[0].best_in_circuit);
  CHECK(rep.preserved[0].best_is_max_edge);
}

TEST_CASE("circuit documents round-trip") {
  auto c = hand_circuit({{0, 2}, {1}}, true);
  c.edges.push_back({{0, false, 2}, {1, true, 0}, -0.5});
  c.warnings.push_back("w");
  const auto back = circuit_from_json(to_json(c));
  CHECK(back.features(0) == c.features(0));
  CHECK(back.has_error(1));
  REQUIRE(back.edges.size() == 1);
  CHECK(back.edges[0].dst.error);
  CHECK(back.edges[0].importance == -0.5);
  const auto comp = c.complement({4, 3});
  CHECK(comp.features(0) == std::vector<int>{1, 3});
  CHECK_FALSE(comp.has_error(0));
}
