#include "fixtures.hpp"

#include "vitscope/intervene/intervention.hpp"

#include <doctest.h>

using namespace vitscope;
using namespace vitscope::intervene;

namespace {

InterventionSpec spec(std::vector<FeatureRef> nodes, Policy p = Policy::kMedian) {
  InterventionSpec s;
  s.nodes = std::move(nodes);
  s.policy = p;
  return s;
}

}  // namespace

TEST_CASE("an empty spec leaves logits bit for bit") {
  const auto t = fixtures::tiny_model(21);
  const auto h = apply_intervention(t.vit, t.saes, t.stats, {});
  for (const auto& img : t.images) {
    CHECK((h.logits(img).array() == backbone::forward_logits(t.vit, img).array()).all());
  }
}

TEST_CASE("zeroing a feature that never fires changes nothing") {
  auto t = fixtures::tiny_model(22);
  auto s = std::make_shared<sae::SaeParams>(*t.saes[1]);
  s->w_enc.row(2).setZero();
  t.saes[1] = s;
  const auto h = apply_intervention(t.vit, t.saes, {}, spec({{1, 2}}, Policy::kZero));
  for (const auto& img : t.images) {
    CHECK((h.logits(img).array() == backbone::forward_logits(t.vit, img).array()).all());
  }
}

TEST_CASE("pinning moves the residual along the decoder direction") {
  const auto t = fixtures::tiny_model(23);
  const int layer = 1, feature = 3;
  const auto h = apply_intervention(t.vit, t.saes, {}, spec({{layer, feature}}, Policy::kZero));
  const auto& s = *t.saes[layer];
  const Vector dir = s.w_dec.col(feature).cwiseProduct(s.in_std.transpose());
  for (const auto& img : t.images) {
    const auto manual = backbone::run_forward(
        t.vit, img,
        [&](int rp, Matrix& x) {
          if (rp != layer) return;
          const auto codes = sae::encode(s, x);
          for (Eigen::Index tok = 0; tok < x.rows(); ++tok) {
            for (std::size_t j = 0; j < codes[tok].size(); ++j) {
              if (codes[tok].index[j] == feature) x.row(tok) -= codes[tok].value[j] * dir.transpose();
            }
          }
        },
        false);
    CHECK((h.logits(img) - manual.logits).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("specs are idempotent and order-free") {
  const auto a = spec({{2, 5}, {1, 3}, {2, 5}});
  const auto b = spec({{0, 1}, {1, 3}});
  CHECK(a.normalized().nodes == std::vector<FeatureRef>{{1, 3}, {2, 5}});
  CHECK(combine(a, a).nodes == a.normalized().nodes);
  CHECK(combine(a, b).nodes == combine(b, a).nodes);
  CHECK_THROWS_AS(combine(a, spec({}, Policy::kZero)), InputError);

  const auto t = fixtures::tiny_model(24);
  const auto ha = apply_intervention(t.vit, t.saes, t.stats, a);
  const auto hn = apply_intervention(t.vit, t.saes, t.stats, a.normalized());
  const auto hab = apply_intervention(t.vit, t.saes, t.stats, combine(a, b));
  const auto hba = apply_intervention(t.vit, t.saes, t.stats, combine(b, a));
  for (const auto& img : t.images) {
    CHECK((ha.logits(img).array() == hn.logits(img).array()).all());
    CHECK((hab.logits(img).array() == hba.logits(img).array()).all());
  }
}

TEST_CASE("spec documents") {
  const auto s = intervention_spec_from_json(
      Json::parse(R"({"nodes": [{"layer": 2, "index": 7}, "L3#12"], "policy": "zero"})"));
  CHECK(s.policy == Policy::kZero);
  CHECK(s.nodes == std::vector<FeatureRef>{{2, 7}, {3, 12}});
  CHECK(intervention_spec_from_json(to_json(s)).nodes == s.nodes);
  CHECK(intervention_spec_from_json(Json::parse(R"({"nodes": []})")).nodes.empty());
  CHECK_THROWS_WITH_AS(intervention_spec_from_json(Json::object()), doctest::Contains("nodes"), InputError);
  CHECK_THROWS_AS(intervention_spec_from_json(Json::parse(R"({"policy": "mean"})")), InputError);
  CHECK_THROWS_AS(parse_feature_ref("L3-12"), InputError);
  CHECK(policy_from_string("median") == Policy::kMedian);
}

TEST_CASE("intervention errors") {
  const auto t = fixtures::tiny_model(25);
  CHECK_THROWS_AS(apply_intervention(t.vit, t.saes, t.stats, spec({{1, 99}})), NotFoundError);
  CHECK_THROWS_AS(apply_intervention(t.vit, t.saes, t.stats, spec({{9, 0}})), NotFoundError);
  CHECK_THROWS_AS(apply_intervention(t.vit, t.saes, {}, spec({{1, 0}})), ConfigError);
}

TEST_CASE("debias evaluation") {
  // The linear toy ignores its input, so both probe splits score identically.
  auto toy = fixtures::random_linear_toy(2, 3, 1, 3, 4);
  const auto h = InterventionHandle(toy, {}, {}, {});
  const int predicted = h.predict(backbone::Image(8));
  backbone::Dataset eval, spurious, class_only;
  for (int i = 0; i < 4; ++i) {
    eval.samples.push_back({backbone::Image(8), i < 3 ? predicted : (predicted + 1) % 3, false});
    spurious.samples.push_back({backbone::Image(8), -1, true});
    class_only.samples.push_back({backbone::Image(8), 0, false});
  }
  const auto r = debias_eval(h, eval, spurious, class_only, 0);
  CHECK(r.accuracy == doctest::Approx(0.75));
  CHECK(r.auc == 0.5);
  CHECK(r.eval_images == 4);
  CHECK(r.spurious_planted_rate == (predicted == 0 ? 1.0 : 0.0));
  CHECK_THROWS_AS(debias_eval(h, eval, backbone::Dataset{}, class_only, 0), InputError);
  CHECK_THROWS_AS(debias_eval(h, eval, spurious, backbone::Dataset{}, 0), InputError);
  const Json j = to_json(r);
  CHECK(j.contains("auc"));
}

TEST_CASE("histograms") {
  const auto hgm = histogram({0.0, 0.5, 1.0, 1.0}, 2);
  CHECK(hgm.lo == 0.0);
  CHECK(hgm.hi == 1.0);
  REQUIRE(hgm.counts.size() == 2);
  CHECK(hgm.counts[0] + hgm.counts[1] == 4);
  CHECK(hgm.counts[1] == 3);
}
