#include "fixtures.hpp"

#include "vitscope/attribution/importance.hpp"
#include "vitscope/attribution/objective.hpp"

#include <doctest.h>

#include <algorithm>
#include <numeric>

using namespace vitscope;
using namespace vitscope::attribution;
using backbone::GradMode;

namespace {

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int i, int j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t q = i; q <= j; ++q) r[idx[q]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double num = 0, da = 0, db = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

// Edge importances of SAE layer `l` into `l + 1` from the explicit
// (token, channel) x (token, channel) Jacobian of block l, one backward pass
// per output coordinate.
Matrix jacobian_oracle(const ReplacementModel& rm, ImageAttribution& ctx, int l) {
  const auto& bb = *rm.backbone;
  const auto& rec = ctx.record();
  const int T = bb.num_tokens(), d = bb.width();
  Matrix jac(T * d, T * d);  // row (t', c) -> d out / d in (t, c'), flattened row-major
  for (int t = 0; t < T; ++t) {
    for (int c = 0; c < d; ++c) {
      Matrix onehot = Matrix::Zero(T, d);
      onehot(t, c) = 1.0;
      const Matrix row = bb.backward_block(l, *rec.blocks[l], onehot, ctx.mode(), nullptr);
      for (int s = 0; s < T; ++s) jac.row(t * d + c).segment(s * d, d) = row.row(s);
    }
  }
  const auto& up = *rm.layers[l].sae();
  const auto& dn = *rm.layers[l + 1].sae();
  const Matrix& x1 = rec.read_points[l + 1];
  const Matrix& g1 = ctx.gradient(l + 1);
  const auto codes1 = sae::encode(dn, x1);
  const int f1 = dn.num_features();

  // Cotangent at x_{l+1} of every downstream node, flattened.
  std::vector<RowVector> cot(f1 + 1, RowVector::Zero(T * d));
  for (int t = 0; t < T; ++t) {
    const RowVector gs = g1.row(t).cwiseProduct(dn.in_std);
    Matrix active_proj = Matrix::Zero(d, d);  // d xhat / d x for this token
    for (std::size_t j = 0; j < codes1[t].size(); ++j) {
      const int i = codes1[t].index[j];
      const double dm_dd = gs.dot(dn.w_dec.col(i));
      cot[i].segment(t * d, d) += dm_dd * dn.w_enc.row(i).cwiseQuotient(dn.in_std);
      active_proj += dn.in_std.transpose().asDiagonal() * dn.w_dec.col(i) *
                     dn.w_enc.row(i).cwiseQuotient(dn.in_std);
    }
    cot[f1].segment(t * d, d) = g1.row(t) - g1.row(t) * active_proj;
  }

  const auto dec0 = rm.layers[l].decompose(rec.read_points[l]);
  const auto& base = rm.layers[l].baseline();
  const auto& ebase = rm.layers[l].error_baseline();
  const int f0 = up.num_features();
  Matrix out(f0 + 1, f1 + 1);
  for (int j = 0; j <= f1; ++j) {
    const RowVector h = cot[j] * jac;
    for (int u = 0; u <= f0; ++u) {
      double s = 0.0;
      for (int t = 0; t < T; ++t) {
        const RowVector ht = h.segment(t * d, d);
        if (u < f0) {
          s += ht.cwiseProduct(up.in_std).dot(up.w_dec.col(u)) * (dec0.acts(t, u) - base(u));
        } else {
          s += ht.dot(dec0.error.row(t) - ebase);
        }
      }
      out(u, j) = s;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("normalized logit") {
  RowVector l(3);
  l << 2, 0, 1;
  CHECK(normalized_logit(l, 0) == doctest::Approx(1.0));
  RowVector u = RowVector::Constant(4, 0.7);
  for (int c = 0; c < 4; ++c) CHECK(normalized_logit(u, c) == doctest::Approx(0.0));
}

TEST_CASE("objective parsing") {
  const auto a = Objective::parse("logit:3");
  CHECK(a.kind == Objective::Kind::kNormalizedLogit);
  CHECK(a.target_class == 3);
  const auto b = Objective::parse("feature:2:17");
  CHECK(b.kind == Objective::Kind::kFeature);
  CHECK(b.layer == 2);
  CHECK(b.feature == 17);
  CHECK_THROWS_AS(Objective::parse("banana"), InputError);
}

TEST_CASE("feature objective of a dead feature is zero") {
  auto t = fixtures::tiny_model(2);
  auto dead = std::make_shared<sae::SaeParams>(*t.saes[1]);
  dead->w_enc.row(3).setZero();
  t.saes[1] = dead;
  const auto rm = t.sae_model();
  CHECK(eval_objective(rm, Objective::feature_activation(1, 3), t.images[0]) == 0.0);
}

TEST_CASE("linear unit node: importance is the displacement") {
  // One class token, one channel, logits (x, -x): m = x for class 0.
  fixtures::LinearToy toy;
  toy.x0 = Matrix::Constant(1, 1, 2.0);
  toy.head = Matrix(1, 2);
  toy.head << 1.0, -1.0;
  const auto rm = fixtures::neuron_model(toy, RowVector::Constant(1, 0.5));
  ImageAttribution ctx(rm, backbone::Image(8), Objective::logit(0), GradMode::kCorrected);
  CHECK(ctx.node_importance(0)(0) == doctest::Approx(1.5));
}

TEST_CASE("zero displacement gives zero importance") {
  auto toy = fixtures::random_linear_toy(3, 4, 2, 3, 5);
  const RowVector base = toy.x0.row(0);
  toy.x0 = base.replicate(3, 1);
  const auto rm = fixtures::neuron_model(toy, base);
  ImageAttribution ctx(rm, backbone::Image(8), Objective::logit(1), GradMode::kCorrected);
  CHECK(ctx.node_importance(0).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("identity block: edge score is gradient times displacement") {
  auto toy = fixtures::random_linear_toy(2, 3, 1, 2, 8);
  toy.mix[0].setZero();
  const RowVector base = RowVector::Constant(3, 0.25);
  const auto rm = fixtures::neuron_model(toy, base);
  ImageAttribution ctx(rm, backbone::Image(8), Objective::logit(0), GradMode::kCorrected);
  const Matrix& g1 = ctx.gradient(1);
  for (int d = 0; d < 3; ++d) {
    const RowVector e = ctx.edge_scores(0, d);
    double expect = 0.0;
    for (int t = 0; t < 2; ++t) expect += g1(t, d) * (toy.x0(t, d) - base(d));
    for (int u = 0; u < 3; ++u) CHECK(e(u) == doctest::Approx(u == d ? expect : 0.0));
  }
}

TEST_CASE("vanilla gradients match finite differences") {
  const auto t = fixtures::tiny_model(3);
  const auto rm = t.sae_model();
  const auto m = Objective::logit(1);
  ImageAttribution ctx(rm, t.images[0], m, GradMode::kVanilla);
  const Matrix x0 = ctx.record().read_points[0];
  const Matrix& g = ctx.gradient(0);
  const double h = 1e-5;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    Matrix xp = x0, xm = x0;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    const double fp = normalized_logit(backbone::run_forward_from(t.vit, 0, xp, {}, false).logits, 1);
    const double fm = normalized_logit(backbone::run_forward_from(t.vit, 0, xm, {}, false).logits, 1);
    worst = std::max(worst, std::abs((fp - fm) / (2 * h) - g.data()[i]));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("aggregated edge importance equals the per-token-pair Jacobian loop") {
  // 4 patch tokens plus the class token, d = 8, f = 6.
  const auto t = fixtures::tiny_model(4, 6, 2);
  const auto rm = t.sae_model();
  for (GradMode mode : {GradMode::kCorrected, GradMode::kVanilla}) {
    for (int img = 0; img < 3; ++img) {
      ImageAttribution ctx(rm, t.images[img], Objective::logit(img % 3), mode);
      for (int l = 0; l < ctx.top_layer(); ++l) {
        std::vector<int> all(ctx.num_nodes(l + 1));
        std::iota(all.begin(), all.end(), 0);
        const Matrix fast = ctx.edge_importance(l, all);
        const Matrix oracle = jacobian_oracle(rm, ctx, l);
        CHECK((fast - oracle).cwiseAbs().maxCoeff() <= 1e-5);
        CHECK((fast - ctx.naive_edge_importance(l, all)).cwiseAbs().maxCoeff() <= 1e-5);
      }
    }
  }
}

TEST_CASE("node importance ranks features like direct patching") {
  const auto t = fixtures::tiny_model(6, 24, 4, 1);
  const auto rm = t.sae_model();
  const int layer = 1;
  const auto& basis = rm.layers[layer];
  std::vector<double> importance, effect;
  for (int img = 0; img < 4; ++img) {
    const auto m = Objective::logit(img % 3);
    ImageAttribution ctx(rm, t.images[img], m, GradMode::kCorrected);
    const RowVector imp = ctx.node_importance(layer);
    for (int u = 0; u < basis.size(); ++u) {
      if (ctx.decomposition(layer).acts.col(u).isZero() && basis.baseline()(u) == 0.0) continue;
      const auto patched = backbone::run_forward(
          t.vit, t.images[img],
          [&](int rp, Matrix& x) {
            if (rp != layer) return;
            auto d = basis.decompose(x);
            d.acts.col(u).setConstant(basis.baseline()(u));
            x = basis.compose(d.acts, d.error);
          },
          false);
      importance.push_back(imp(u));
      effect.push_back(ctx.objective_value() - eval_objective(rm, m, patched));
    }
  }
  REQUIRE(importance.size() >= 10);
  CHECK(spearman(importance, effect) >= 0.9);
}

TEST_CASE("completeness on a linear network") {
  const auto toy = fixtures::random_linear_toy(3, 4, 2, 3, 9);
  const auto rm = fixtures::neuron_model(toy, RowVector::Zero(4));
  for (GradMode mode : {GradMode::kCorrected, GradMode::kVanilla}) {
    for (int l = 0; l <= 2; ++l) {
      CHECK(completeness_residual(rm, Objective::logit(2), backbone::Image(8), l, mode) <= 1e-10);
    }
  }
}

TEST_CASE("completeness on the transformer") {
  const auto t = fixtures::tiny_model(7, 6, 2, 2, 8, 24);
  const auto rm = t.sae_model();
  double vanilla_rel = 0.0;
  int n = 0;
  for (const auto& img : t.images) {
    const auto m = Objective::logit(n % 3);
    const double mv = std::abs(eval_objective(rm, m, img));
    for (int l = 0; l <= 2; ++l) {
      CHECK(verify_completeness(rm, m, img, l) <= 1e-4 * mv);
    }
    vanilla_rel += completeness_residual(rm, m, img, 0, GradMode::kVanilla) / mv;
    ++n;
  }
  CHECK(vanilla_rel / n > 1e-2);
  CHECK_THROWS_AS(verify_completeness(rm, Objective::logit(0), t.images[0], 0, GradMode::kVanilla),
                  UnsupportedError);
}
