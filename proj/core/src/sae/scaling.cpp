#include "vitscope/sae/scaling.hpp"

#include <unsupported/Eigen/NonLinearOptimization>

#include <cmath>
#include <set>

namespace vitscope::sae {
namespace {

ScalingLawParams unpack(const Eigen::VectorXd& v) { return {v(0), v(1), v(2), v(3), v(4), v(5)}; }

struct LogResidual {
  using Scalar = double;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;

  const std::vector<ScalingObservation>* obs;
  int inputs() const { return 6; }
  int values() const { return static_cast<int>(obs->size()); }

  int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& r) const {
    const auto p = unpack(x);
    for (int i = 0; i < values(); ++i) {
      const auto& o = (*obs)[i];
      const double model = p(o.f, o.k);
      r(i) = (model > 0.0 && std::isfinite(model)) ? std::log(model) - std::log(o.loss) : 1e6;
    }
    return 0;
  }

  int df(const Eigen::VectorXd& x, Eigen::MatrixXd& jac) const {
    const auto p = unpack(x);
    for (int i = 0; i < values(); ++i) {
      const auto& o = (*obs)[i];
      const double lk = std::log(o.k), lf = std::log(o.f);
      const double a = std::exp(p.alpha + p.beta_k * lk + p.beta_f * lf + p.gamma * lk * lf);
      const double b = std::exp(p.zeta + p.eta * lk);
      const double s = a + b;
      jac(i, 0) = a / s;
      jac(i, 1) = a * lk / s;
      jac(i, 2) = a * lf / s;
      jac(i, 3) = a * lk * lf / s;
      jac(i, 4) = b / s;
      jac(i, 5) = b * lk / s;
    }
    return 0;
  }
};

double rss_of(const LogResidual& fn, const Eigen::VectorXd& x) {
  Eigen::VectorXd r(fn.values());
  fn(x, r);
  return r.squaredNorm();
}

}  // namespace

double ScalingLawParams::operator()(double f, double k) const {
  const double lk = std::log(k), lf = std::log(f);
  return std::exp(alpha + beta_k * lk + beta_f * lf + gamma * lk * lf) + std::exp(zeta + eta * lk);
}

Json to_json(const ScalingLawParams& p) {
  return {{"alpha", p.alpha}, {"beta_k", p.beta_k}, {"beta_f", p.beta_f},
          {"gamma", p.gamma}, {"zeta", p.zeta},     {"eta", p.eta}};
}

ScalingLawParams scaling_law_params_from_json(const Json& j) {
  return {j.at("alpha").get<double>(), j.at("beta_k").get<double>(), j.at("beta_f").get<double>(),
          j.at("gamma").get<double>(), j.at("zeta").get<double>(),   j.at("eta").get<double>()};
}

ScalingFit fit_scaling_law(const std::vector<ScalingObservation>& obs) {
  std::set<std::pair<double, double>> distinct;
  std::set<double> fs, ks;
  for (const auto& o : obs) {
    if (!(o.loss > 0.0) || !(o.f > 0.0) || !(o.k > 0.0)) throw InputError("scaling fit: f, k and loss must be positive");
    distinct.emplace(o.f, o.k);
    fs.insert(o.f);
    ks.insert(o.k);
  }
  if (distinct.size() < 6) throw InputError("scaling fit needs at least 6 distinct (f, k) observations");
  if (fs.size() < 2 || ks.size() < 2) throw ConfigError("scaling fit: degenerate design, f and k must both vary");

  const int n = static_cast<int>(obs.size());
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) y(i) = std::log(obs[i].loss);

  // Starting points: the first term alone fitted linearly in log space,
  // with the second term placed at several scales below the data.
  Eigen::MatrixXd design(n, 4);
  for (int i = 0; i < n; ++i) {
    const double lk = std::log(obs[i].k), lf = std::log(obs[i].f);
    design.row(i) << 1.0, lk, lf, lk * lf;
  }
  const Eigen::VectorXd lin = design.colPivHouseholderQr().solve(y);
  const double y_min = y.minCoeff();

  LogResidual fn{&obs};
  Eigen::VectorXd best;
  double best_rss = std::numeric_limits<double>::infinity();
  for (double offset : {1.0, 2.0, 4.0, 8.0}) {
    for (double eta : {0.0, -0.5, 0.5}) {
      Eigen::VectorXd x(6);
      x << lin(0), lin(1), lin(2), lin(3), y_min - offset, eta;
      Eigen::LevenbergMarquardt<LogResidual> lm(fn);
      lm.parameters.maxfev = 20000;
      lm.parameters.xtol = 1e-14;
      lm.parameters.ftol = 1e-14;
      lm.minimize(x);
      const double r = rss_of(fn, x);
      if (std::isfinite(r) && r < best_rss) {
        best_rss = r;
        best = x;
      }
    }
  }
  if (best.size() == 0) throw TrainingError("scaling fit did not converge");

  ScalingFit fit;
  fit.params = unpack(best);
  fit.rss = best_rss;
  const double ss_tot = (y.array() - y.mean()).square().sum();
  fit.variance_explained = ss_tot > 0.0 ? 1.0 - best_rss / ss_tot : 1.0;
  return fit;
}

Contour iso_fvu_contour(const ScalingLawParams& p, double level, int width, const std::vector<double>& expansions,
                        double k_min, double k_max, double tol) {
  Contour out;
  for (double r : expansions) {
    const double f = r * width;
    const double hi_k = k_max > 0.0 ? k_max : f;
    double lo = std::log(k_min), hi = std::log(hi_k);
    auto g = [&](double lk) { return p(f, std::exp(lk)) - level; };
    double g_lo = g(lo), g_hi = g(hi);
    if (!(hi > lo) || g_lo * g_hi > 0.0) {
      out.unreachable.push_back(r);
      continue;
    }
    for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
      const double mid = 0.5 * (lo + hi);
      const double gm = g(mid);
      if (std::abs(gm) <= tol) {
        lo = hi = mid;
        break;
      }
      if ((gm < 0.0) == (g_lo < 0.0)) {
        lo = mid;
        g_lo = gm;
      } else {
        hi = mid;
      }
    }
    const double k = std::exp(0.5 * (lo + hi));
    out.points.push_back({r, k, p(f, k)});
  }
  return out;
}

Json to_json(const Contour& c) {
  Json pts = Json::array();
  for (const auto& p : c.points) pts.push_back({{"expansion", p.expansion}, {"k", p.k}, {"loss", p.loss}});
  return {{"points", pts}, {"unreachable", c.unreachable}, {"flagged", !c.unreachable.empty()}};
}

}  // namespace vitscope::sae
