#pragma once

#include "vitscope/io.hpp"

#include <vector>

namespace vitscope::sae {

/// L(f, k) = exp(alpha + beta_k log k + beta_f log f + gamma log k log f) + exp(zeta + eta log k)
struct ScalingLawParams {
  double alpha = 0.0;
  double beta_k = 0.0;
  double beta_f = 0.0;
  double gamma = 0.0;
  double zeta = 0.0;
  double eta = 0.0;

  double operator()(double f, double k) const;
};

Json to_json(const ScalingLawParams& p);
ScalingLawParams scaling_law_params_from_json(const Json& j);

struct ScalingObservation {
  double f = 0.0;
  double k = 0.0;
  double loss = 0.0;
};

struct ScalingFit {
  ScalingLawParams params;
  double variance_explained = 0.0;  // of log loss
  double rss = 0.0;
};

/// Least squares on log loss (Levenberg-Marquardt, several starts).
/// Throws InputError for fewer than 6 distinct (f, k) pairs or
/// non-positive losses, ConfigError when all f or all k coincide.
ScalingFit fit_scaling_law(const std::vector<ScalingObservation>& obs);

struct ContourPoint {
  double expansion = 0.0;  // R = f / d
  double k = 0.0;
  double loss = 0.0;  // L(R d, k) at the solution
};

struct Contour {
  std::vector<ContourPoint> points;
  std::vector<double> unreachable;  // expansion rates with no k in [k_min, k_max] on the level
};

/// For each R, solves L(R d, k) = level for k in [k_min, k_max] by bisection
/// on log k. Requires a sign change on the bracket.
Contour iso_fvu_contour(const ScalingLawParams& p, double level, int width, const std::vector<double>& expansions,
                        double k_min = 1.0, double k_max = -1.0, double tol = 1e-9);

Json to_json(const Contour& c);

}  // namespace vitscope::sae
