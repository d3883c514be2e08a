#pragma once

#include "vitscope/backbone/residual_backbone.hpp"
#include "vitscope/backbone/shapes.hpp"
#include "vitscope/sae/sae.hpp"

#include <vector>

namespace vitscope::features {

/// Synthetic curve images: the canvas is tiled with cells of `cell` pixels,
/// each holding one arc of the given radius bulging toward the probe angle.
struct CurveProbeConfig {
  int image_size = 64;
  int cell = 16;
  double radius = 5.0;
  double half_span_deg = 60.0;
  double stroke = 2.0;
  backbone::Rgb color{128, 128, 128};
  int phases = 4;  // images per angle, each with a different sub-cell offset
  int noise_amplitude = 12;
  std::uint64_t seed = 11;
};

backbone::Image render_curve_image(const CurveProbeConfig& c, double angle_deg, int phase);

/// Evenly spaced grid over [0, 360).
std::vector<double> angle_grid(int bins);

struct TuningCurve {
  int layer = 0;
  int index = 0;
  std::vector<double> angles;
  std::vector<double> activation;  // max over probe images and tokens

  double peak() const;
  int peak_bin() const;
  double median() const;
};

/// Tuning curves of every feature of one layer in a single sweep.
std::vector<TuningCurve> radial_tuning_curves(const backbone::ResidualBackbone& bb, const sae::SaeParams& sae,
                                              const CurveProbeConfig& probe, const std::vector<double>& angles);

/// Fraction of angle bins where at least one of the curves reaches half
/// of its own maximum.
double angular_coverage(const std::vector<TuningCurve>& curves);

Json to_json(const TuningCurve& c);
Json to_json(const CurveProbeConfig& c);
CurveProbeConfig curve_probe_config_from_json(const Json& j);

}  // namespace vitscope::features
