#include "vitscope/features/tuning.hpp"

#include "vitscope/rng.hpp"
#include "vitscope/sae/stats.hpp"

#include <algorithm>

namespace vitscope::features {

using backbone::Image;

backbone::Image render_curve_image(const CurveProbeConfig& c, double angle_deg, int phase) {
  Image img(c.image_size);
  Rng rng(derive_seed({c.seed, static_cast<std::uint64_t>(phase)}));
  backbone::fill_background(img, rng, c.noise_amplitude);
  // Phase shifts the tiling diagonally by a fraction of a cell.
  const double shift = c.phases > 0 ? static_cast<double>(phase % c.phases) * c.cell / c.phases : 0.0;
  for (double cy = c.cell / 2.0 + shift - c.cell; cy < c.image_size + c.cell; cy += c.cell) {
    for (double cx = c.cell / 2.0 + shift - c.cell; cx < c.image_size + c.cell; cx += c.cell) {
      backbone::draw_arc(img, cx, cy, c.radius, angle_deg, c.half_span_deg, c.stroke, c.color);
    }
  }
  return img;
}

std::vector<double> angle_grid(int bins) {
  if (bins < 1) throw InputError("angle grid needs at least one bin");
  std::vector<double> out(bins);
  for (int i = 0; i < bins; ++i) out[i] = 360.0 * i / bins;
  return out;
}

double TuningCurve::peak() const {
  return activation.empty() ? 0.0 : *std::max_element(activation.begin(), activation.end());
}

int TuningCurve::peak_bin() const {
  return activation.empty() ? -1
                            : static_cast<int>(std::max_element(activation.begin(), activation.end()) - activation.begin());
}

double TuningCurve::median() const { return sae::median(activation); }

std::vector<TuningCurve> radial_tuning_curves(const backbone::ResidualBackbone& bb, const sae::SaeParams& sae,
                                              const CurveProbeConfig& probe, const std::vector<double>& angles) {
  const int f = sae.num_features();
  std::vector<TuningCurve> curves(f);
  for (int i = 0; i < f; ++i) {
    curves[i].layer = sae.layer_id;
    curves[i].index = i;
    curves[i].angles = angles;
    curves[i].activation.assign(angles.size(), 0.0);
  }
  for (std::size_t a = 0; a < angles.size(); ++a) {
    for (int phase = 0; phase < std::max(1, probe.phases); ++phase) {
      const Image img = render_curve_image(probe, angles[a], phase);
      const auto rec = backbone::run_forward(bb, img, {}, false);
      const auto codes = sae::encode(sae, rec.read_points[sae.layer_id]);
      for (std::size_t t = 1; t < codes.size(); ++t) {
        for (std::size_t j = 0; j < codes[t].size(); ++j) {
          double& slot = curves[codes[t].index[j]].activation[a];
          slot = std::max(slot, codes[t].value[j]);
        }
      }
    }
  }
  return curves;
}

double angular_coverage(const std::vector<TuningCurve>& curves) {
  if (curves.empty()) return 0.0;
  const std::size_t bins = curves.front().activation.size();
  if (bins == 0) return 0.0;
  std::size_t covered = 0;
  for (std::size_t b = 0; b < bins; ++b) {
    for (const auto& c : curves) {
      const double pk = c.peak();
      if (pk > 0.0 && c.activation[b] >= 0.5 * pk) {
        ++covered;
        break;
      }
    }
  }
  return static_cast<double>(covered) / static_cast<double>(bins);
}

Json to_json(const TuningCurve& c) {
  return {{"layer", c.layer}, {"index", c.index}, {"angles", c.angles}, {"activation", c.activation},
          {"peak", c.peak()}, {"peak_angle", c.activation.empty() ? 0.0 : c.angles[c.peak_bin()]},
          {"median", c.median()}};
}

Json to_json(const CurveProbeConfig& c) {
  return {{"image_size", c.image_size}, {"cell", c.cell},     {"radius", c.radius},
          {"half_span_deg", c.half_span_deg}, {"stroke", c.stroke}, {"color", {c.color[0], c.color[1], c.color[2]}},
          {"phases", c.phases},         {"noise_amplitude", c.noise_amplitude}, {"seed", c.seed}};
}

CurveProbeConfig curve_probe_config_from_json(const Json& j) {
  CurveProbeConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.cell = j.value("cell", c.cell);
  c.radius = j.value("radius", c.radius);
  c.half_span_deg = j.value("half_span_deg", c.half_span_deg);
  c.stroke = j.value("stroke", c.stroke);
  if (j.contains("color")) {
    const auto v = j.at("color").get<std::vector<int>>();
    if (v.size() != 3) throw ConfigError("curve probe color needs three channels");
    c.color = {static_cast<std::uint8_t>(v[0]), static_cast<std::uint8_t>(v[1]), static_cast<std::uint8_t>(v[2])};
  }
  c.phases = j.value("phases", c.phases);
  c.noise_amplitude = j.value("noise_amplitude", c.noise_amplitude);
  c.seed = j.value("seed", c.seed);
  if (c.cell < 1 || c.radius <= 0.0 || c.phases < 1) throw ConfigError("invalid curve probe geometry");
  return c;
}

}  // namespace vitscope::features
