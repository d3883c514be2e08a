#include "vitscope/features/positions.hpp"

#include "vitscope/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vitscope::features {
namespace {

double xlogy_ratio(double x, double y) { return x > 0.0 ? x * std::log(x / y) : 0.0; }

}  // namespace

double position_mutual_information(const std::vector<double>& p) {
  if (p.empty()) return 0.0;
  const double t = static_cast<double>(p.size());
  const double fr = std::accumulate(p.begin(), p.end(), 0.0) / t;
  if (fr <= 0.0 || fr >= 1.0) return 0.0;
  double sum = 0.0;
  for (double q : p) sum += xlogy_ratio(q, fr) + xlogy_ratio(1.0 - q, 1.0 - fr);
  return std::max(0.0, sum / t);
}

std::vector<PositionDetector> position_detectors(const sae::FeatureStats& stats, double threshold) {
  std::vector<PositionDetector> out;
  for (int i = 0; i < stats.num_features(); ++i) {
    const double mi = position_mutual_information(stats.features[i].position_frequency);
    if (mi > threshold) out.push_back({stats.layer_id, i, mi});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.mutual_information > b.mutual_information; });
  return out;
}

double permutation_null_mi(const std::vector<std::uint8_t>& active, int images, int positions, int shuffles,
                           std::uint64_t seed) {
  if (static_cast<long>(active.size()) != static_cast<long>(images) * positions) {
    throw InputError("activity mask size does not match images x positions");
  }
  if (shuffles < 1 || images < 1) return 0.0;
  Rng rng(seed);
  std::vector<int> perm(positions);
  double total = 0.0;
  for (int s = 0; s < shuffles; ++s) {
    std::vector<double> counts(positions, 0.0);
    for (int i = 0; i < images; ++i) {
      std::iota(perm.begin(), perm.end(), 0);
      for (int j = positions - 1; j > 0; --j) std::swap(perm[j], perm[rng.uniform_int(0, j)]);
      for (int p = 0; p < positions; ++p) counts[perm[p]] += active[static_cast<std::size_t>(i) * positions + p];
    }
    for (double& c : counts) c /= images;
    total += position_mutual_information(counts);
  }
  return total / shuffles;
}

CoverageMap coverage_map(const std::vector<PositionDetector>& detectors, const sae::FeatureStats& stats) {
  if (detectors.empty()) throw InputError("coverage map needs at least one position detector");
  const int positions = stats.num_tokens - 1;
  CoverageMap out;
  out.side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(positions))));
  out.grid.assign(positions, 0.0);
  for (const auto& d : detectors) {
    if (d.index < 0 || d.index >= stats.num_features()) throw InputError("detector refers to a missing feature");
    const auto& pm = stats.features[d.index].position_mean;
    for (int p = 0; p < positions; ++p) out.grid[p] += pm[p];
  }
  const auto it = std::min_element(out.grid.begin(), out.grid.end());
  out.min_position = static_cast<int>(it - out.grid.begin());
  out.min_value = *it;
  return out;
}

Json to_json(const std::vector<PositionDetector>& d) {
  Json out = Json::array();
  for (const auto& p : d) out.push_back({{"layer", p.layer}, {"index", p.index}, {"mutual_information", p.mutual_information}});
  return out;
}

Json to_json(const CoverageMap& c) {
  return {{"side", c.side}, {"grid", c.grid}, {"min_position", c.min_position}, {"min_value", c.min_value}};
}

}  // namespace vitscope::features
