#pragma once

#include "vitscope/sae/stats.hpp"

#include <cstdint>
#include <vector>

namespace vitscope::features {

/// Mutual information (nats) between "feature active" and patch position:
///   I = (1/T) sum_pos [p log(p / fr) + (1 - p) log((1 - p) / (1 - fr))]
/// with fr the mean of the per-position frequencies p. 0 log 0 = 0.
double position_mutual_information(const std::vector<double>& position_frequency);

struct PositionDetector {
  int layer = 0;
  int index = 0;
  double mutual_information = 0.0;
};

/// Features whose MI exceeds `threshold`, descending (ties: lower index).
std::vector<PositionDetector> position_detectors(const sae::FeatureStats& stats, double threshold = 0.05);

/// Mean MI after independently shuffling the position labels inside every
/// image. `active` is images x positions (row-major), 1 where the feature
/// fires on that patch token.
double permutation_null_mi(const std::vector<std::uint8_t>& active, int images, int positions, int shuffles,
                           std::uint64_t seed);

struct CoverageMap {
  int side = 0;
  std::vector<double> grid;  // raster order
  int min_position = 0;
  double min_value = 0.0;
};

/// Sum over detectors of the per-position mean activation.
CoverageMap coverage_map(const std::vector<PositionDetector>& detectors, const sae::FeatureStats& stats);

Json to_json(const std::vector<PositionDetector>& d);
Json to_json(const CoverageMap& c);

}  // namespace vitscope::features
