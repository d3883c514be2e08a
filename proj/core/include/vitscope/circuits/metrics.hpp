#pragma once

#include "vitscope/io.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace vitscope::circuits {

/// {0, .001, .002, .005, .01, .02, .05, .1, .2, .5, 1}.
const std::vector<double>& k_fractions();

/// fraction * f_max rounded to the nearest integer, duplicates removed,
/// ascending.
std::vector<int> k_grid(int f_max);

struct MetricCurve {
  std::vector<int> k;
  std::vector<double> raw;
  std::vector<double> value;  // raw clamped to [0, 1]
  double auc = 0.0;           // mean of `value`
};

MetricCurve metric_auc(const std::function<double(int)>& metric, int f_max);
/// AUC of already evaluated values on a grid.
MetricCurve curve_from_values(const std::vector<int>& ks, const std::vector<double>& raw);

Json to_json(const MetricCurve& c);

struct PairedTest {
  double mean_difference = 0.0;
  double t = 0.0;
  double p_one_sided = 1.0;  // H1: mean(a - b) > 0
  int n = 0;
};

/// Paired Student t-test of a against b.
PairedTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

/// Exact Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg).
double rank_auc(const std::vector<double>& positives, const std::vector<double>& negatives);

}  // namespace vitscope::circuits
