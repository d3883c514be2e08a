#include "vitscope/circuits/metrics.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>

namespace vitscope::circuits {

const std::vector<double>& k_fractions() {
  static const std::vector<double> kF = {0.0, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0};
  return kF;
}

std::vector<int> k_grid(int f_max) {
  if (f_max < 0) throw InputError("f_max must be non-negative");
  std::vector<int> out;
  for (double fr : k_fractions()) out.push_back(static_cast<int>(std::lround(fr * f_max)));
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

MetricCurve curve_from_values(const std::vector<int>& ks, const std::vector<double>& raw) {
  if (ks.size() != raw.size() || ks.empty()) throw InputError("metric curve needs one value per grid point");
  MetricCurve c;
  c.k = ks;
  c.raw = raw;
  double sum = 0.0;
  for (double v : raw) {
    const double clamped = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
    c.value.push_back(clamped);
    sum += clamped;
  }
  c.auc = sum / static_cast<double>(raw.size());
  return c;
}

MetricCurve metric_auc(const std::function<double(int)>& metric, int f_max) {
  const auto ks = k_grid(f_max);
  std::vector<double> raw;
  for (int k : ks) raw.push_back(metric(k));
  return curve_from_values(ks, raw);
}

Json to_json(const MetricCurve& c) { return {{"k", c.k}, {"raw", c.raw}, {"value", c.value}, {"auc", c.auc}}; }

PairedTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InputError("paired test needs equally many observations");
  PairedTest r;
  r.n = static_cast<int>(a.size());
  if (r.n < 2) return r;
  double mean = 0.0;
  for (int i = 0; i < r.n; ++i) mean += a[i] - b[i];
  mean /= r.n;
  double var = 0.0;
  for (int i = 0; i < r.n; ++i) var += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  var /= (r.n - 1);
  r.mean_difference = mean;
  if (var == 0.0) {
    r.t = mean > 0 ? std::numeric_limits<double>::infinity() : (mean < 0 ? -std::numeric_limits<double>::infinity() : 0.0);
    r.p_one_sided = mean > 0 ? 0.0 : (mean < 0 ? 1.0 : 0.5);
    return r;
  }
  r.t = mean / std::sqrt(var / r.n);
  boost::math::students_t dist(r.n - 1);
  r.p_one_sided = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

double rank_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  if (pos.empty() || neg.empty()) throw InputError("AUC needs at least one positive and one negative score");
  // Sort-based Mann-Whitney U with midranks for ties.
  std::vector<std::pair<double, int>> all;
  for (double p : pos) all.emplace_back(p, 1);
  for (double n : neg) all.emplace_back(n, 0);
  std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t q = i; q < j; ++q) {
      if (all[q].second == 1) rank_sum += mid;
    }
    i = j;
  }
  const double np = static_cast<double>(pos.size()), nn = static_cast<double>(neg.size());
  return (rank_sum - np * (np + 1) / 2.0) / (np * nn);
}

}  // namespace vitscope::circuits
