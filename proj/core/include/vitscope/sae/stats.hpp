#pragma once

#include "vitscope/io.hpp"
#include "vitscope/sae/sae.hpp"

#include <filesystem>
#include <vector>

namespace vitscope::sae {

struct Exemplar {
  int image = 0;
  int token = 0;
  double value = 0.0;
};

struct FeatureRecord {
  long active_tokens = 0;
  double frequency = 0.0;    // over all tokens
  double mean = 0.0;         // over all tokens, zeros included
  double mean_active = 0.0;  // over tokens where the feature fires
  double median = 0.0;       // u', zeros included
  std::vector<double> position_frequency;  // patch tokens only, raster order
  std::vector<double> position_mean;
  std::vector<Exemplar> top_images;   // best token per image, descending
  std::vector<Exemplar> top_patches;  // descending over (image, token)
  std::vector<std::pair<int, int>> top_classes;  // (predicted class, count) over top_images
};

struct FeatureStats {
  int layer_id = 0;
  int num_tokens = 0;  // per image, class token first
  long images = 0;
  std::vector<FeatureRecord> features;
  RowVector error_median;     // per channel, over all tokens
  RowVector residual_median;  // per channel; baseline for neuron nodes

  int num_features() const { return static_cast<int>(features.size()); }
  RowVector feature_medians() const;
};

/// Single-pass accumulator. Keeps every nonzero activation (and every error
/// and residual value) so medians are exact; shards merge associatively and
/// the finalized result does not depend on image order.
class FeatureStatsAccumulator {
 public:
  FeatureStatsAccumulator(int layer_id, int num_features, int num_tokens, int width, int exemplars = 16);

  /// `codes` has one entry per token; `error` and `residual` are tokens x width.
  void add_image(int image_id, const std::vector<SparseCode>& codes, const Matrix& error, const Matrix& residual,
                 int predicted_class);
  void merge(const FeatureStatsAccumulator& other);
  FeatureStats finalize() const;

 private:
  int layer_id_, f_, tokens_, width_, m_;
  long images_ = 0;
  std::vector<std::vector<double>> values_;  // nonzero activations per feature
  std::vector<std::vector<long>> pos_count_;
  std::vector<std::vector<double>> pos_sum_;
  std::vector<std::vector<Exemplar>> best_per_image_;
  std::vector<std::vector<Exemplar>> patches_;
  std::vector<std::vector<double>> error_values_;     // per channel
  std::vector<std::vector<double>> residual_values_;  // per channel
  std::vector<std::pair<int, int>> predictions_;      // (image id, class)
};

/// Exact median of `values` padded with `zeros` additional zeros.
double median_with_zeros(std::vector<double> values, long zeros);
double median(std::vector<double> values);

Json to_json(const FeatureStats& s);
FeatureStats feature_stats_from_json(const Json& j);
void save_feature_stats(const std::filesystem::path& path, const FeatureStats& s, const Json& provenance);
FeatureStats load_feature_stats(const std::filesystem::path& path, Json* provenance = nullptr);

}  // namespace vitscope::sae
