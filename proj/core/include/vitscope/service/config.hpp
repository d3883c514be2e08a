#pragma once

#include "vitscope/backbone/shapes.hpp"
#include "vitscope/backbone/vit.hpp"
#include "vitscope/features/tuning.hpp"
#include "vitscope/intervene/selection.hpp"
#include "vitscope/io.hpp"
#include "vitscope/sae/train.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace vitscope::service {

struct SaeSection {
  int f = 256;
  int k = 8;
  int train_images = 1000;
  int heldout_images = 200;
  double fvu_gate = 0.15;
  sae::SaeTrainConfig train;
  // (f, k) sweep for the scaling law, trained at one layer.
  int sweep_layer = 3;
  std::vector<int> sweep_f{64, 128, 256};
  std::vector<int> sweep_k{2, 4, 8, 16, 32};
  int sweep_epochs = 10;
};

struct StatsSection {
  int images = -1;  // eval images scanned; negative means the whole split
  int exemplars = 16;
};

struct FeaturesSection {
  double mi_threshold = 0.05;
  int null_shuffles = 100;
  std::vector<int> early_layers{0, 1, 2};
  features::CurveProbeConfig probe;
  int angle_bins = 36;
  std::vector<int> tuning_layers{1, 2};
  int cards_per_layer = 8;
};

struct CircuitsSection {
  int k = 10;
  backbone::GradMode mode = backbone::GradMode::kCorrected;
  int eval_images = 200;
  int completeness_images = 100;
  std::uint64_t seed = 3;
  // Circuit similarity: images per class and the k of each circuit.
  int similarity_images_per_class = 6;
  int similarity_k = 10;
};

struct ServiceSection {
  std::string host = "127.0.0.1";
  int port = 8080;
  int threads = 1;
};

/// Everything the pipeline reads. Files are merged over the defaults, so a
/// config only needs the keys it changes.
struct Config {
  backbone::ShapesConfig data = backbone::default_shapes_config();
  backbone::BackboneConfig backbone;
  backbone::BackboneTrainSettings backbone_train;
  SaeSection sae;
  StatsSection stats;
  FeaturesSection features;
  CircuitsSection circuits;
  intervene::SelectionConfig intervene;
  ServiceSection service;
  int threads = 1;

  int num_read_points() const { return backbone.layers + 1; }
  void validate() const;
};

/// Desk-scale defaults.
Config default_config();

Json to_json(const Config& c);
Config config_from_json(const Json& j);

/// Reads `path` (or the defaults when empty), then applies `overrides`,
/// each "dotted.key=json-value" (bare words are taken as strings).
Config load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Sets `dotted.key` inside `j` to `value`.
void apply_override(Json& j, const std::string& assignment);

}  // namespace vitscope::service
