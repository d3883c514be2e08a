#pragma once

#include "vitscope/backbone/residual_backbone.hpp"
#include "vitscope/backbone/shapes.hpp"
#include "vitscope/sae/stats.hpp"

#include <filesystem>
#include <vector>

namespace vitscope::features {

struct CardImage {
  int image = 0;
  int token = 0;     // best token in this image
  double value = 0.0;
  int label = 0;
  int predicted = 0;
  double class_token_value = 0.0;
  std::vector<double> heatmap;  // patch tokens, raster order
};

struct FeatureCard {
  int layer = 0;
  int index = 0;
  bool dead = false;
  double frequency = 0.0;
  std::vector<CardImage> images;           // descending by value
  std::vector<sae::Exemplar> patches;      // descending by value
  std::vector<std::pair<int, int>> top_classes;     // (predicted class, count)
  std::vector<std::pair<int, double>> logit_lens;   // (class, normalized logit), descending
};

/// Head applied to the feature's decoder direction in residual space,
/// minus the head's response to a zero residual, mean-centred over classes.
std::vector<std::pair<int, double>> logit_lens(const backbone::ResidualBackbone& bb, const sae::SaeParams& sae,
                                               int feature);

/// Cards for `indices` of one layer. Exemplars come from `stats`, which
/// must have been accumulated over `dataset`; heatmaps are recomputed.
std::vector<FeatureCard> build_feature_cards(const backbone::ResidualBackbone& bb, const sae::SaeParams& sae,
                                             const sae::FeatureStats& stats, const backbone::Dataset& dataset,
                                             const std::vector<int>& indices);

Json to_json(const FeatureCard& card);
FeatureCard feature_card_from_json(const Json& j);

/// Writes L<l>_F<i>.json plus exemplar PNGs (heatmap overlays and
/// upscaled patch crops) into `dir`. Returns the metadata document.
Json export_feature_card(const FeatureCard& card, const backbone::Dataset& dataset, int patch_size,
                         const std::filesystem::path& dir);

std::string card_stem(int layer, int index);

}  // namespace vitscope::features
