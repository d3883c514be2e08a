#pragma once

#include "vitscope/attribution/basis.hpp"
#include "vitscope/backbone/residual_backbone.hpp"
#include "vitscope/backbone/vit.hpp"
#include "vitscope/rng.hpp"
#include "vitscope/sae/sae.hpp"
#include "vitscope/sae/stats.hpp"

#include <unistd.h>

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace fixtures {

using namespace vitscope;

// 16x16 images, 8x8 patches: 4 patch tokens plus the class token.
inline backbone::BackboneConfig tiny_config(int layers = 2, int width = 8, int classes = 3) {
  backbone::BackboneConfig c;
  c.layers = layers;
  c.width = width;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.image_size = 16;
  c.patch_size = 8;
  c.num_classes = classes;
  return c;
}

// Larger init than the training default so that nonlinearities matter.
inline backbone::Vit tiny_vit(std::uint64_t seed = 1, int layers = 2, int width = 8) {
  auto vit = backbone::Vit::initialize(tiny_config(layers, width), seed);
  Rng rng(seed + 100);
  vit.mutable_params().for_each([&](const std::string& name, Matrix& m) {
    if (name.find("ln") != std::string::npos) return;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.3 * rng.normal();
  });
  return vit;
}

inline backbone::Image random_image(int size, std::uint64_t seed) {
  backbone::Image img(size);
  Rng rng(seed);
  for (auto& p : img.rgb) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

inline sae::SaeParams random_sae(int layer, int d, int f, int k, std::uint64_t seed) {
  Rng rng(seed);
  sae::SaeParams s;
  s.layer_id = layer;
  s.k = k;
  s.w_dec = Matrix(d, f);
  for (Eigen::Index i = 0; i < s.w_dec.size(); ++i) s.w_dec.data()[i] = rng.normal();
  s.normalize_decoder();
  s.w_enc = s.w_dec.transpose();
  s.b_pre = RowVector::Zero(d);
  s.in_mean = RowVector(d);
  s.in_std = RowVector(d);
  for (int j = 0; j < d; ++j) {
    s.b_pre(j) = 0.05 * rng.normal();
    s.in_mean(j) = 0.1 * rng.normal();
    s.in_std(j) = 0.5 + rng.uniform();
  }
  return s;
}

/// Tiny ViT with one random SAE per read point and stats over a few images.
struct TinyModel {
  backbone::Vit vit;
  std::vector<std::shared_ptr<const sae::SaeParams>> saes;
  std::vector<sae::FeatureStats> stats;
  std::vector<backbone::Image> images;

  attribution::ReplacementModel sae_model() const { return attribution::make_sae_model(vit, saes, stats); }
  attribution::ReplacementModel neuron_model() const { return attribution::make_neuron_model(vit, saes, stats); }
};

inline TinyModel tiny_model(std::uint64_t seed = 1, int f = 6, int k = 2, int layers = 2, int width = 8,
                            int stat_images = 12) {
  TinyModel t{tiny_vit(seed, layers, width), {}, {}, {}};
  for (int l = 0; l <= layers; ++l) {
    t.saes.push_back(std::make_shared<const sae::SaeParams>(random_sae(l, width, f, k, seed * 31 + l)));
  }
  for (int i = 0; i < stat_images; ++i) t.images.push_back(random_image(16, seed * 1000 + i));
  for (int l = 0; l <= layers; ++l) {
    sae::FeatureStatsAccumulator acc(l, f, t.vit.num_tokens(), width, 4);
    for (int i = 0; i < stat_images; ++i) {
      const auto rec = backbone::run_forward(t.vit, t.images[i], {}, false);
      const auto cd = sae::encode_decode(*t.saes[l], rec.read_points[l]);
      acc.add_image(i, cd.codes, cd.error, rec.read_points[l], 0);
    }
    t.stats.push_back(acc.finalize());
  }
  return t;
}

/// Linear residual network that ignores its input image: read point 0 is a
/// fixed matrix, block l maps x to x + mix[l] * x * a[l] and the head reads
/// the class token through `head`. Every gradient rule is exact here.
class LinearToy final : public backbone::ResidualBackbone {
 public:
  Matrix x0;                // tokens x width
  std::vector<Matrix> mix;  // tokens x tokens
  std::vector<Matrix> a;    // width x width
  Matrix head;              // width x classes

  int num_blocks() const override { return static_cast<int>(a.size()); }
  int width() const override { return static_cast<int>(x0.cols()); }
  int num_tokens() const override { return static_cast<int>(x0.rows()); }
  int num_classes() const override { return static_cast<int>(head.cols()); }
  std::vector<backbone::TokenRole> token_roles() const override {
    std::vector<backbone::TokenRole> r(num_tokens());
    r[0].is_class = true;
    for (int t = 1; t < num_tokens(); ++t) {
      r[t].row = 0;
      r[t].col = t - 1;
    }
    return r;
  }
  Matrix embed(const backbone::Image&) const override { return x0; }
  std::unique_ptr<backbone::BlockState> forward_block(int l, const Matrix& x, Matrix& out) const override {
    out = x + mix[l] * x * a[l];
    return std::make_unique<backbone::BlockState>();
  }
  Matrix backward_block(int l, const backbone::BlockState&, const Matrix& g, backbone::GradMode,
                        double*) const override {
    return g + mix[l].transpose() * g * a[l].transpose();
  }
  std::unique_ptr<backbone::BlockState> forward_head(const Matrix& x, RowVector& logits) const override {
    logits = x.row(0) * head;
    return std::make_unique<backbone::BlockState>();
  }
  Matrix backward_head(const backbone::BlockState&, const RowVector& g, backbone::GradMode,
                       double*) const override {
    Matrix out = Matrix::Zero(num_tokens(), width());
    out.row(0) = g * head.transpose();
    return out;
  }
};

inline LinearToy random_linear_toy(int tokens, int width, int blocks, int classes, std::uint64_t seed) {
  Rng rng(seed);
  auto fill = [&](int r, int c, double scale) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
  };
  LinearToy toy;
  toy.x0 = fill(tokens, width, 1.0);
  for (int l = 0; l < blocks; ++l) {
    toy.mix.push_back(fill(tokens, tokens, 0.3));
    toy.a.push_back(fill(width, width, 0.3));
  }
  toy.head = fill(width, classes, 1.0);
  return toy;
}

/// Neuron-basis replacement model over any backbone with the given baseline.
inline attribution::ReplacementModel neuron_model(const backbone::ResidualBackbone& bb, const RowVector& baseline) {
  attribution::ReplacementModel rm;
  rm.backbone = &bb;
  for (int l = 0; l < bb.num_read_points(); ++l) rm.layers.push_back(attribution::LayerBasis::neurons(baseline));
  return rm;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vitscope_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures
