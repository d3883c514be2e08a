#pragma once

#include "vitscope/backbone/residual_backbone.hpp"
#include "vitscope/backbone/shapes.hpp"
#include "vitscope/io.hpp"

#include <functional>
#include <string>
#include <vector>

namespace vitscope::backbone {

struct BackboneConfig {
  int layers = 6;
  int width = 64;
  int heads = 4;
  int mlp_ratio = 4;
  int image_size = 64;
  int patch_size = 8;
  int num_classes = 6;
  double ln_eps = 1e-5;

  int patches_per_side() const { return image_size / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int num_tokens() const { return num_patches() + 1; }
  int patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const;
};

Json to_json(const BackboneConfig& c);
BackboneConfig backbone_config_from_json(const Json& j);

/// All trainable arrays. Vectors are stored as 1 x n matrices so one
/// visitor covers everything (optimizer state, gradients, checkpoints).
struct VitParams {
  struct Block {
    Matrix ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o;
    Matrix ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2;
  };

  Matrix patch_w, patch_b, cls, pos;
  std::vector<Block> blocks;
  Matrix lnf_g, lnf_b, head_w, head_b;

  /// Zero-filled arrays with the shapes implied by `c`.
  static VitParams zeros(const BackboneConfig& c);

  void for_each(const std::function<void(const std::string&, Matrix&)>& fn);
  void for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const;
};

/// Pre-norm vision transformer: patch embedding + class token + learned
/// positional encoding, `layers` blocks of (LN, MHA, residual add, LN, GELU
/// MLP, residual add), then LN and a linear head on the class token.
class Vit final : public ResidualBackbone {
 public:
  Vit(BackboneConfig config, VitParams params);

  /// Truncated-normal-free Gaussian init (std 0.02), unit LN gains.
  static Vit initialize(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  const VitParams& params() const { return params_; }
  VitParams& mutable_params() { return params_; }

  int num_blocks() const override { return config_.layers; }
  int width() const override { return config_.width; }
  int num_tokens() const override { return config_.num_tokens(); }
  int num_classes() const override { return config_.num_classes; }
  std::vector<TokenRole> token_roles() const override;

  Matrix embed(const Image& img) const override;
  std::unique_ptr<BlockState> forward_block(int block, const Matrix& x, Matrix& out) const override;
  Matrix backward_block(int block, const BlockState& state, const Matrix& grad_out, GradMode mode,
                        double* bias_contribution) const override;
  std::unique_ptr<BlockState> forward_head(const Matrix& x, RowVector& logits) const override;
  Matrix backward_head(const BlockState& state, const RowVector& grad_logits, GradMode mode,
                       double* bias_contribution) const override;

  /// Attention-branch and MLP-branch outputs recorded in a block state;
  /// out = x + attention + mlp.
  static std::pair<Matrix, Matrix> branch_outputs(const BlockState& state);

  /// (patches x patch_dim) pixel matrix in [0, 1]; row r is patch r in
  /// raster order, columns ordered (py, px, channel).
  Matrix patchify(const Image& img) const;

  // Full backward used by training; accumulates parameter gradients into
  // `grads` and returns the gradient at read point 0.
  struct TrainingCache;
  RowVector train_forward(const Image& img, TrainingCache& cache) const;
  void train_backward(const TrainingCache& cache, const RowVector& grad_logits, VitParams& grads) const;

  Container to_container() const;
  static Vit from_container(const Container& c);

 private:
  Matrix block_backward_impl(int block, const BlockState& state, const Matrix& grad_out, GradMode mode,
                             double* bias_contribution, VitParams::Block* grads) const;
  Matrix head_backward_impl(const BlockState& state, const RowVector& grad_logits, GradMode mode,
                            double* bias_contribution, VitParams* grads) const;

  BackboneConfig config_;
  VitParams params_;
};

struct Vit::TrainingCache {
  Matrix patches;
  ForwardRecord record;
};

struct BackboneTrainSettings {
  int epochs = 8;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int warmup_steps = 50;
  std::uint64_t seed = 1;
};

Json to_json(const BackboneTrainSettings& s);
BackboneTrainSettings backbone_train_settings_from_json(const Json& j);

struct BackboneTrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_train_accuracy;
  double eval_accuracy = 0.0;
};

struct TrainedBackbone {
  Vit model;
  BackboneTrainLog log;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Cross-entropy training with AdamW and cosine decay. Throws
/// TrainingError (with step, batch and loss) on a non-finite loss.
TrainedBackbone train_backbone(const Dataset& train, const Dataset* eval, const BackboneConfig& config,
                               const BackboneTrainSettings& settings, const ProgressFn& progress = {});

double accuracy(const ResidualBackbone& bb, const Dataset& ds);
int predict(const ResidualBackbone& bb, const Image& img);

/// Backbone checkpoint: config, weights and training metadata.
void save_backbone(const std::filesystem::path& path, const Vit& model, const Json& metadata);
Vit load_backbone(const std::filesystem::path& path, Json* metadata = nullptr);

}  // namespace vitscope::backbone
