#pragma once

#include "vitscope/sae/sae.hpp"

#include <functional>
#include <string>
#include <vector>

namespace vitscope::sae {

/// Defaults follow the published TopK SAE recipe; desk-scale workspaces
/// override epochs and learning rate from the config file.
struct SaeTrainConfig {
  double aux_weight = 1.0 / 32.0;
  int k_aux = 256;  // clamped to f
  // Tokens without activation before a feature counts as dead; 0 means one epoch.
  long dead_horizon_tokens = 0;
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  int epochs = 50;
  int batch_size = 512;
  std::uint64_t seed = 0;

  void validate(int f) const;
};

Json to_json(const SaeTrainConfig& c);
SaeTrainConfig sae_train_config_from_json(const Json& j);

struct SaeEpochLog {
  int epoch = 0;
  double loss = 0.0;
  double aux_loss = 0.0;
  double fvu = 0.0;
  int dead_features = 0;
};

struct SaeTrainLog {
  std::vector<SaeEpochLog> epochs;
  std::vector<std::string> warnings;
  double final_fvu = 0.0;  // on held-out tokens when given, else on training tokens
};

struct TrainedSae {
  SaeParams params;
  SaeTrainLog log;
};

/// Trains one TopK SAE on `tokens` (rows = tokens, raw residual space).
/// Minimizes ||x - xhat||^2 + aux_weight ||e - W_dec z_dead||^2 in
/// standardized space with Adam; decoder columns are renormalized after
/// every step.
TrainedSae train_sae(const Matrix& tokens, int layer_id, int f, int k, const SaeTrainConfig& config,
                     const Matrix* heldout = nullptr,
                     const std::function<void(const std::string&)>& progress = {});

/// sum ||x_std - xhat_std||^2 / sum ||x_std||^2.
double compute_fvu(const SaeParams& sae, const Matrix& tokens);

}  // namespace vitscope::sae
