#pragma once

#include "vitscope/common.hpp"
#include "vitscope/io.hpp"

#include <filesystem>
#include <vector>

namespace vitscope::sae {

/// Kept (index, value) pairs of one token, ordered by descending value
/// (ties: lower index first). Values are strictly positive.
struct SparseCode {
  std::vector<int> index;
  std::vector<double> value;

  std::size_t size() const { return index.size(); }
  friend bool operator==(const SparseCode&, const SparseCode&) = default;
};

/// One TopK SAE for one residual read point.
///
///   z    = TopK(ReLU(W_enc (x_std - b_pre)))
///   xhat = mu_in + sigma_in * (W_dec z + b_pre)
///
/// x_std = (x - mu_in) / sigma_in uses statistics frozen from the training
/// tokens.
struct SaeParams {
  int layer_id = 0;
  int k = 1;
  Matrix w_enc;    // f x d
  Matrix w_dec;    // d x f, unit-norm columns
  RowVector b_pre;    // d
  RowVector in_mean;  // d
  RowVector in_std;   // d

  int width() const { return static_cast<int>(w_enc.cols()); }
  int num_features() const { return static_cast<int>(w_enc.rows()); }

  void validate() const;
  /// max over columns of | ||W_dec[:, j]|| - 1 |.
  double max_decoder_norm_deviation() const;
  void normalize_decoder();
};

struct SaeCodes {
  std::vector<SparseCode> codes;  // one per token
  Matrix reconstruction;          // tokens x d, raw space
  Matrix error;                   // x - reconstruction, with reconstruction + error == x bitwise
};

/// ReLU then TopK over one row of pre-activations.
SparseCode topk_relu(const double* pre, int f, int k);

Matrix standardize(const SaeParams& sae, const Matrix& x);
Matrix unstandardize(const SaeParams& sae, const Matrix& x_std);

/// Pre-activations W_enc (x_std - b_pre), tokens x f.
Matrix pre_activations(const SaeParams& sae, const Matrix& x);

std::vector<SparseCode> encode(const SaeParams& sae, const Matrix& x);
Matrix decode(const SaeParams& sae, const std::vector<SparseCode>& codes);
/// Decode from a dense tokens x f code matrix.
Matrix decode_dense(const SaeParams& sae, const Matrix& codes);
SaeCodes encode_decode(const SaeParams& sae, const Matrix& x);

Matrix to_dense(const std::vector<SparseCode>& codes, int f);

/// x - recon, adjusted element-wise by at most a few ulps so that
/// recon + error reproduces x exactly in floating point.
Matrix exact_error(const Matrix& x, const Matrix& recon);

/// SAE checkpoint: layer id, f, k, weights, input normalization plus
/// whatever the caller records in `metadata` (training config, final FVU).
void save_sae(const std::filesystem::path& path, const SaeParams& sae, const Json& metadata);
SaeParams load_sae(const std::filesystem::path& path, Json* metadata = nullptr);

}  // namespace vitscope::sae
