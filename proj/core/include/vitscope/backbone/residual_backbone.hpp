#pragma once

#include "vitscope/backbone/image.hpp"
#include "vitscope/common.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace vitscope::backbone {

/// Backward-pass rule. Corrected treats layer-norm standard deviations,
/// attention probabilities and GELU gates as constants, which makes
/// gradient x input decompose the output exactly (together with the bias
/// terms).
enum class GradMode { kVanilla, kCorrected };

std::string to_string(GradMode m);
GradMode grad_mode_from_string(const std::string& s);

/// Opaque forward cache of one block (or of the classifier head).
struct BlockState {
  virtual ~BlockState() = default;
};

struct TokenRole {
  bool is_class = false;
  int row = -1;
  int col = -1;
};

/// Adapter seam: anything that exposes a residual stream with L+1 read
/// points can be analysed. Read point l is the input of block l; read point
/// L is the output of the last block, which the classifier head reads.
class ResidualBackbone {
 public:
  virtual ~ResidualBackbone() = default;

  virtual int num_blocks() const = 0;
  int num_read_points() const { return num_blocks() + 1; }
  virtual int width() const = 0;
  /// Tokens per image including the class token.
  virtual int num_tokens() const = 0;
  virtual int num_classes() const = 0;
  virtual std::vector<TokenRole> token_roles() const = 0;

  /// Residual stream at read point 0, shape (tokens x width).
  virtual Matrix embed(const Image& img) const = 0;

  virtual std::unique_ptr<BlockState> forward_block(int block, const Matrix& x, Matrix& out) const = 0;

  /// Vector-Jacobian product through one block. When `bias_contribution` is
  /// non-null, adds sum over biases b inside the block of grad_b . b.
  virtual Matrix backward_block(int block, const BlockState& state, const Matrix& grad_out, GradMode mode,
                                double* bias_contribution) const = 0;

  virtual std::unique_ptr<BlockState> forward_head(const Matrix& x, RowVector& logits) const = 0;
  virtual Matrix backward_head(const BlockState& state, const RowVector& grad_logits, GradMode mode,
                               double* bias_contribution) const = 0;
};

/// Residual activations of one image, indexed [read point](token, channel).
struct ResidualTrace {
  std::vector<Matrix> activations;
  std::vector<TokenRole> token_roles;
};

/// Called at every read point before the stream moves on; may edit `x`.
using ReadPointHook = std::function<void(int read_point, Matrix& x)>;

struct ForwardRecord {
  std::vector<Matrix> read_points;
  std::vector<std::unique_ptr<BlockState>> blocks;
  std::unique_ptr<BlockState> head;
  RowVector logits;
};

/// Runs the model from read point `start` given the residual `x` there.
/// `keep_states` retains the caches needed by backward passes.
ForwardRecord run_forward_from(const ResidualBackbone& bb, int start, Matrix x, const ReadPointHook& hook = {},
                               bool keep_states = true);

ForwardRecord run_forward(const ResidualBackbone& bb, const Image& img, const ReadPointHook& hook = {},
                          bool keep_states = true);

/// Logits without retaining any trace.
RowVector forward_logits(const ResidualBackbone& bb, const Image& img);

struct TracedOutput {
  RowVector logits;
  ResidualTrace trace;
};

TracedOutput forward_with_trace(const ResidualBackbone& bb, const Image& img);

/// Propagates `grad` (at read point `from`) back to read point `to`.
/// Returns gradients for read points to..from (index = read point; entries
/// below `to` are empty).
std::vector<Matrix> backward_between(const ResidualBackbone& bb, const ForwardRecord& rec, int from, Matrix grad,
                                     int to, GradMode mode, double* bias_contribution = nullptr);

/// Gradient of sum(grad_logits * logits) at every read point.
std::vector<Matrix> backward_from_logits(const ResidualBackbone& bb, const ForwardRecord& rec,
                                         const RowVector& grad_logits, GradMode mode,
                                         double* bias_contribution = nullptr);

}  // namespace vitscope::backbone
