#include "vitscope/backbone/residual_backbone.hpp"

namespace vitscope::backbone {

std::string to_string(GradMode m) { return m == GradMode::kVanilla ? "vanilla" : "corrected"; }

GradMode grad_mode_from_string(const std::string& s) {
  if (s == "vanilla") return GradMode::kVanilla;
  if (s == "corrected") return GradMode::kCorrected;
  throw ConfigError("unknown gradient mode '" + s + "' (expected vanilla or corrected)");
}

ForwardRecord run_forward_from(const ResidualBackbone& bb, int start, Matrix x, const ReadPointHook& hook,
                               bool keep_states) {
  const int L = bb.num_blocks();
  if (start < 0 || start > L) throw InputError("read point out of range");
  if (x.rows() != bb.num_tokens() || x.cols() != bb.width()) {
    throw InputError("residual shape " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                     " does not match the backbone (" + std::to_string(bb.num_tokens()) + "x" +
                     std::to_string(bb.width()) + ")");
  }
  ForwardRecord rec;
  rec.read_points.resize(L + 1);
  rec.blocks.resize(L);
  for (int l = start; l < L; ++l) {
    if (hook) hook(l, x);
    Matrix out;
    auto st = bb.forward_block(l, x, out);
    if (keep_states) rec.blocks[l] = std::move(st);
    rec.read_points[l] = std::move(x);
    x = std::move(out);
  }
  if (hook) hook(L, x);
  auto head = bb.forward_head(x, rec.logits);
  if (keep_states) rec.head = std::move(head);
  rec.read_points[L] = std::move(x);
  return rec;
}

ForwardRecord run_forward(const ResidualBackbone& bb, const Image& img, const ReadPointHook& hook,
                          bool keep_states) {
  return run_forward_from(bb, 0, bb.embed(img), hook, keep_states);
}

RowVector forward_logits(const ResidualBackbone& bb, const Image& img) {
  return run_forward(bb, img, {}, false).logits;
}

TracedOutput forward_with_trace(const ResidualBackbone& bb, const Image& img) {
  auto rec = run_forward(bb, img, {}, false);
  return {std::move(rec.logits), {std::move(rec.read_points), bb.token_roles()}};
}

std::vector<Matrix> backward_between(const ResidualBackbone& bb, const ForwardRecord& rec, int from, Matrix grad,
                                     int to, GradMode mode, double* bias_contribution) {
  if (to < 0 || from > bb.num_blocks() || to > from) throw InputError("invalid read-point range for backward");
  std::vector<Matrix> grads(bb.num_read_points());
  for (int l = from - 1; l >= to; --l) {
    if (!rec.blocks[l]) throw InputError("forward record lacks block states; rerun with keep_states");
    Matrix g = bb.backward_block(l, *rec.blocks[l], grad, mode, bias_contribution);
    grads[l + 1] = std::move(grad);
    grad = std::move(g);
  }
  grads[to] = std::move(grad);
  return grads;
}

std::vector<Matrix> backward_from_logits(const ResidualBackbone& bb, const ForwardRecord& rec,
                                         const RowVector& grad_logits, GradMode mode, double* bias_contribution) {
  if (!rec.head) throw InputError("forward record lacks head state; rerun with keep_states");
  Matrix g = bb.backward_head(*rec.head, grad_logits, mode, bias_contribution);
  return backward_between(bb, rec, bb.num_blocks(), std::move(g), 0, mode, bias_contribution);
}

}  // namespace vitscope::backbone
