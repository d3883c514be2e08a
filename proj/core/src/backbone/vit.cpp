#include "vitscope/backbone/vit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vitscope::backbone {
namespace {

struct VitBlockState final : BlockState {
  Matrix xhat1, h1, qkv, concat, attn_out;
  Vector rstd1;
  std::vector<Matrix> probs;
  Matrix xhat2, h2, a1, g1, mlp_out;
  Vector rstd2;
};

struct VitHeadState final : BlockState {
  int tokens = 0;
  RowVector xhat, h;
  double rstd = 0.0;
};

const VitBlockState& as_block(const BlockState& s) {
  const auto* p = dynamic_cast<const VitBlockState*>(&s);
  if (!p) throw InputError("block state was not produced by a Vit");
  return *p;
}

const VitHeadState& as_head(const BlockState& s) {
  const auto* p = dynamic_cast<const VitHeadState*>(&s);
  if (!p) throw InputError("head state was not produced by a Vit");
  return *p;
}

void layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps, Matrix& xhat, Vector& rstd,
                Matrix& y) {
  const auto n = x.rows();
  const auto d = static_cast<double>(x.cols());
  xhat.resize(n, x.cols());
  rstd.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const double mean = x.row(r).sum() / d;
    const double var = (x.row(r).array() - mean).square().sum() / d;
    rstd(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * rstd(r);
  }
  y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
}

// Sum over rows of dy . bias.
double bias_dot(const Matrix& dy, const Matrix& bias) { return (dy.colwise().sum() * bias.row(0).transpose())(0); }

Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& rstd, const Matrix& gain,
                           const Matrix& bias, GradMode mode, double* bias_contribution, Matrix* dgain,
                           Matrix* dbias) {
  if (dgain) *dgain += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (dbias) *dbias += dy.colwise().sum();
  if (bias_contribution) *bias_contribution += bias_dot(dy, bias);
  const Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
  const auto d = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_dxhat = dxhat.row(r).sum() / d;
    if (mode == GradMode::kVanilla) {
      const double mean_dxhat_xhat = dxhat.row(r).dot(xhat.row(r)) / d;
      dx.row(r) = rstd(r) * (dxhat.row(r).array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat);
    } else {
      dx.row(r) = rstd(r) * (dxhat.row(r).array() - mean_dxhat);
    }
  }
  return dx;
}

double gelu(double a) { return 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0))); }
double gelu_gate(double a) { return 0.5 * (1.0 + std::erf(a / std::sqrt(2.0))); }
double gelu_derivative(double a) {
  return gelu_gate(a) + a * std::exp(-0.5 * a * a) / std::sqrt(2.0 * M_PI);
}

Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * stddev;
  return m;
}

}  // namespace

void BackboneConfig::validate() const {
  if (layers <= 0 || width <= 0 || heads <= 0 || mlp_ratio <= 0) throw ConfigError("backbone sizes must be positive");
  if (width % heads != 0) throw ConfigError("width must be divisible by heads");
  if (patch_size <= 0 || image_size % patch_size != 0) throw ConfigError("image_size must be divisible by patch_size");
  if (num_classes <= 0) throw ConfigError("num_classes must be positive");
}

Json to_json(const BackboneConfig& c) {
  return {{"layers", c.layers},         {"width", c.width},           {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},   {"image_size", c.image_size}, {"patch_size", c.patch_size},
          {"num_classes", c.num_classes}, {"ln_eps", c.ln_eps}};
}

BackboneConfig backbone_config_from_json(const Json& j) {
  BackboneConfig c;
  c.layers = j.value("layers", c.layers);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  c.validate();
  return c;
}

VitParams VitParams::zeros(const BackboneConfig& c) {
  const int d = c.width, h = c.width * c.mlp_ratio;
  VitParams p;
  p.patch_w = Matrix::Zero(c.patch_dim(), d);
  p.patch_b = Matrix::Zero(1, d);
  p.cls = Matrix::Zero(1, d);
  p.pos = Matrix::Zero(c.num_tokens(), d);
  p.blocks.resize(c.layers);
  for (auto& b : p.blocks) {
    b.ln1_g = Matrix::Zero(1, d);
    b.ln1_b = Matrix::Zero(1, d);
    b.w_qkv = Matrix::Zero(d, 3 * d);
    b.b_qkv = Matrix::Zero(1, 3 * d);
    b.w_o = Matrix::Zero(d, d);
    b.b_o = Matrix::Zero(1, d);
    b.ln2_g = Matrix::Zero(1, d);
    b.ln2_b = Matrix::Zero(1, d);
    b.w_fc1 = Matrix::Zero(d, h);
    b.b_fc1 = Matrix::Zero(1, h);
    b.w_fc2 = Matrix::Zero(h, d);
    b.b_fc2 = Matrix::Zero(1, d);
  }
  p.lnf_g = Matrix::Zero(1, d);
  p.lnf_b = Matrix::Zero(1, d);
  p.head_w = Matrix::Zero(d, c.num_classes);
  p.head_b = Matrix::Zero(1, c.num_classes);
  return p;
}

void VitParams::for_each(const std::function<void(const std::string&, Matrix&)>& fn) {
  fn("patch_w", patch_w);
  fn("patch_b", patch_b);
  fn("cls", cls);
  fn("pos", pos);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    fn(p + "ln1_g", b.ln1_g);
    fn(p + "ln1_b", b.ln1_b);
    fn(p + "w_qkv", b.w_qkv);
    fn(p + "b_qkv", b.b_qkv);
    fn(p + "w_o", b.w_o);
    fn(p + "b_o", b.b_o);
    fn(p + "ln2_g", b.ln2_g);
    fn(p + "ln2_b", b.ln2_b);
    fn(p + "w_fc1", b.w_fc1);
    fn(p + "b_fc1", b.b_fc1);
    fn(p + "w_fc2", b.w_fc2);
    fn(p + "b_fc2", b.b_fc2);
  }
  fn("lnf_g", lnf_g);
  fn("lnf_b", lnf_b);
  fn("head_w", head_w);
  fn("head_b", head_b);
}

void VitParams::for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const {
  const_cast<VitParams*>(this)->for_each([&](const std::string& name, Matrix& m) { fn(name, m); });
}

Vit::Vit(BackboneConfig config, VitParams params) : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  const VitParams expect = VitParams::zeros(config_);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> want, got;
  expect.for_each([&](const std::string&, const Matrix& m) { want.emplace_back(m.rows(), m.cols()); });
  params_.for_each([&](const std::string&, const Matrix& m) { got.emplace_back(m.rows(), m.cols()); });
  if (want != got) throw InputError("parameter shapes do not match the backbone config");
}

Vit Vit::initialize(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed({seed, 0x5649ULL}));
  VitParams p = VitParams::zeros(config);
  p.patch_w = gaussian(rng, p.patch_w.rows(), p.patch_w.cols(), 1.0 / std::sqrt(config.patch_dim()));
  p.cls = gaussian(rng, 1, config.width, 0.02);
  p.pos = gaussian(rng, config.num_tokens(), config.width, 0.02);
  for (auto& b : p.blocks) {
    b.ln1_g.setOnes();
    b.ln2_g.setOnes();
    b.w_qkv = gaussian(rng, b.w_qkv.rows(), b.w_qkv.cols(), 0.02);
    b.w_o = gaussian(rng, b.w_o.rows(), b.w_o.cols(), 0.02);
    b.w_fc1 = gaussian(rng, b.w_fc1.rows(), b.w_fc1.cols(), 0.02);
    b.w_fc2 = gaussian(rng, b.w_fc2.rows(), b.w_fc2.cols(), 0.02);
  }
  p.lnf_g.setOnes();
  p.head_w = gaussian(rng, p.head_w.rows(), p.head_w.cols(), 0.02);
  return Vit(config, std::move(p));
}

std::vector<TokenRole> Vit::token_roles() const {
  std::vector<TokenRole> roles;
  roles.push_back({true, -1, -1});
  const int side = config_.patches_per_side();
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) roles.push_back({false, r, c});
  }
  return roles;
}

Matrix Vit::patchify(const Image& img) const {
  if (img.size != config_.image_size) {
    throw InputError("image is " + std::to_string(img.size) + "px, backbone expects " +
                     std::to_string(config_.image_size) + "px");
  }
  const int ps = config_.patch_size, side = config_.patches_per_side();
  Matrix out(config_.num_patches(), config_.patch_dim());
  for (int pr = 0; pr < side; ++pr) {
    for (int pc = 0; pc < side; ++pc) {
      const int row = pr * side + pc;
      int col = 0;
      for (int y = 0; y < ps; ++y) {
        for (int x = 0; x < ps; ++x) {
          const auto* px = img.pixel(pc * ps + x, pr * ps + y);
          for (int ch = 0; ch < 3; ++ch) out(row, col++) = px[ch] / 255.0;
        }
      }
    }
  }
  return out;
}

Matrix Vit::embed(const Image& img) const {
  const Matrix patches = patchify(img);
  Matrix x(config_.num_tokens(), config_.width);
  x.row(0) = params_.cls.row(0);
  x.bottomRows(config_.num_patches()) = (patches * params_.patch_w).rowwise() + params_.patch_b.row(0);
  x += params_.pos;
  return x;
}

std::unique_ptr<BlockState> Vit::forward_block(int block, const Matrix& x, Matrix& out) const {
  const auto& b = params_.blocks.at(block);
  const int d = config_.width, heads = config_.heads, dh = d / heads;
  const auto n = x.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto st = std::make_unique<VitBlockState>();

  layer_norm(x, b.ln1_g, b.ln1_b, config_.ln_eps, st->xhat1, st->rstd1, st->h1);
  st->qkv = (st->h1 * b.w_qkv).rowwise() + b.b_qkv.row(0);
  st->concat.resize(n, d);
  st->probs.resize(heads);
  for (int h = 0; h < heads; ++h) {
    const auto q = st->qkv.middleCols(h * dh, dh);
    const auto k = st->qkv.middleCols(d + h * dh, dh);
    const auto v = st->qkv.middleCols(2 * d + h * dh, dh);
    Matrix s = (q * k.transpose()) * scale;
    for (Eigen::Index r = 0; r < n; ++r) {
      const double mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp();
      s.row(r) /= s.row(r).sum();
    }
    st->concat.middleCols(h * dh, dh) = s * v;
    st->probs[h] = std::move(s);
  }
  st->attn_out = (st->concat * b.w_o).rowwise() + b.b_o.row(0);
  const Matrix mid = x + st->attn_out;

  layer_norm(mid, b.ln2_g, b.ln2_b, config_.ln_eps, st->xhat2, st->rstd2, st->h2);
  st->a1 = (st->h2 * b.w_fc1).rowwise() + b.b_fc1.row(0);
  st->g1 = st->a1.unaryExpr([](double a) { return gelu(a); });
  st->mlp_out = (st->g1 * b.w_fc2).rowwise() + b.b_fc2.row(0);
  out = mid + st->mlp_out;
  return st;
}

Matrix Vit::backward_block(int block, const BlockState& state, const Matrix& grad_out, GradMode mode,
                           double* bias_contribution) const {
  return block_backward_impl(block, state, grad_out, mode, bias_contribution, nullptr);
}

Matrix Vit::block_backward_impl(int block, const BlockState& state, const Matrix& grad_out, GradMode mode,
                                double* bias_contribution, VitParams::Block* grads) const {
  const auto& st = as_block(state);
  const auto& b = params_.blocks.at(block);
  const int d = config_.width, heads = config_.heads, dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // MLP branch.
  if (grads) {
    grads->w_fc2.noalias() += st.g1.transpose() * grad_out;
    grads->b_fc2 += grad_out.colwise().sum();
  }
  if (bias_contribution) *bias_contribution += bias_dot(grad_out, b.b_fc2);
  Matrix da1 = grad_out * b.w_fc2.transpose();
  if (mode == GradMode::kVanilla) {
    da1.array() *= st.a1.unaryExpr([](double a) { return gelu_derivative(a); }).array();
  } else {
    da1.array() *= st.a1.unaryExpr([](double a) { return gelu_gate(a); }).array();
  }
  if (grads) {
    grads->w_fc1.noalias() += st.h2.transpose() * da1;
    grads->b_fc1 += da1.colwise().sum();
  }
  if (bias_contribution) *bias_contribution += bias_dot(da1, b.b_fc1);
  const Matrix dh2 = da1 * b.w_fc1.transpose();
  Matrix grad_mid = grad_out + layer_norm_backward(dh2, st.xhat2, st.rstd2, b.ln2_g, b.ln2_b, mode,
                                                   bias_contribution, grads ? &grads->ln2_g : nullptr,
                                                   grads ? &grads->ln2_b : nullptr);

  // Attention branch.
  if (grads) {
    grads->w_o.noalias() += st.concat.transpose() * grad_mid;
    grads->b_o += grad_mid.colwise().sum();
  }
  if (bias_contribution) *bias_contribution += bias_dot(grad_mid, b.b_o);
  const Matrix dconcat = grad_mid * b.w_o.transpose();
  Matrix dqkv = Matrix::Zero(st.qkv.rows(), 3 * d);
  for (int h = 0; h < heads; ++h) {
    const auto& p = st.probs[h];
    const auto d_o = dconcat.middleCols(h * dh, dh);
    dqkv.middleCols(2 * d + h * dh, dh).noalias() = p.transpose() * d_o;
    if (mode == GradMode::kVanilla) {
      const auto q = st.qkv.middleCols(h * dh, dh);
      const auto k = st.qkv.middleCols(d + h * dh, dh);
      const auto v = st.qkv.middleCols(2 * d + h * dh, dh);
      const Matrix dp = d_o * v.transpose();
      Matrix ds = p.array() * dp.array();
      const Vector row_dot = ds.rowwise().sum();
      ds -= (p.array().colwise() * row_dot.array()).matrix();
      ds *= scale;
      dqkv.middleCols(h * dh, dh).noalias() = ds * k;
      dqkv.middleCols(d + h * dh, dh).noalias() = ds.transpose() * q;
    }
  }
  if (grads) {
    grads->w_qkv.noalias() += st.h1.transpose() * dqkv;
    grads->b_qkv += dqkv.colwise().sum();
  }
  if (bias_contribution) *bias_contribution += bias_dot(dqkv, b.b_qkv);
  const Matrix dh1 = dqkv * b.w_qkv.transpose();
  return grad_mid + layer_norm_backward(dh1, st.xhat1, st.rstd1, b.ln1_g, b.ln1_b, mode, bias_contribution,
                                        grads ? &grads->ln1_g : nullptr, grads ? &grads->ln1_b : nullptr);
}

std::unique_ptr<BlockState> Vit::forward_head(const Matrix& x, RowVector& logits) const {
  auto st = std::make_unique<VitHeadState>();
  st->tokens = static_cast<int>(x.rows());
  Matrix xhat, h;
  Vector rstd;
  layer_norm(x.topRows(1), params_.lnf_g, params_.lnf_b, config_.ln_eps, xhat, rstd, h);
  st->xhat = xhat.row(0);
  st->h = h.row(0);
  st->rstd = rstd(0);
  logits = st->h * params_.head_w + params_.head_b.row(0);
  return st;
}

Matrix Vit::backward_head(const BlockState& state, const RowVector& grad_logits, GradMode mode,
                          double* bias_contribution) const {
  return head_backward_impl(state, grad_logits, mode, bias_contribution, nullptr);
}

Matrix Vit::head_backward_impl(const BlockState& state, const RowVector& grad_logits, GradMode mode,
                               double* bias_contribution, VitParams* grads) const {
  const auto& st = as_head(state);
  if (grads) {
    grads->head_w.noalias() += st.h.transpose() * grad_logits;
    grads->head_b += grad_logits;
  }
  if (bias_contribution) *bias_contribution += grad_logits.dot(params_.head_b.row(0));
  const Matrix dh = grad_logits * params_.head_w.transpose();
  Vector rstd(1);
  rstd(0) = st.rstd;
  const Matrix dx_cls = layer_norm_backward(dh, st.xhat, rstd, params_.lnf_g, params_.lnf_b, mode,
                                            bias_contribution, grads ? &grads->lnf_g : nullptr,
                                            grads ? &grads->lnf_b : nullptr);
  Matrix dx = Matrix::Zero(st.tokens, config_.width);
  dx.row(0) = dx_cls.row(0);
  return dx;
}

std::pair<Matrix, Matrix> Vit::branch_outputs(const BlockState& state) {
  const auto& st = as_block(state);
  return {st.attn_out, st.mlp_out};
}

RowVector Vit::train_forward(const Image& img, TrainingCache& cache) const {
  cache.patches = patchify(img);
  Matrix x(config_.num_tokens(), config_.width);
  x.row(0) = params_.cls.row(0);
  x.bottomRows(config_.num_patches()) = (cache.patches * params_.patch_w).rowwise() + params_.patch_b.row(0);
  x += params_.pos;
  cache.record = run_forward_from(*this, 0, std::move(x));
  return cache.record.logits;
}

void Vit::train_backward(const TrainingCache& cache, const RowVector& grad_logits, VitParams& grads) const {
  const auto& rec = cache.record;
  Matrix g = head_backward_impl(*rec.head, grad_logits, GradMode::kVanilla, nullptr, &grads);
  for (int l = config_.layers - 1; l >= 0; --l) {
    g = block_backward_impl(l, *rec.blocks[l], g, GradMode::kVanilla, nullptr, &grads.blocks[l]);
  }
  grads.pos += g;
  grads.cls += g.topRows(1);
  const auto patch_grad = g.bottomRows(config_.num_patches());
  grads.patch_w.noalias() += cache.patches.transpose() * patch_grad;
  grads.patch_b += patch_grad.colwise().sum();
}

Container Vit::to_container() const {
  Container c;
  c.kind = "backbone";
  c.meta["config"] = to_json(config_);
  params_.for_each([&](const std::string& name, const Matrix& m) { c.arrays.emplace(name, m); });
  return c;
}

Vit Vit::from_container(const Container& c) {
  if (c.kind != "backbone") throw InputError("container kind '" + c.kind + "' is not a backbone checkpoint");
  const auto cfg = backbone_config_from_json(c.meta.at("config"));
  VitParams p = VitParams::zeros(cfg);
  p.for_each([&](const std::string& name, Matrix& m) {
    const Matrix& src = c.array(name);
    if (src.rows() != m.rows() || src.cols() != m.cols()) throw InputError("checkpoint array '" + name + "' has wrong shape");
    m = src;
  });
  return Vit(cfg, std::move(p));
}

void save_backbone(const std::filesystem::path& path, const Vit& model, const Json& metadata) {
  Container c = model.to_container();
  c.meta["training"] = metadata;
  write_container(path, c);
}

Vit load_backbone(const std::filesystem::path& path, Json* metadata) {
  const Container c = read_container(path);
  if (metadata) *metadata = c.meta.value("training", Json::object());
  return Vit::from_container(c);
}

}  // namespace vitscope::backbone
