#include "vitscope/sae/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vitscope::sae {

void SaeParams::validate() const {
  const auto f = w_enc.rows(), d = w_enc.cols();
  if (f <= 0 || d <= 0) throw InputError("SAE has empty weights");
  if (w_dec.rows() != d || w_dec.cols() != f) throw InputError("decoder shape does not match encoder");
  if (b_pre.size() != d || in_mean.size() != d || in_std.size() != d) throw InputError("SAE bias/normalization width mismatch");
  if (k < 1 || k > f) throw InputError("SAE sparsity k must satisfy 1 <= k <= f");
  if ((in_std.array() <= 0.0).any()) throw InputError("SAE input std must be positive");
}

double SaeParams::max_decoder_norm_deviation() const {
  return (w_dec.colwise().norm().array() - 1.0).abs().maxCoeff();
}

void SaeParams::normalize_decoder() {
  for (Eigen::Index j = 0; j < w_dec.cols(); ++j) {
    const double n = w_dec.col(j).norm();
    if (n > 0) w_dec.col(j) /= n;
  }
}

SparseCode topk_relu(const double* pre, int f, int k) {
  std::vector<int> idx;
  idx.reserve(f);
  for (int i = 0; i < f; ++i) {
    if (pre[i] > 0.0) idx.push_back(i);
  }
  const auto better = [pre](int a, int b) { return pre[a] > pre[b] || (pre[a] == pre[b] && a < b); };
  if (static_cast<int>(idx.size()) > k) {
    std::nth_element(idx.begin(), idx.begin() + k, idx.end(), better);
    idx.resize(k);
  }
  std::sort(idx.begin(), idx.end(), better);
  SparseCode code;
  code.index = idx;
  code.value.reserve(idx.size());
  for (int i : idx) code.value.push_back(pre[i]);
  return code;
}

Matrix standardize(const SaeParams& sae, const Matrix& x) {
  return (x.rowwise() - sae.in_mean).array().rowwise() / sae.in_std.array();
}

Matrix unstandardize(const SaeParams& sae, const Matrix& x_std) {
  return (x_std.array().rowwise() * sae.in_std.array()).rowwise() + sae.in_mean.array();
}

Matrix pre_activations(const SaeParams& sae, const Matrix& x) {
  if (x.cols() != sae.width()) {
    throw InputError("SAE for layer " + std::to_string(sae.layer_id) + " expects width " +
                     std::to_string(sae.width()) + ", got " + std::to_string(x.cols()));
  }
  const Matrix centered = standardize(sae, x).rowwise() - sae.b_pre;
  return centered * sae.w_enc.transpose();
}

std::vector<SparseCode> encode(const SaeParams& sae, const Matrix& x) {
  const Matrix pre = pre_activations(sae, x);
  std::vector<SparseCode> out;
  out.reserve(pre.rows());
  for (Eigen::Index r = 0; r < pre.rows(); ++r) {
    out.push_back(topk_relu(pre.row(r).data(), sae.num_features(), sae.k));
  }
  return out;
}

Matrix decode(const SaeParams& sae, const std::vector<SparseCode>& codes) {
  const int f = sae.num_features();
  Matrix y(static_cast<Eigen::Index>(codes.size()), sae.width());
  for (std::size_t t = 0; t < codes.size(); ++t) {
    RowVector row = sae.b_pre;
    for (std::size_t j = 0; j < codes[t].size(); ++j) {
      const int i = codes[t].index[j];
      if (i < 0 || i >= f) throw InputError("code index " + std::to_string(i) + " out of range for f=" + std::to_string(f));
      row += codes[t].value[j] * sae.w_dec.col(i).transpose();
    }
    y.row(static_cast<Eigen::Index>(t)) = row;
  }
  return unstandardize(sae, y);
}

Matrix decode_dense(const SaeParams& sae, const Matrix& codes) {
  if (codes.cols() != sae.num_features()) throw InputError("dense code width does not match f");
  const Matrix y = (codes * sae.w_dec.transpose()).rowwise() + sae.b_pre;
  return unstandardize(sae, y);
}

Matrix to_dense(const std::vector<SparseCode>& codes, int f) {
  Matrix z = Matrix::Zero(static_cast<Eigen::Index>(codes.size()), f);
  for (std::size_t t = 0; t < codes.size(); ++t) {
    for (std::size_t j = 0; j < codes[t].size(); ++j) z(static_cast<Eigen::Index>(t), codes[t].index[j]) = codes[t].value[j];
  }
  return z;
}

Matrix exact_error(const Matrix& x, const Matrix& recon) {
  Matrix e = x - recon;
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    const double xi = x.data()[i], ri = recon.data()[i];
    double& ei = e.data()[i];
    for (int step = 0; step < 64 && ri + ei != xi; ++step) {
      ei = std::nextafter(ei, ri + ei < xi ? INFINITY : -INFINITY);
    }
  }
  return e;
}

SaeCodes encode_decode(const SaeParams& sae, const Matrix& x) {
  SaeCodes out;
  out.codes = encode(sae, x);
  out.reconstruction = decode(sae, out.codes);
  out.error = exact_error(x, out.reconstruction);
  return out;
}

void save_sae(const std::filesystem::path& path, const SaeParams& sae, const Json& metadata) {
  sae.validate();
  Container c;
  c.kind = "sae";
  c.meta = metadata;
  c.meta["layer_id"] = sae.layer_id;
  c.meta["f"] = sae.num_features();
  c.meta["d"] = sae.width();
  c.meta["k"] = sae.k;
  c.arrays.emplace("w_enc", sae.w_enc);
  c.arrays.emplace("w_dec", sae.w_dec);
  c.arrays.emplace("b_pre", Matrix(sae.b_pre));
  c.arrays.emplace("in_mean", Matrix(sae.in_mean));
  c.arrays.emplace("in_std", Matrix(sae.in_std));
  write_container(path, c);
}

SaeParams load_sae(const std::filesystem::path& path, Json* metadata) {
  const Container c = read_container(path);
  if (c.kind != "sae") throw InputError(path.string() + " is not an SAE checkpoint");
  SaeParams s;
  s.layer_id = c.meta.at("layer_id").get<int>();
  s.k = c.meta.at("k").get<int>();
  s.w_enc = c.array("w_enc");
  s.w_dec = c.array("w_dec");
  s.b_pre = c.array("b_pre").row(0);
  s.in_mean = c.array("in_mean").row(0);
  s.in_std = c.array("in_std").row(0);
  s.validate();
  if (metadata) *metadata = c.meta;
  return s;
}

}  // namespace vitscope::sae
