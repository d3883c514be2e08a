#include "vitscope/sae/train.hpp"

#include "vitscope/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace vitscope::sae {
namespace {

struct Adam {
  Matrix m, v;
  explicit Adam(const Matrix& like) : m(Matrix::Zero(like.rows(), like.cols())), v(m) {}
  void step(Matrix& p, const Matrix& g, double lr, double b1, double b2, long t) {
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + 1e-8);
  }
};

// Dense TopK-ReLU code of every row; `allowed` restricts the candidate set.
Matrix topk_rows(const Matrix& pre, int k, const std::vector<char>* allowed) {
  Matrix z = Matrix::Zero(pre.rows(), pre.cols());
  const int f = static_cast<int>(pre.cols());
  std::vector<double> row(f);
  for (Eigen::Index r = 0; r < pre.rows(); ++r) {
    const double* src = pre.row(r).data();
    const double* use = src;
    if (allowed) {
      for (int i = 0; i < f; ++i) row[i] = (*allowed)[i] ? src[i] : 0.0;
      use = row.data();
    }
    const SparseCode c = topk_relu(use, f, k);
    for (std::size_t j = 0; j < c.size(); ++j) z(r, c.index[j]) = c.value[j];
  }
  return z;
}

}  // namespace

void SaeTrainConfig::validate(int f) const {
  if (aux_weight < 0.0) throw ConfigError("aux weight must be non-negative");
  if (k_aux < 1) throw ConfigError("k_aux must be positive");
  if (epochs < 0 || batch_size < 1 || learning_rate <= 0.0) throw ConfigError("invalid SAE optimizer settings");
}

Json to_json(const SaeTrainConfig& c) {
  return {{"aux_weight", c.aux_weight}, {"k_aux", c.k_aux},       {"dead_horizon_tokens", c.dead_horizon_tokens},
          {"learning_rate", c.learning_rate}, {"beta1", c.beta1}, {"beta2", c.beta2},
          {"epochs", c.epochs},          {"batch_size", c.batch_size}, {"seed", c.seed}};
}

SaeTrainConfig sae_train_config_from_json(const Json& j) {
  SaeTrainConfig c;
  c.aux_weight = j.value("aux_weight", c.aux_weight);
  c.k_aux = j.value("k_aux", c.k_aux);
  c.dead_horizon_tokens = j.value("dead_horizon_tokens", c.dead_horizon_tokens);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  return c;
}

double compute_fvu(const SaeParams& sae, const Matrix& tokens) {
  if (tokens.rows() == 0) throw InputError("compute_fvu: empty token source");
  const Matrix x = standardize(sae, tokens);
  const Matrix pre = (x.rowwise() - sae.b_pre) * sae.w_enc.transpose();
  const Matrix z = topk_rows(pre, sae.k, nullptr);
  const Matrix xhat = (z * sae.w_dec.transpose()).rowwise() + sae.b_pre;
  const double denom = x.squaredNorm();
  if (denom == 0.0) throw InputError("compute_fvu: tokens have zero variance");
  return (x - xhat).squaredNorm() / denom;
}

TrainedSae train_sae(const Matrix& tokens, int layer_id, int f, int k, const SaeTrainConfig& config,
                     const Matrix* heldout, const std::function<void(const std::string&)>& progress) {
  if (tokens.rows() == 0) throw InputError("train_sae: no tokens for layer " + std::to_string(layer_id));
  if (k < 1 || f < k) throw ConfigError("train_sae requires 1 <= k <= f");
  const int k_aux = std::min(config.k_aux, f);
  SaeTrainConfig cfg = config;
  cfg.k_aux = k_aux;
  cfg.validate(f);

  const auto d = tokens.cols();
  const auto n = tokens.rows();
  TrainedSae out;
  SaeParams& sae = out.params;
  sae.layer_id = layer_id;
  sae.k = k;
  sae.in_mean = tokens.colwise().mean();
  sae.in_std = ((tokens.rowwise() - sae.in_mean).array().square().colwise().sum() / static_cast<double>(n)).sqrt();
  sae.in_std = sae.in_std.cwiseMax(1e-8);
  const Matrix x_all = standardize(sae, tokens);

  Rng rng(derive_seed({cfg.seed, static_cast<std::uint64_t>(layer_id), static_cast<std::uint64_t>(f),
                       static_cast<std::uint64_t>(k)}));
  // Decoder columns start at random training tokens plus a little noise, so
  // every feature begins inside the data cone and can fire.
  sae.w_dec.resize(d, f);
  for (int j = 0; j < f; ++j) {
    const auto r = static_cast<Eigen::Index>(rng.uniform_int(0, static_cast<int>(n - 1)));
    for (Eigen::Index c = 0; c < d; ++c) sae.w_dec(c, j) = x_all(r, c) + 0.1 * rng.normal();
  }
  sae.normalize_decoder();
  sae.w_enc = sae.w_dec.transpose();
  sae.b_pre = RowVector::Zero(d);

  Adam adam_enc(sae.w_enc), adam_dec(sae.w_dec), adam_b(Matrix(sae.b_pre));
  const long horizon = cfg.dead_horizon_tokens > 0 ? cfg.dead_horizon_tokens : static_cast<long>(n);
  std::vector<long> since_fired(f, 0);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  const int bs = cfg.batch_size;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (Eigen::Index i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, static_cast<int>(i))]);
    double loss_sum = 0.0, aux_sum = 0.0, err_sum = 0.0, tot_sum = 0.0;
    for (Eigen::Index start = 0; start < n; start += bs) {
      const Eigen::Index b = std::min<Eigen::Index>(bs, n - start);
      Matrix xb(b, d);
      for (Eigen::Index r = 0; r < b; ++r) xb.row(r) = x_all.row(order[start + r]);
      const Matrix centered = xb.rowwise() - sae.b_pre;
      const Matrix pre = centered * sae.w_enc.transpose();
      const Matrix z = topk_rows(pre, k, nullptr);
      const Matrix xhat = (z * sae.w_dec.transpose()).rowwise() + sae.b_pre;
      const Matrix err = xb - xhat;
      const double recon = err.squaredNorm() / static_cast<double>(b);

      const Matrix d_xhat = (-2.0 / static_cast<double>(b)) * err;
      Matrix g_dec = d_xhat.transpose() * z;
      RowVector g_b = d_xhat.colwise().sum();
      Matrix dz = (d_xhat * sae.w_dec).array() * (z.array() > 0.0).cast<double>();
      Matrix g_enc = dz.transpose() * centered;
      g_b -= dz.colwise().sum() * sae.w_enc;

      // Fired bookkeeping before the aux pass so the dead set reflects this batch.
      for (int j = 0; j < f; ++j) {
        if ((z.col(j).array() > 0.0).any()) {
          since_fired[j] = 0;
        } else {
          since_fired[j] += b;
        }
      }
      double aux = 0.0;
      if (cfg.aux_weight > 0.0) {
        std::vector<char> dead(f, 0);
        int n_dead = 0;
        for (int j = 0; j < f; ++j) {
          dead[j] = since_fired[j] >= horizon ? 1 : 0;
          n_dead += dead[j];
        }
        if (n_dead > 0) {
          const Matrix z_dead = topk_rows(pre, std::min(k_aux, n_dead), &dead);
          const Matrix err_hat = z_dead * sae.w_dec.transpose();
          const Matrix resid = err - err_hat;
          aux = resid.squaredNorm() / static_cast<double>(b);
          const Matrix d_hat = (-2.0 * cfg.aux_weight / static_cast<double>(b)) * resid;
          g_dec += d_hat.transpose() * z_dead;
          const Matrix dz_dead = (d_hat * sae.w_dec).array() * (z_dead.array() > 0.0).cast<double>();
          g_enc += dz_dead.transpose() * centered;
          g_b -= dz_dead.colwise().sum() * sae.w_enc;
        }
      }
      const double loss = recon + cfg.aux_weight * aux;
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "SAE layer " << layer_id << ": non-finite loss at epoch " << epoch << ", step " << step;
        throw TrainingError(msg.str());
      }
      ++step;
      adam_enc.step(sae.w_enc, g_enc, cfg.learning_rate, cfg.beta1, cfg.beta2, step);
      adam_dec.step(sae.w_dec, g_dec, cfg.learning_rate, cfg.beta1, cfg.beta2, step);
      Matrix b_mat = sae.b_pre;
      adam_b.step(b_mat, g_b, cfg.learning_rate, cfg.beta1, cfg.beta2, step);
      sae.b_pre = b_mat.row(0);
      sae.normalize_decoder();

      loss_sum += loss * static_cast<double>(b);
      aux_sum += aux * static_cast<double>(b);
      err_sum += err.squaredNorm();
      tot_sum += xb.squaredNorm();
    }
    SaeEpochLog log;
    log.epoch = epoch;
    log.loss = loss_sum / static_cast<double>(n);
    log.aux_loss = aux_sum / static_cast<double>(n);
    log.fvu = tot_sum > 0 ? err_sum / tot_sum : 0.0;
    log.dead_features = static_cast<int>(std::count_if(since_fired.begin(), since_fired.end(),
                                                       [&](long s) { return s >= horizon; }));
    if (log.dead_features == f) {
      out.log.warnings.push_back("all features dead after epoch " + std::to_string(epoch));
    }
    out.log.epochs.push_back(log);
    if (progress) {
      std::ostringstream msg;
      msg << "layer " << layer_id << " epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << log.loss
          << " fvu " << log.fvu << " dead " << log.dead_features;
      progress(msg.str());
    }
  }
  out.log.final_fvu = compute_fvu(sae, heldout ? *heldout : tokens);
  return out;
}

}  // namespace vitscope::sae
