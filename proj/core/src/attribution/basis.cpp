#include "vitscope/attribution/basis.hpp"

namespace vitscope::attribution {

LayerBasis LayerBasis::from_sae(std::shared_ptr<const sae::SaeParams> sae, const sae::FeatureStats& stats) {
  if (!sae) throw InputError("missing SAE");
  if (stats.num_features() != sae->num_features()) {
    throw InputError("feature stats for layer " + std::to_string(stats.layer_id) + " do not match the SAE width");
  }
  return from_sae(std::move(sae), stats.feature_medians(), stats.error_median);
}

LayerBasis LayerBasis::from_sae(std::shared_ptr<const sae::SaeParams> sae, RowVector feature_median,
                                RowVector error_median) {
  if (!sae) throw InputError("missing SAE");
  if (feature_median.size() != sae->num_features() || error_median.size() != sae->width()) {
    throw InputError("baselines do not match SAE shape at layer " + std::to_string(sae->layer_id));
  }
  LayerBasis b;
  b.kind_ = Kind::kSae;
  b.sae_ = std::move(sae);
  b.baseline_ = std::move(feature_median);
  b.error_baseline_ = std::move(error_median);
  return b;
}

LayerBasis LayerBasis::neurons(RowVector channel_median) {
  LayerBasis b;
  b.kind_ = Kind::kNeuron;
  b.baseline_ = std::move(channel_median);
  return b;
}

int LayerBasis::size() const { return kind_ == Kind::kSae ? sae_->num_features() : static_cast<int>(baseline_.size()); }

int LayerBasis::width() const { return kind_ == Kind::kSae ? sae_->width() : static_cast<int>(baseline_.size()); }

Decomposition LayerBasis::decompose(const Matrix& x) const {
  Decomposition d;
  if (kind_ == Kind::kNeuron) {
    d.acts = x;
    d.recon = x;
    return d;
  }
  d.acts = sae::to_dense(sae::encode(*sae_, x), sae_->num_features());
  d.recon = sae::decode_dense(*sae_, d.acts);
  d.error = sae::exact_error(x, d.recon);
  return d;
}

Matrix LayerBasis::compose(const Matrix& acts, const Matrix& error) const {
  if (kind_ == Kind::kNeuron) return acts;
  return sae::decode_dense(*sae_, acts) + error;
}

Matrix LayerBasis::node_grad(const Matrix& g) const {
  if (kind_ == Kind::kNeuron) return g;
  // x_hat = mu + sigma * (W_dec z + b_pre): dm/dz = (g * sigma) W_dec.
  return (g.array().rowwise() * sae_->in_std.array()).matrix() * sae_->w_dec;
}

Matrix LayerBasis::pullback_node(const Decomposition& d, int node, const Vector& coeff) const {
  const auto t = d.acts.rows();
  Matrix out = Matrix::Zero(t, width());
  if (kind_ == Kind::kNeuron) {
    out.col(node) = coeff;
    return out;
  }
  // z_j = w_j . (x / sigma - mu / sigma - b_pre) where active, 0 elsewhere.
  const RowVector dir = sae_->w_enc.row(node).cwiseQuotient(sae_->in_std);
  for (Eigen::Index r = 0; r < t; ++r) {
    if (d.acts(r, node) > 0.0) out.row(r) = coeff(r) * dir;
  }
  return out;
}

Matrix LayerBasis::pullback_error(const Decomposition& d, const Matrix& g) const {
  if (kind_ == Kind::kNeuron) throw UnsupportedError("the neuron basis has no error node");
  Matrix dz = node_grad(g);
  dz = dz.cwiseProduct((d.acts.array() > 0.0).cast<double>().matrix());
  const Matrix back = (dz * sae_->w_enc).array().rowwise() / sae_->in_std.array();
  return g - back;
}

void ReplacementModel::validate() const {
  if (!backbone) throw InputError("replacement model has no backbone");
  if (num_read_points() != backbone->num_read_points()) {
    throw InputError("replacement model needs one basis per read point (" +
                     std::to_string(backbone->num_read_points()) + "), got " + std::to_string(num_read_points()));
  }
  for (int l = 0; l < num_read_points(); ++l) {
    if (layers[l].width() != backbone->width()) {
      throw InputError("basis width mismatch at read point " + std::to_string(l));
    }
  }
}

ReplacementModel make_sae_model(const backbone::ResidualBackbone& bb,
                                const std::vector<std::shared_ptr<const sae::SaeParams>>& saes,
                                const std::vector<sae::FeatureStats>& stats) {
  if (saes.size() != stats.size()) throw InputError("need feature stats for every SAE");
  ReplacementModel rm;
  rm.backbone = &bb;
  rm.saes = saes;
  for (std::size_t l = 0; l < saes.size(); ++l) {
    if (!saes[l]) throw NotFoundError("no SAE for read point " + std::to_string(l));
    rm.layers.push_back(LayerBasis::from_sae(saes[l], stats[l]));
  }
  rm.validate();
  return rm;
}

ReplacementModel make_neuron_model(const backbone::ResidualBackbone& bb,
                                   const std::vector<std::shared_ptr<const sae::SaeParams>>& saes,
                                   const std::vector<sae::FeatureStats>& stats) {
  ReplacementModel rm;
  rm.backbone = &bb;
  rm.saes = saes;
  for (const auto& s : stats) rm.layers.push_back(LayerBasis::neurons(s.residual_median));
  rm.validate();
  return rm;
}

}  // namespace vitscope::attribution
