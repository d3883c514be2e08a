#include "vitscope/attribution/importance.hpp"

#include <cmath>

namespace vitscope::attribution {

ImageAttribution::ImageAttribution(const ReplacementModel& rm, const backbone::Image& img, const Objective& m,
                                   backbone::GradMode mode)
    : rm_(&rm), m_(m), mode_(mode) {
  rm.validate();
  m.validate(rm);
  top_ = m.top_layer(*rm.backbone);
  rec_ = backbone::run_forward(*rm.backbone, img, {}, true);
  value_ = eval_objective(rm, m, rec_);
  grads_ = objective_gradients(rm, m, rec_, mode, &bias_);
  dec_.resize(top_ + 1);
  for (int l = 0; l <= top_; ++l) dec_[l] = rm.layers[l].decompose(rec_.read_points[l]);
}

int ImageAttribution::num_nodes(int layer) const {
  const auto& b = rm_->layers.at(layer);
  return b.size() + (b.has_error() ? 1 : 0);
}

RowVector ImageAttribution::node_activation(int layer) const {
  const auto& b = rm_->layers.at(layer);
  const auto& d = dec_.at(layer);
  RowVector out(num_nodes(layer));
  out.head(b.size()) = d.acts.colwise().mean();
  if (b.has_error()) out(b.error_index()) = d.error.rowwise().norm().mean();
  return out;
}

RowVector ImageAttribution::contract(int layer, const Matrix& h) const {
  const auto& b = rm_->layers.at(layer);
  const auto& d = dec_.at(layer);
  RowVector out(num_nodes(layer));
  const Matrix g_nodes = b.node_grad(h);
  out.head(b.size()) = g_nodes.cwiseProduct(d.acts.rowwise() - b.baseline()).colwise().sum();
  if (b.has_error()) out(b.error_index()) = h.cwiseProduct(d.error.rowwise() - b.error_baseline()).sum();
  return out;
}

RowVector ImageAttribution::node_importance(int layer) const {
  if (layer < 0 || layer > top_) throw InputError("layer " + std::to_string(layer) + " is outside the circuit range");
  return contract(layer, grads_[layer]);
}

Matrix ImageAttribution::downstream_cotangent(int above, int downstream, int only_token) const {
  const auto& b = rm_->layers.at(above);
  const auto& d = dec_.at(above);
  const Matrix& g = grads_.at(above);
  if (downstream < 0 || downstream >= num_nodes(above)) {
    throw InputError("downstream node " + std::to_string(downstream) + " does not exist at layer " + std::to_string(above));
  }
  Matrix cot;
  if (b.has_error() && downstream == b.error_index()) {
    cot = b.pullback_error(d, g);
  } else {
    const Matrix g_nodes = b.node_grad(g);
    cot = b.pullback_node(d, downstream, g_nodes.col(downstream));
  }
  if (only_token >= 0) {
    for (Eigen::Index t = 0; t < cot.rows(); ++t) {
      if (t != only_token) cot.row(t).setZero();
    }
  }
  return cot;
}

const Matrix& ImageAttribution::upstream_pullback(int layer, int downstream) {
  if (layer < 0 || layer >= top_) {
    throw InputError("edges from layer " + std::to_string(layer) + " need a downstream layer inside the circuit range");
  }
  const auto key = std::make_pair(layer, downstream);
  auto it = pullbacks_.find(key);
  if (it != pullbacks_.end()) return it->second;
  Matrix cot = downstream_cotangent(layer + 1, downstream, -1);
  Matrix h = rm_->backbone->backward_block(layer, *rec_.blocks[layer], cot, mode_, nullptr);
  ++backward_passes_;
  return pullbacks_.emplace(key, std::move(h)).first->second;
}

RowVector ImageAttribution::edge_scores(int layer, int downstream) {
  return contract(layer, upstream_pullback(layer, downstream));
}

Matrix ImageAttribution::edge_importance(int layer, const std::vector<int>& downstream) {
  Matrix out(num_nodes(layer), downstream.size());
  for (std::size_t j = 0; j < downstream.size(); ++j) out.col(j) = edge_scores(layer, downstream[j]).transpose();
  return out;
}

Matrix ImageAttribution::naive_edge_importance(int layer, const std::vector<int>& downstream) const {
  if (layer < 0 || layer >= top_) throw InputError("invalid layer for edge importance");
  Matrix out = Matrix::Zero(num_nodes(layer), downstream.size());
  const int tokens = static_cast<int>(rec_.read_points[layer].rows());
  for (std::size_t j = 0; j < downstream.size(); ++j) {
    for (int t = 0; t < tokens; ++t) {
      const Matrix cot = downstream_cotangent(layer + 1, downstream[j], t);
      const Matrix h = rm_->backbone->backward_block(layer, *rec_.blocks[layer], cot, mode_, nullptr);
      out.col(j) += contract(layer, h).transpose();
    }
  }
  return out;
}

double completeness_residual(const ReplacementModel& rm, const Objective& m, const backbone::Image& img, int layer,
                             backbone::GradMode mode) {
  rm.validate();
  m.validate(rm);
  if (layer < 0 || layer > m.top_layer(*rm.backbone)) throw InputError("completeness layer outside the objective's range");
  const auto rec = backbone::run_forward(*rm.backbone, img, {}, true);
  double total = 0.0;
  const auto grads = objective_gradients(rm, m, rec, mode, &total, layer);
  const auto& b = rm.layers[layer];
  const auto d = b.decompose(rec.read_points[layer]);
  const Matrix& g = grads[layer];
  if (b.kind() == LayerBasis::Kind::kNeuron) {
    total += g.cwiseProduct(d.acts).sum();
  } else {
    const auto& sae = *b.sae();
    total += b.node_grad(g).cwiseProduct(d.acts).sum();
    total += g.cwiseProduct(d.error).sum();
    // Decoder offsets mu + sigma * b_pre are bias terms of the replacement.
    const RowVector offset = sae.in_mean + sae.in_std.cwiseProduct(sae.b_pre);
    total += (g.colwise().sum()).dot(offset);
  }
  return std::abs(eval_objective(rm, m, rec) - total);
}

double verify_completeness(const ReplacementModel& rm, const Objective& m, const backbone::Image& img, int layer,
                           backbone::GradMode mode) {
  if (mode != backbone::GradMode::kCorrected) {
    throw UnsupportedError("the completeness identity only holds for corrected gradients");
  }
  return completeness_residual(rm, m, img, layer, mode);
}

}  // namespace vitscope::attribution
