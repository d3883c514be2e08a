#include "vitscope/attribution/objective.hpp"

#include <sstream>

namespace vitscope::attribution {

Objective Objective::logit(int target_class) {
  Objective o;
  o.kind = Kind::kNormalizedLogit;
  o.target_class = target_class;
  return o;
}

Objective Objective::feature_activation(int layer, int feature) {
  Objective o;
  o.kind = Kind::kFeature;
  o.layer = layer;
  o.feature = feature;
  return o;
}

Objective Objective::parse(const std::string& s) {
  std::istringstream in(s);
  std::string kind;
  std::getline(in, kind, ':');
  try {
    if (kind == "logit") {
      std::string c;
      std::getline(in, c);
      return logit(std::stoi(c));
    }
    if (kind == "feature") {
      std::string l, i;
      std::getline(in, l, ':');
      std::getline(in, i);
      return feature_activation(std::stoi(l), std::stoi(i));
    }
  } catch (const std::logic_error&) {
  }
  throw InputError("cannot parse objective '" + s + "' (expected logit:<class> or feature:<layer>:<index>)");
}

std::string Objective::description() const {
  if (kind == Kind::kNormalizedLogit) return "logit:" + std::to_string(target_class);
  return "feature:" + std::to_string(layer) + ":" + std::to_string(feature);
}

int Objective::top_layer(const backbone::ResidualBackbone& bb) const {
  return kind == Kind::kNormalizedLogit ? bb.num_blocks() : layer - 1;
}

void Objective::validate(const ReplacementModel& rm) const {
  if (kind == Kind::kNormalizedLogit) {
    if (target_class < 0 || target_class >= rm.backbone->num_classes()) {
      throw InputError("target class " + std::to_string(target_class) + " outside [0, " +
                       std::to_string(rm.backbone->num_classes()) + ")");
    }
    return;
  }
  if (layer < 1 || layer >= rm.num_read_points()) {
    throw InputError("feature objective layer must lie in [1, " + std::to_string(rm.num_read_points() - 1) + "]");
  }
  if (layer >= static_cast<int>(rm.saes.size()) || !rm.saes[layer]) {
    throw NotFoundError("no SAE at layer " + std::to_string(layer) + " for the feature objective");
  }
  if (feature < 0 || feature >= rm.saes[layer]->num_features()) {
    throw InputError("feature objective index " + std::to_string(feature) + " out of range");
  }
}

Json to_json(const Objective& o) {
  if (o.kind == Objective::Kind::kNormalizedLogit) return {{"kind", "normalized-logit"}, {"target_class", o.target_class}};
  return {{"kind", "feature-activation"}, {"layer", o.layer}, {"feature", o.feature}};
}

Objective objective_from_json(const Json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "normalized-logit") return Objective::logit(j.at("target_class").get<int>());
  if (kind == "feature-activation") return Objective::feature_activation(j.at("layer").get<int>(), j.at("feature").get<int>());
  throw InputError("unknown objective kind '" + kind + "'");
}

double normalized_logit(const RowVector& logits, int target) {
  if (target < 0 || target >= logits.size()) throw InputError("invalid target class");
  return logits(target) - logits.mean();
}

double eval_objective(const ReplacementModel& rm, const Objective& m, const backbone::ForwardRecord& rec) {
  if (m.kind == Objective::Kind::kNormalizedLogit) return normalized_logit(rec.logits, m.target_class);
  const auto& sae = *rm.saes.at(m.layer);
  const auto codes = sae::encode(sae, rec.read_points.at(m.layer));
  double sum = 0.0;
  for (const auto& c : codes) {
    for (std::size_t j = 0; j < c.size(); ++j) {
      if (c.index[j] == m.feature) sum += c.value[j];
    }
  }
  return sum / static_cast<double>(codes.size());
}

double eval_objective(const ReplacementModel& rm, const Objective& m, const backbone::Image& img) {
  m.validate(rm);
  return eval_objective(rm, m, backbone::run_forward(*rm.backbone, img, {}, false));
}

std::vector<Matrix> objective_gradients(const ReplacementModel& rm, const Objective& m,
                                        const backbone::ForwardRecord& rec, backbone::GradMode mode,
                                        double* bias_contribution, int down_to) {
  m.validate(rm);
  const auto& bb = *rm.backbone;
  if (m.kind == Objective::Kind::kNormalizedLogit) {
    RowVector gl = RowVector::Constant(bb.num_classes(), -1.0 / bb.num_classes());
    gl(m.target_class) += 1.0;
    if (!rec.head) throw InputError("forward record lacks head state");
    Matrix g = bb.backward_head(*rec.head, gl, mode, bias_contribution);
    return backbone::backward_between(bb, rec, bb.num_blocks(), std::move(g), down_to, mode, bias_contribution);
  }
  const auto& sae = *rm.saes[m.layer];
  const Matrix& x = rec.read_points.at(m.layer);
  const auto codes = sae::encode(sae, x);
  const RowVector dir = sae.w_enc.row(m.feature).cwiseQuotient(sae.in_std);
  const double offset = -sae.w_enc.row(m.feature).dot(sae.in_mean.cwiseQuotient(sae.in_std) + sae.b_pre);
  const double inv_t = 1.0 / static_cast<double>(x.rows());
  Matrix g = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const auto& c = codes[t];
    for (std::size_t j = 0; j < c.size(); ++j) {
      if (c.index[j] != m.feature) continue;
      g.row(t) = inv_t * dir;
      if (bias_contribution) *bias_contribution += inv_t * offset;
    }
  }
  return backbone::backward_between(bb, rec, m.layer, std::move(g), down_to, mode, bias_contribution);
}

}  // namespace vitscope::attribution
