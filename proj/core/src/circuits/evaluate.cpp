#include "vitscope/circuits/evaluate.hpp"

#include <cmath>
#include <memory>

namespace vitscope::circuits {
namespace {

struct LayerPlan {
  bool touch = false;
  std::vector<char> pin;  // per feature
  bool pin_error = false;
};

std::vector<LayerPlan> plan(const attribution::ReplacementModel& rm, const CircuitGraph& c, CircuitMode mode) {
  if (c.top >= rm.num_read_points()) throw InputError("circuit reaches beyond the model's read points");
  std::vector<LayerPlan> out(c.top + 1);
  for (int l = 0; l <= c.top; ++l) {
    const auto& b = rm.layers[l];
    auto& p = out[l];
    p.pin.assign(b.size(), 0);
    std::vector<char> in(b.size(), 0);
    for (const auto& n : c.layers.at(l)) {
      if (n.key.error) {
        if (!b.has_error()) throw NotFoundError("layer " + std::to_string(l) + " has no error node");
        continue;
      }
      if (n.key.index < 0 || n.key.index >= b.size()) {
        throw NotFoundError("circuit node " + node_label(n.key) + " does not exist in the model");
      }
      in[n.key.index] = 1;
    }
    const bool err_in = c.has_error(l);
    for (int i = 0; i < b.size(); ++i) {
      p.pin[i] = (mode == CircuitMode::kKeepOnly) ? !in[i] : in[i];
      p.touch = p.touch || p.pin[i];
    }
    if (b.has_error()) {
      p.pin_error = (mode == CircuitMode::kKeepOnly) ? !err_in : err_in;
      p.touch = p.touch || p.pin_error;
    }
  }
  return out;
}

Matrix apply_plan(const attribution::LayerBasis& b, const LayerPlan& p, const Matrix& x) {
  auto d = b.decompose(x);
  for (int i = 0; i < b.size(); ++i) {
    if (p.pin[i]) d.acts.col(i).setConstant(b.baseline()(i));
  }
  if (p.pin_error) d.error.rowwise() = b.error_baseline();
  return b.compose(d.acts, d.error);
}

RowVector feature_means(const attribution::LayerBasis& b, const Matrix& x) { return b.decompose(x).acts.colwise().mean(); }

}  // namespace

backbone::ReadPointHook circuit_hook(const attribution::ReplacementModel& rm, const CircuitGraph& c, CircuitMode mode) {
  auto p = std::make_shared<std::vector<LayerPlan>>(plan(rm, c, mode));
  const auto* layers = &rm.layers;
  return [p, layers](int l, Matrix& x) {
    if (l >= static_cast<int>(p->size()) || !(*p)[l].touch) return;
    x = apply_plan((*layers)[l], (*p)[l], x);
  };
}

backbone::ForwardRecord run_with_circuit(const attribution::ReplacementModel& rm, const CircuitGraph& c,
                                         const backbone::Image& img, CircuitMode mode) {
  rm.validate();
  return backbone::run_forward(*rm.backbone, img, circuit_hook(rm, c, mode), false);
}

double circuit_objective(const attribution::ReplacementModel& rm, const CircuitGraph& c, const backbone::Image& img,
                         CircuitMode mode) {
  c.objective.validate(rm);
  return attribution::eval_objective(rm, c.objective, run_with_circuit(rm, c, img, mode));
}

FaithfulnessTerms faithfulness_terms(const attribution::ReplacementModel& rm, const attribution::Objective& m,
                                     int top, const backbone::Image& img) {
  FaithfulnessTerms t;
  t.m_full = attribution::eval_objective(rm, m, img);
  CircuitGraph empty = CircuitGraph::empty(top);
  empty.objective = m;
  t.m_empty = circuit_objective(rm, empty, img, CircuitMode::kKeepOnly);
  return t;
}

std::optional<double> faithfulness(const attribution::ReplacementModel& rm, const CircuitGraph& c,
                                   const backbone::Image& img, const FaithfulnessTerms& t) {
  if (!t.defined()) return std::nullopt;
  const double mc = circuit_objective(rm, c, img, CircuitMode::kKeepOnly);
  return (mc - t.m_empty) / (t.m_full - t.m_empty);
}

std::optional<double> faithfulness(const attribution::ReplacementModel& rm, const CircuitGraph& c,
                                   const backbone::Image& img) {
  return faithfulness(rm, c, img, faithfulness_terms(rm, c.objective, c.top, img));
}

std::optional<double> reported_completeness(const attribution::ReplacementModel& rm, const CircuitGraph& c,
                                            const backbone::Image& img, const FaithfulnessTerms& t) {
  if (!t.defined()) return std::nullopt;
  const double mr = circuit_objective(rm, c, img, CircuitMode::kAblate);
  return 1.0 - (mr - t.m_empty) / (t.m_full - t.m_empty);
}

std::optional<double> reported_completeness(const attribution::ReplacementModel& rm, const CircuitGraph& c,
                                            const backbone::Image& img) {
  return reported_completeness(rm, c, img, faithfulness_terms(rm, c.objective, c.top, img));
}

std::optional<double> causality(const attribution::ReplacementModel& rm, const CircuitGraph& c,
                                const backbone::Image& img) {
  rm.validate();
  std::vector<int> feature_layers;
  for (int l = 0; l < c.num_layers(); ++l) {
    if (!c.features(l).empty()) feature_layers.push_back(l);
  }
  if (feature_layers.size() < 2) return std::nullopt;
  const auto& bb = *rm.backbone;
  const auto base = backbone::run_forward(bb, img, {}, false);
  std::vector<RowVector> d0(c.num_layers());
  for (int l : feature_layers) d0[l] = feature_means(rm.layers[l], base.read_points[l]);

  double sum_over_layers = 0.0;
  int counted_layers = 0;
  for (int l : feature_layers) {
    if (l == feature_layers.back()) break;
    CircuitGraph only = CircuitGraph::empty(c.top);
    for (int i : c.features(l)) only.layers[l].push_back({{l, false, i}, 0.0, 0.0});
    const auto rec = backbone::run_forward_from(bb, l, base.read_points[l], circuit_hook(rm, only, CircuitMode::kAblate),
                                                false);
    double sum = 0.0;
    int n = 0;
    for (int lp : feature_layers) {
      if (lp <= l) continue;
      const RowVector after = feature_means(rm.layers[lp], rec.read_points[lp]);
      for (int i : c.features(lp)) {
        const double d = d0[lp](i);
        if (d < 1e-8) continue;
        sum += (d - after(i)) / d;
        ++n;
      }
    }
    if (n == 0) continue;
    sum_over_layers += sum / n;
    ++counted_layers;
  }
  if (counted_layers == 0) return std::nullopt;
  return sum_over_layers / counted_layers;
}

std::optional<double> mean_defined(const std::vector<std::optional<double>>& values) {
  double sum = 0.0;
  int n = 0;
  for (const auto& v : values) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

}  // namespace vitscope::circuits
