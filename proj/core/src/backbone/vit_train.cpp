#include "vitscope/backbone/vit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace vitscope::backbone {
namespace {

bool decays(const std::string& name) {
  return name.find("w_") != std::string::npos || name == "patch_w" || name == "head_w";
}

struct AdamState {
  VitParams m, v;
  long step = 0;
};

void adam_step(VitParams& params, VitParams& grads, AdamState& state, const BackboneTrainSettings& s, double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  std::vector<Matrix*> g_list, m_list, v_list;
  grads.for_each([&](const std::string&, Matrix& g) { g_list.push_back(&g); });
  state.m.for_each([&](const std::string&, Matrix& m) { m_list.push_back(&m); });
  state.v.for_each([&](const std::string&, Matrix& v) { v_list.push_back(&v); });
  std::size_t i = 0;
  params.for_each([&](const std::string& name, Matrix& p) {
    Matrix& g = *g_list[i];
    Matrix& m = *m_list[i];
    Matrix& v = *v_list[i];
    ++i;
    m = s.beta1 * m + (1.0 - s.beta1) * g;
    v = s.beta2 * v + (1.0 - s.beta2) * g.cwiseAbs2();
    if (decays(name)) p *= (1.0 - lr * s.weight_decay);
    p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + 1e-8);
  });
}

double softmax_cross_entropy(const RowVector& logits, int label, RowVector& grad) {
  const double mx = logits.maxCoeff();
  RowVector e = (logits.array() - mx).exp();
  const double z = e.sum();
  grad = e / z;
  const double loss = -(logits(label) - mx - std::log(z));
  grad(label) -= 1.0;
  return loss;
}

}  // namespace

Json to_json(const BackboneTrainSettings& s) {
  return {{"epochs", s.epochs}, {"batch_size", s.batch_size}, {"learning_rate", s.learning_rate},
          {"weight_decay", s.weight_decay}, {"beta1", s.beta1}, {"beta2", s.beta2},
          {"warmup_steps", s.warmup_steps}, {"seed", s.seed}};
}

BackboneTrainSettings backbone_train_settings_from_json(const Json& j) {
  BackboneTrainSettings s;
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.learning_rate = j.value("learning_rate", s.learning_rate);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.beta1 = j.value("beta1", s.beta1);
  s.beta2 = j.value("beta2", s.beta2);
  s.warmup_steps = j.value("warmup_steps", s.warmup_steps);
  s.seed = j.value("seed", s.seed);
  return s;
}

int predict(const ResidualBackbone& bb, const Image& img) {
  const RowVector logits = forward_logits(bb, img);
  Eigen::Index arg = 0;
  logits.maxCoeff(&arg);
  return static_cast<int>(arg);
}

double accuracy(const ResidualBackbone& bb, const Dataset& ds) {
  if (ds.samples.empty()) throw InputError("accuracy on an empty dataset");
  int correct = 0;
  for (const auto& s : ds.samples) correct += predict(bb, s.image) == s.label ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

TrainedBackbone train_backbone(const Dataset& train, const Dataset* eval, const BackboneConfig& config,
                               const BackboneTrainSettings& settings, const ProgressFn& progress) {
  config.validate();
  if (train.samples.empty()) throw InputError("train_backbone: dataset is empty");
  for (const auto& s : train.samples) {
    if (s.label < 0 || s.label >= config.num_classes) {
      throw InputError("label " + std::to_string(s.label) + " does not fit a head of size " +
                       std::to_string(config.num_classes));
    }
  }
  Vit model = Vit::initialize(config, settings.seed);
  TrainedBackbone out{model, {}};
  Vit& net = out.model;

  AdamState adam{VitParams::zeros(config), VitParams::zeros(config), 0};
  const int n = static_cast<int>(train.size());
  const int bs = std::max(1, settings.batch_size);
  const long steps_per_epoch = (n + bs - 1) / bs;
  const long total_steps = std::max<long>(1, steps_per_epoch * settings.epochs);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed({settings.seed, 0x7472ULL}));
  Vit::TrainingCache cache;

  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
    double loss_sum = 0.0;
    int correct = 0;
    for (int start = 0; start < n; start += bs) {
      const int end = std::min(n, start + bs);
      VitParams grads = VitParams::zeros(config);
      double batch_loss = 0.0;
      for (int i = start; i < end; ++i) {
        const auto& s = train.samples[order[i]];
        const RowVector logits = net.train_forward(s.image, cache);
        RowVector g;
        batch_loss += softmax_cross_entropy(logits, s.label, g);
        Eigen::Index arg = 0;
        logits.maxCoeff(&arg);
        correct += arg == s.label ? 1 : 0;
        net.train_backward(cache, g / static_cast<double>(end - start), grads);
      }
      if (!std::isfinite(batch_loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << ", step " << adam.step << ", batch starting at "
            << start << " (loss=" << batch_loss << ")";
        throw TrainingError(msg.str());
      }
      loss_sum += batch_loss;
      const long step = adam.step;
      double lr = settings.learning_rate;
      if (step < settings.warmup_steps) {
        lr *= static_cast<double>(step + 1) / settings.warmup_steps;
      } else {
        const double t = static_cast<double>(step - settings.warmup_steps) /
                         std::max<long>(1, total_steps - settings.warmup_steps);
        lr *= 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, t)));
      }
      adam_step(net.mutable_params(), grads, adam, settings, lr);
    }
    out.log.epoch_loss.push_back(loss_sum / n);
    out.log.epoch_train_accuracy.push_back(static_cast<double>(correct) / n);
    if (progress) {
      std::ostringstream msg;
      msg << "epoch " << epoch + 1 << "/" << settings.epochs << " loss " << loss_sum / n << " train-acc "
          << static_cast<double>(correct) / n;
      progress(msg.str());
    }
  }
  if (eval && !eval->samples.empty()) out.log.eval_accuracy = accuracy(net, *eval);
  return out;
}

}  // namespace vitscope::backbone
