// Acceptance suite: one PASS/FAIL line per criterion, read off a workspace
// produced by tools/run_pipeline.sh plus a few direct measurements.
//
//   acceptance --workspace DIR [--config FILE] [--run] [--script PATH] [--cli PATH]
//
// Without --run an existing finished run in DIR (reports/pipeline.json) is
// reused; otherwise the pipeline script is run there first.

#include "fixtures.hpp"

#include "vitscope/attribution/importance.hpp"
#include "vitscope/circuits/evaluate.hpp"
#include "vitscope/circuits/metrics.hpp"
#include "vitscope/circuits/similarity.hpp"
#include "vitscope/features/positions.hpp"
#include "vitscope/sae/scaling.hpp"
#include "vitscope/service/pipeline.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <numeric>
#include <sstream>

using namespace vitscope;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void line(bool pass, const std::string& name, const std::string& detail) {
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  if (!pass) ++failures;
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(4);
  ss << v;
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<double> per_image(const Json& eval, const std::string& arm, const std::string& metric) {
  return eval.at("arms").at(arm).at(metric).at("per_image").get<std::vector<double>>();
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

// Top-`count` nodes of read point layer + 1 by absolute node importance.
std::vector<int> top_downstream(attribution::ImageAttribution& ctx, int layer, int count) {
  const RowVector imp = ctx.node_importance(layer + 1).cwiseAbs();
  std::vector<int> idx(imp.size());
  std::iota(idx.begin(), idx.end(), 0);
  count = std::min<int>(count, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + count, idx.end(), [&](int a, int b) { return imp(a) > imp(b); });
  idx.resize(count);
  return idx;
}

// ---------------------------------------------------------------- criteria

void sae_exactness(service::Pipeline& p) {
  const auto& saes = p.saes();
  const auto& eval = p.dataset(backbone::Split::kEval);
  long mismatched = 0, total = 0;
  std::ostringstream per_layer;
  for (std::size_t l = 0; l < saes.size(); ++l) {
    long bad = 0;
    for (std::size_t i = 0; i < std::min<std::size_t>(50, eval.size()); ++i) {
      const auto rec = backbone::run_forward(p.backbone(), eval.samples[i].image, {}, false);
      const Matrix& x = rec.read_points[l];
      const auto cd = sae::encode_decode(*saes[l], x);
      bad += ((cd.reconstruction + cd.error).array() != x.array()).count();
      total += x.size();
    }
    mismatched += bad;
    per_layer << (l ? " " : "") << "L" << l << "=" << bad;
  }

  Rng rng(2024);
  int topk_bad = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int f = 1 + rng.uniform_int(0, 299);
    const int k = 1 + rng.uniform_int(0, 15);
    std::vector<double> pre(f);
    // Coarse values so that ties and zeros occur.
    for (auto& v : pre) v = trial % 4 == 0 ? std::round(4 * rng.normal()) / 4 : rng.normal();
    std::vector<int> order(f);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return pre[a] > pre[b]; });
    std::vector<int> want;
    for (int j = 0; j < k && j < f; ++j) {
      if (pre[order[j]] > 0) want.push_back(order[j]);
    }
    const auto got = sae::topk_relu(pre.data(), f, k);
    std::vector<int> got_idx(got.index.begin(), got.index.end());
    std::sort(got_idx.begin(), got_idx.end());
    std::sort(want.begin(), want.end());
    if (got_idx != want) ++topk_bad;
  }

  double worst_norm = 0.0;
  int checkpoints = 0;
  for (const auto& e : fs::directory_iterator(p.workspace().root() / "sae")) {
    if (e.path().extension() != ".vsck") continue;
    worst_norm = std::max(worst_norm, sae::load_sae(e.path()).max_decoder_norm_deviation());
    ++checkpoints;
  }
  const bool pass = mismatched == 0 && topk_bad == 0 && worst_norm <= 1e-6 && checkpoints > 0;
  line(pass, "SAE exactness",
       "x != recon + error on " + std::to_string(mismatched) + "/" + std::to_string(total) + " elements (" +
           per_layer.str() + "); TopK oracle mismatches " + std::to_string(topk_bad) +
           "/10000; max decoder norm deviation " + fmt(worst_norm) + " over " + std::to_string(checkpoints) +
           " checkpoints");
}

void fvu_gate(const service::Workspace& ws) {
  const Json r = read_json(ws.report("fvu"));
  const double gate = r.at("gate").get<double>();
  bool pass = r.at("all_below_gate").get<bool>() && gate <= 0.15;
  std::ostringstream d;
  for (const auto& l : r.at("layers")) {
    const double fvu = l.at("heldout_fvu").get<double>();
    const double secs = l.at("train_seconds").get<double>();
    pass = pass && fvu < 0.15 && secs <= 1800.0;
    d << "L" << l.at("layer").get<int>() << " " << fmt(fvu) << " (" << fmt(secs) << "s) ";
  }
  line(pass, "FVU gate", d.str() + "gate " + fmt(gate));
}

void scaling_law(const service::Workspace& ws) {
  const sae::ScalingLawParams truth{0.5, -0.6, -0.3, 0.05, -3.0, -0.2};
  std::vector<sae::ScalingObservation> obs;
  for (double f : {64.0, 128.0, 256.0, 512.0, 1024.0}) {
    for (double k : {2.0, 4.0, 8.0, 16.0, 32.0}) obs.push_back({f, k, truth(f, k)});
  }
  const auto fit = sae::fit_scaling_law(obs);
  const auto& q = fit.params;
  const double worst = std::max({std::abs(q.alpha - truth.alpha), std::abs(q.beta_k - truth.beta_k),
                                 std::abs(q.beta_f - truth.beta_f), std::abs(q.gamma - truth.gamma),
                                 std::abs(q.zeta - truth.zeta), std::abs(q.eta - truth.eta)});
  const double real_ve = read_json(ws.report("scaling")).at("variance_explained").get<double>();
  line(worst <= 1e-3 && fit.variance_explained >= 0.999 && real_ve >= 0.95, "Scaling-law self-consistency",
       "synthetic max param error " + fmt(worst) + ", variance explained " + fmt(fit.variance_explained) +
           "; toy sweep variance explained " + fmt(real_ve));
}

void jvp_equivalence(service::Pipeline& p) {
  double worst = 0.0;
  const auto t = fixtures::tiny_model(4, 6, 2);
  const auto rm = t.sae_model();
  for (auto mode : {backbone::GradMode::kCorrected, backbone::GradMode::kVanilla}) {
    for (int img = 0; img < 3; ++img) {
      attribution::ImageAttribution ctx(rm, t.images[img], attribution::Objective::logit(img % 3), mode);
      for (int l = 0; l < ctx.top_layer(); ++l) {
        std::vector<int> all(ctx.num_nodes(l + 1));
        std::iota(all.begin(), all.end(), 0);
        worst = std::max(worst, (ctx.edge_importance(l, all) - ctx.naive_edge_importance(l, all)).cwiseAbs().maxCoeff());
      }
    }
  }

  // Speed on the trained toy model: every read point pair, the ten most
  // important downstream nodes, setup shared and excluded.
  const auto& model = p.sae_model();
  const auto& eval = p.dataset(backbone::Split::kEval);
  double fast = 0.0, naive = 0.0;
  for (int img = 0; img < 2; ++img) {
    const auto& image = eval.samples[img].image;
    const auto m = attribution::Objective::logit(backbone::predict(p.backbone(), image));
    attribution::ImageAttribution a(model, image, m, backbone::GradMode::kCorrected);
    attribution::ImageAttribution b(model, image, m, backbone::GradMode::kCorrected);
    for (int l = 0; l < a.top_layer(); ++l) {
      const auto down = top_downstream(a, l, 10);
      auto t0 = std::chrono::steady_clock::now();
      const Matrix e1 = a.edge_importance(l, down);
      fast += seconds_since(t0);
      t0 = std::chrono::steady_clock::now();
      const Matrix e2 = b.naive_edge_importance(l, down);
      naive += seconds_since(t0);
    }
  }
  const double speedup = naive / fast;
  line(worst <= 1e-5 && speedup >= 20.0, "JVP equivalence",
       "fixture max abs diff " + fmt(worst) + "; toy model " + fmt(naive) + "s naive vs " + fmt(fast) +
           "s aggregated, speedup " + fmt(speedup) + "x");
}

void completeness(const service::Workspace& ws) {
  const Json r = read_json(ws.report("completeness_identity"));
  const int images = r.at("images").get<int>();
  const double corrected = r.at("corrected_max").get<double>();
  const double vanilla = r.at("vanilla_mean").get<double>();
  line(images >= 100 && corrected <= 1e-4 && vanilla > 1e-2, "Completeness identity",
       std::to_string(images) + " images; corrected max residual/|m| " + fmt(corrected) +
           ", vanilla mean residual/|m| " + fmt(vanilla));
}

void boundaries(service::Pipeline& p) {
  const auto& rm = p.sae_model();
  const auto& eval = p.dataset(backbone::Split::kEval);
  const int top = static_cast<int>(rm.layers.size()) - 1;
  std::vector<int> sizes;
  for (int l = 0; l <= top; ++l) sizes.push_back(rm.layers[l].size());
  int checked = 0, bad = 0;
  for (int i = 0; i < 20; ++i) {
    const auto& img = eval.samples[i].image;
    auto full = circuits::CircuitGraph::full(sizes, top);
    auto empty = circuits::CircuitGraph::empty(top);
    full.objective = empty.objective = attribution::Objective::logit(backbone::predict(p.backbone(), img));
    const auto terms = circuits::faithfulness_terms(rm, full.objective, top, img);
    if (!terms.defined()) continue;
    ++checked;
    if (circuits::faithfulness(rm, full, img, terms).value() != 1.0) ++bad;
    if (circuits::faithfulness(rm, empty, img, terms).value() != 0.0) ++bad;
    if (circuits::reported_completeness(rm, empty, img, terms).value() != 0.0) ++bad;
    if (circuits::reported_completeness(rm, full, img, terms).value() != 1.0) ++bad;
  }
  line(checked > 0 && bad == 0, "Metric boundary identities",
       std::to_string(checked) + " images, " + std::to_string(bad) + " inexact boundary values");
}

void strategy_ordering(const service::Workspace& ws) {
  const Json e = read_json(ws.report("evaluation"));
  const auto corrected = per_image(e, "edge-corrected", "faithfulness");
  const auto vanilla = per_image(e, "edge-vanilla", "faithfulness");
  auto random_plus = per_image(e, "random", "faithfulness");
  for (auto& v : random_plus) v += 0.1;
  const auto neuron = per_image(e, "neuron-edge-corrected", "faithfulness");
  const auto t1 = circuits::paired_t_test(corrected, vanilla);
  const auto t2 = circuits::paired_t_test(vanilla, random_plus);
  const auto t3 = circuits::paired_t_test(corrected, neuron);
  const int images = e.at("images").get<int>();
  const bool pass = images >= 200 && t1.mean_difference >= 0 && t1.p_one_sided < 0.05 && t2.mean_difference >= 0 &&
                    t2.p_one_sided < 0.05 && t3.mean_difference >= 0 && t3.p_one_sided < 0.05;
  line(pass, "Strategy ordering",
       std::to_string(images) + " images; faithfulness AUC corrected " + fmt(mean(corrected)) + ", vanilla " +
           fmt(mean(vanilla)) + ", random+0.1 " + fmt(mean(random_plus)) + ", neuron " + fmt(mean(neuron)) +
           "; p = " + fmt(t1.p_one_sided) + ", " + fmt(t2.p_one_sided) + ", " + fmt(t3.p_one_sided));
}

void causality(const service::Workspace& ws) {
  const Json e = read_json(ws.report("evaluation"));
  const double feat = mean(per_image(e, "edge-corrected", "causality"));
  const double rnd = mean(per_image(e, "random", "causality"));
  line(feat - rnd >= 0.05, "Causality ordering",
       "discovered " + fmt(feat) + " vs size-matched random " + fmt(rnd) + ", margin " + fmt(feat - rnd));
}

void positions(const service::Workspace& ws) {
  // One-hot frequency over four positions: (1/4)(ln 4 + 3 ln(4/3)) = 0.562 nats.
  const double hand = 0.25 * (std::log(4.0) + 3.0 * std::log(4.0 / 3.0));
  const double mi = features::position_mutual_information({0, 1, 0, 0});
  const Json r = read_json(ws.report("positions"));
  int above = 0;
  double worst_null = 0.0, best = 0.0;
  for (const auto& l : r.at("layers")) {
    for (const auto& d : l.at("detectors")) {
      const double v = d.at("mutual_information").get<double>();
      best = std::max(best, v);
      if (v > 0.05) ++above;
    }
    if (l.contains("null") && !l.at("null").is_null()) {
      worst_null = std::max(worst_null, l.at("null").at("mean_mi").get<double>());
    }
  }
  const bool formula = std::abs(mi - hand) <= 1e-6 && std::abs(hand - 0.562) < 5e-4;
  line(formula && above >= 1 && worst_null < 0.01, "Position detectors",
       "T=4 MI " + std::to_string(mi) + " (|diff| to hand value " + fmt(std::abs(mi - hand)) + "); " +
           std::to_string(above) +
           " early-layer features above 0.05 (best " + fmt(best) + "); permutation-null mean MI " + fmt(worst_null));
}

void curve_tuning(const service::Workspace& ws) {
  const Json r = read_json(ws.report("tuning"));
  bool pass = false;
  std::ostringstream d;
  for (const auto& l : r.at("layers")) {
    const int peaked = l.at("single_peak_features").get<int>();
    const double cov = l.at("top_coverage").get<double>();
    pass = pass || (peaked >= 1 && cov >= 0.75);
    d << "L" << l.at("layer").get<int>() << ": " << peaked << " single-peak features, coverage " << fmt(cov) << "; ";
  }
  line(pass, "Curve tuning", d.str());
}

void debiasing(const service::Workspace& ws, const service::Config& cfg) {
  const Json r = read_json(ws.report("debias"));
  const double rate = cfg.data.spurious_plant ? cfg.data.spurious_plant->rate : 0.0;
  const double gain = r.at("auc_gain").get<double>();
  const double drop = r.at("accuracy_drop").get<double>();
  const std::string chosen = r.at("chosen").is_string() ? r.at("chosen").get<std::string>() : "none";
  line(rate == 0.95 && r.at("chosen").is_string() && gain >= 0.05 && drop <= 0.01, "Debiasing loop",
       "plant rate " + fmt(rate) + ", ablated " + chosen + ": AUC " + fmt(r.at("baseline").at("auc").get<double>()) +
           " -> " + fmt(r.at("intervened").at("auc").get<double>()) + " (gain " + fmt(gain) + "), accuracy drop " +
           fmt(drop));
}

void similarity(const service::Workspace& ws, int num_layers) {
  const Json r = read_json(ws.report("similarity"));
  bool pass = true;
  int final_layers = 0;
  std::ostringstream d;
  for (const auto& l : r.at("layers")) {
    const int layer = l.at("layer").get<int>();
    if (layer < num_layers - 2) continue;
    ++final_layers;
    const double intra = l.at("intra_mean").get<double>(), inter = l.at("inter_mean").get<double>();
    pass = pass && intra > inter;
    d << "L" << layer << " intra " << fmt(intra) << " vs inter " << fmt(inter) << "; ";
  }
  const std::vector<int> a{1, 4, 9, 16, 25};
  const int n = 64;
  const auto s = circuits::adjusted_dice(a, a, n);
  const bool fixture = s && s->adjusted == 1.0 - static_cast<double>(a.size()) / n;
  line(pass && final_layers == 2 && fixture, "Circuit similarity",
       d.str() + "A=B fixture adjusted " + (s ? fmt(s->adjusted) : std::string("undefined")) + " (expect " +
           fmt(1.0 - static_cast<double>(a.size()) / n) + ")");
}

void budget(const service::Workspace& ws) {
  const double total = read_json(ws.report("pipeline")).at("total_seconds").get<double>();
  const double edge = read_json(ws.report("edge_timing")).at("max_edge_seconds").get<double>();
  line(total <= 7200.0 && edge <= 10.0, "End-to-end budget",
       "pipeline " + fmt(total) + "s, slowest edge extraction " + fmt(edge) + "s per image");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vitscope acceptance suite"};
  std::string workspace = "acceptance_ws", config, script, cli;
  bool run = false;
  app.add_option("-w,--workspace", workspace, "Workspace of a full pipeline run");
  app.add_option("-c,--config", config, "Config the run used (default: configs/desk.json)");
  app.add_option("--script", script, "Pipeline script");
  app.add_option("--cli", cli, "vitscope binary for the script");
  app.add_flag("--run", run, "Run the pipeline even when a finished run exists");
  CLI11_PARSE(app, argc, argv);

#ifdef VITSCOPE_SOURCE_DIR
  if (config.empty()) config = std::string(VITSCOPE_SOURCE_DIR) + "/configs/desk.json";
  if (script.empty()) script = std::string(VITSCOPE_SOURCE_DIR) + "/tools/run_pipeline.sh";
#endif

  try {
    const service::Workspace ws(workspace);
    if (run || !fs::exists(ws.report("pipeline"))) {
      std::string cmd;
      if (!cli.empty()) cmd += "VITSCOPE='" + cli + "' ";
      cmd += "bash '" + script + "' '" + workspace + "' '" + config + "'";
      std::cerr << "running " << cmd << std::endl;
      if (std::system(cmd.c_str()) != 0) {
        std::cerr << "pipeline failed" << std::endl;
        return 1;
      }
    }
    const auto cfg = service::load_config(config);
    service::Pipeline p(ws, cfg);

    sae_exactness(p);
    fvu_gate(ws);
    scaling_law(ws);
    jvp_equivalence(p);
    completeness(ws);
    boundaries(p);
    strategy_ordering(ws);
    causality(ws);
    positions(ws);
    curve_tuning(ws);
    debiasing(ws, cfg);
    similarity(ws, cfg.backbone.layers + 1);
    budget(ws);
  } catch (const std::exception& e) {
    std::cerr << "acceptance: " << e.what() << std::endl;
    return 1;
  }
  std::cout << failures << " criteria failed" << std::endl;
  return failures == 0 ? 0 : 1;
}
