#include "vitscope/service/pipeline.hpp"
#include "vitscope/service/server.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <iostream>

using namespace vitscope;
using namespace vitscope::service;

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) out.push_back(std::stoi(part));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vitscope: sparse-autoencoder circuit workbench for vision transformers"};
  app.require_subcommand(0, 1);

  std::string workspace, config_path;
  std::vector<std::string> overrides;
  int threads = 0;
  bool quiet = false;
  app.add_option("-w,--workspace", workspace, "Workspace directory (default: $VITSCOPE_WORKSPACE or ./workspace)");
  app.add_option("-c,--config", config_path, "Config file (JSON); keys not given keep their defaults");
  app.add_option("--set", overrides, "Config override dotted.key=value (repeatable)");
  app.add_option("-j,--threads", threads, "Worker threads (overrides the config)");
  app.add_flag("-q,--quiet", quiet, "No progress messages");
  bool print_config = false;
  app.add_flag("--print-config", print_config, "Print the resolved config and exit");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset manifest");
  auto* tb = app.add_subcommand("train-backbone", "Train the toy ViT");

  auto* ts = app.add_subcommand("train-sae", "Train per-layer SAEs, or run the (f, k) sweep");
  std::string sae_layers;
  std::optional<int> sae_f, sae_k;
  bool sweep = false;
  ts->add_option("--layer", sae_layers, "Comma-separated read points (default: all)");
  ts->add_option("--f", sae_f, "Dictionary size");
  ts->add_option("--k", sae_k, "Active features per token");
  ts->add_flag("--sweep", sweep, "Train the (f, k) grid of the config at the sweep layer");

  auto* fv = app.add_subcommand("fvu", "Held-out FVU, exactness and decoder norms of the accepted SAEs");
  auto* fs = app.add_subcommand("fit-scaling", "Fit the joint scaling law to the sweep");
  auto* st = app.add_subcommand("feature-stats", "Per-feature statistics over the eval split");

  auto* cd = app.add_subcommand("cards", "Export feature cards");
  std::string card_layers, card_indices;
  cd->add_option("--layer", card_layers, "Comma-separated layers (default: all)");
  cd->add_option("--features", card_indices, "Comma-separated feature indices (default: most frequent)");

  auto* ps = app.add_subcommand("positions", "Position detectors, coverage and permutation null");
  auto* tc = app.add_subcommand("tuning-curves", "Radial tuning curves on the curve probe");

  auto* bg = app.add_subcommand("build-graph", "Full replacement graphs with timed edge extraction");
  int bg_first = 0, bg_images = 3;
  bg->add_option("--image", bg_first, "First eval image");
  bg->add_option("--images", bg_images, "Number of images");

  auto* dc = app.add_subcommand("discover", "Discover a circuit for one eval image");
  DiscoverRequest dreq;
  std::string strategy = "edge", mode;
  dc->add_option("--image", dreq.image, "Eval image index");
  dc->add_option("--objective", dreq.objective, "logit:C or feature:L:I (default: predicted-class logit)");
  dc->add_option("--strategy", strategy, "edge, node, top-p, threshold or random");
  dc->add_option("--k", dreq.k, "Nodes per layer");
  dc->add_option("--fraction", dreq.fraction, "Fraction of features per layer (top-p)");
  dc->add_option("--threshold", dreq.threshold, "Cumulative importance target (threshold)");
  dc->add_option("--mode", mode, "corrected or vanilla gradients");
  dc->add_option("--basis", dreq.basis, "sae or neuron");
  dc->add_flag("!--no-errors", dreq.include_errors, "Leave SAE error nodes out");
  dc->add_option("--id", dreq.id, "Output circuit id");

  auto* ev = app.add_subcommand("evaluate", "Faithfulness, completeness and causality of the strategies");
  EvaluateRequest ereq;
  bool identity = false;
  ev->add_option("--metric", ereq.metric, "faithfulness, completeness, causality or all");
  ev->add_flag("--auc,!--no-auc", ereq.auc, "AUC over the k-grid (default) or the configured k only");
  ev->add_option("--images", ereq.images, "Eval images");
  ev->add_option("--circuit", ereq.circuit, "Evaluate one stored circuit");
  ev->add_flag("--identity", identity, "Check the completeness identity instead");

  auto* sm = app.add_subcommand("similarity", "Adjusted Dice of intra- and inter-class circuits");

  auto* ab = app.add_subcommand("ablate", "Pin features and run the debiasing evaluation");
  std::vector<std::string> nodes;
  std::string policy = "median", spec_file;
  ab->add_option("--node", nodes, "Feature label like L3#12 (repeatable)");
  ab->add_option("--policy", policy, "median or zero");
  ab->add_option("--spec", spec_file, "Intervention spec file (JSON)");

  auto* de = app.add_subcommand("debias-eval", "Select the spurious feature by script and evaluate its ablation");

  auto* sv = app.add_subcommand("serve", "Serve the workspace over HTTP");
  std::optional<int> port;
  std::string host;
  sv->add_option("--port", port, "Port (default from config)");
  sv->add_option("--host", host, "Host (default from config)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (threads > 0) overrides.push_back("threads=" + std::to_string(threads));
    if (ts->parsed()) {
      if (sae_f) overrides.push_back("sae.f=" + std::to_string(*sae_f));
      if (sae_k) overrides.push_back("sae.k=" + std::to_string(*sae_k));
    }
    const Config cfg = load_config(config_path, overrides);
    if (print_config) {
      std::cout << to_json(cfg).dump(2) << std::endl;
      return 0;
    }
    if (app.get_subcommands().empty()) {
      std::cerr << app.help() << std::endl;
      return 2;
    }
    const Workspace ws = Workspace::locate(workspace);
    Progress progress;
    if (!quiet) progress = [](const std::string& m) { std::cerr << "[vitscope] " << m << std::endl; };

    if (sv->parsed()) {
      ApiServer server(ws, cfg, progress);
      const std::string h = host.empty() ? cfg.service.host : host;
      const int p = server.bind(h, port.value_or(cfg.service.port));
      std::cerr << "[vitscope] serving " << ws.root().string() << " on http://" << h << ":" << p << std::endl;
      server.listen();
      return 0;
    }

    Pipeline pipe(ws, cfg, progress);
    Json out;
    if (gen->parsed()) {
      out = pipe.gen_data();
    } else if (tb->parsed()) {
      out = pipe.train_backbone();
    } else if (ts->parsed()) {
      out = sweep ? pipe.sae_sweep() : pipe.train_sae(parse_int_list(sae_layers));
    } else if (fv->parsed()) {
      out = pipe.fvu();
    } else if (fs->parsed()) {
      out = pipe.fit_scaling();
    } else if (st->parsed()) {
      out = pipe.feature_stats();
    } else if (cd->parsed()) {
      out = pipe.cards(parse_int_list(card_layers), parse_int_list(card_indices));
    } else if (ps->parsed()) {
      out = pipe.positions();
    } else if (tc->parsed()) {
      out = pipe.tuning_curves();
    } else if (bg->parsed()) {
      out = pipe.build_graph(bg_first, bg_images);
    } else if (dc->parsed()) {
      dreq.strategy = circuits::strategy_from_string(strategy);
      if (!mode.empty()) dreq.mode = backbone::grad_mode_from_string(mode);
      out = pipe.discover(dreq);
    } else if (ev->parsed()) {
      out = identity ? pipe.completeness_identity() : pipe.evaluate(ereq);
    } else if (sm->parsed()) {
      out = pipe.similarity();
    } else if (ab->parsed()) {
      intervene::InterventionSpec spec;
      if (!spec_file.empty()) spec = intervene::intervention_spec_from_json(read_json(spec_file));
      for (const auto& n : nodes) spec.nodes.push_back(intervene::parse_feature_ref(n));
      if (spec_file.empty() || ab->count("--policy")) spec.policy = intervene::policy_from_string(policy);
      out = pipe.ablate(spec);
    } else if (de->parsed()) {
      out = pipe.debias();
    }
    // Long per-image arrays stay in the report files.
    if (out.is_object() && out.contains("arms")) {
      for (auto& [name, arm] : out["arms"].items()) {
        for (auto& [metric, v] : arm.items()) {
          if (v.is_object()) v.erase("per_image");
        }
      }
    }
    std::cout << out.dump(2) << std::endl;
    return 0;
  } catch (const StaleArtifactError& e) {
    std::cerr << "stale artifact: " << e.what() << std::endl;
    return 3;
  } catch (const NotFoundError& e) {
    std::cerr << "not found: " << e.what() << std::endl;
    return 4;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
