#pragma once

#include "vitscope/attribution/basis.hpp"
#include "vitscope/backbone/vit.hpp"
#include "vitscope/circuits/discovery.hpp"
#include "vitscope/intervene/intervention.hpp"
#include "vitscope/service/workspace.hpp"

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace vitscope::service {

using Progress = std::function<void(const std::string&)>;

struct DiscoverRequest {
  int image = 0;  // eval split index
  std::string objective;  // "logit:c", "feature:l:i"; empty = predicted class
  circuits::Strategy strategy = circuits::Strategy::kEdge;
  std::optional<int> k;  // defaults to circuits.k
  double fraction = 0.01;
  double threshold = 0.0;
  std::optional<backbone::GradMode> mode;
  std::string basis = "sae";  // or "neuron"
  bool include_errors = true;
  std::string id;  // output name; derived when empty
};

struct EvaluateRequest {
  std::string metric = "all";  // faithfulness | completeness | causality | all
  bool auc = true;             // whole k-grid; otherwise circuits.k only
  std::optional<int> images;
  std::string circuit;  // evaluate one stored circuit instead of the strategy comparison
};

/// Every subcommand of the CLI. Each step checks its upstream artifacts,
/// writes its outputs with provenance stamps and returns a short summary.
class Pipeline {
 public:
  Pipeline(Workspace ws, Config cfg, Progress progress = {});

  const Config& config() const { return cfg_; }
  const Workspace& workspace() const { return ws_; }
  const Hashes& hashes() const { return hashes_; }

  Json gen_data();
  Json train_backbone();
  /// Empty `layers` trains every read point.
  Json train_sae(const std::vector<int>& layers = {});
  Json sae_sweep();
  Json fvu();
  Json fit_scaling();
  Json feature_stats();
  /// Empty `indices` exports the most frequent features of each layer.
  Json cards(const std::vector<int>& layers = {}, const std::vector<int>& indices = {});
  Json positions();
  Json tuning_curves();
  /// Full replacement graph of `images` eval images with timed edge extraction.
  Json build_graph(int first_image = 0, int images = 3);
  Json discover(const DiscoverRequest& req);
  Json evaluate(const EvaluateRequest& req);
  Json completeness_identity();
  Json similarity();
  Json ablate(const intervene::InterventionSpec& spec);
  Json debias();

  // Loaded artifacts, checked for freshness on first use.
  const backbone::Vit& backbone();
  const std::vector<std::shared_ptr<const sae::SaeParams>>& saes();
  const std::vector<sae::FeatureStats>& stats();
  const attribution::ReplacementModel& sae_model();
  const attribution::ReplacementModel& neuron_model();
  const backbone::Dataset& dataset(backbone::Split split);

 private:
  void note(const std::string& msg) const;
  void write_report(const std::string& name, const Json& j, const std::string& hash) const;
  void save_config() const;

  Workspace ws_;
  Config cfg_;
  Hashes hashes_;
  Progress progress_;

  std::unique_ptr<backbone::Vit> backbone_;
  std::vector<std::shared_ptr<const sae::SaeParams>> saes_;
  std::vector<sae::FeatureStats> stats_;
  std::unique_ptr<attribution::ReplacementModel> sae_model_, neuron_model_;
  std::map<backbone::Split, backbone::Dataset> datasets_;
};

/// Circuit id for a discovery request: "e{image}_{objective}_{strategy}_k{k}_{mode}_{basis}".
std::string circuit_id(const DiscoverRequest& req, const attribution::Objective& m, int k, backbone::GradMode mode);

}  // namespace vitscope::service
