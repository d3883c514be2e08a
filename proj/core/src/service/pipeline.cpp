#include "vitscope/service/pipeline.hpp"

#include "vitscope/attribution/importance.hpp"
#include "vitscope/circuits/evaluate.hpp"
#include "vitscope/circuits/metrics.hpp"
#include "vitscope/circuits/similarity.hpp"
#include "vitscope/features/cards.hpp"
#include "vitscope/features/positions.hpp"
#include "vitscope/features/tuning.hpp"
#include "vitscope/intervene/selection.hpp"
#include "vitscope/rng.hpp"
#include "vitscope/sae/scaling.hpp"
#include "vitscope/sae/stats.hpp"
#include "vitscope/sae/tokens.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <mutex>
#include <numeric>

namespace vitscope::service {

namespace fs = std::filesystem;
using backbone::Split;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

Json paired_json(const circuits::PairedTest& t) {
  return {{"mean_difference", t.mean_difference}, {"t", t.t}, {"p_one_sided", t.p_one_sided}, {"n", t.n}};
}

int argmax(const RowVector& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

std::string sanitize(std::string s) {
  for (char& c : s) {
    if (c == ':' || c == '/' || c == ' ') c = '-';
  }
  return s;
}

}  // namespace

std::string circuit_id(const DiscoverRequest& req, const attribution::Objective& m, int k, backbone::GradMode mode) {
  if (!req.id.empty()) return req.id;
  std::string size = "k" + std::to_string(k);
  if (req.strategy == circuits::Strategy::kTopP) size = "p" + std::to_string(req.fraction);
  if (req.strategy == circuits::Strategy::kThreshold) size = "t" + std::to_string(req.threshold);
  return sanitize("e" + std::to_string(req.image) + "_" + m.description() + "_" + circuits::to_string(req.strategy) +
                  "_" + size + "_" + backbone::to_string(mode) + "_" + req.basis);
}

Pipeline::Pipeline(Workspace ws, Config cfg, Progress progress)
    : ws_(std::move(ws)), cfg_(std::move(cfg)), hashes_(cfg_), progress_(std::move(progress)) {
  cfg_.validate();
  ws_.init();
}

void Pipeline::note(const std::string& msg) const {
  if (progress_) progress_(msg);
}

void Pipeline::write_report(const std::string& name, const Json& j, const std::string& hash) const {
  const auto path = ws_.report(name);
  write_json_atomic(path, j);
  ws_.stamp(path, hash);
}

void Pipeline::save_config() const { write_json_atomic(ws_.config_file(), to_json(cfg_)); }

const backbone::Dataset& Pipeline::dataset(Split split) {
  auto it = datasets_.find(split);
  if (it == datasets_.end()) it = datasets_.emplace(split, backbone::generate_shapes_dataset(cfg_.data, split)).first;
  return it->second;
}

const backbone::Vit& Pipeline::backbone() {
  if (!backbone_) {
    ws_.require(ws_.manifest(), hashes_.data, "gen-data");
    ws_.require(ws_.backbone(), hashes_.backbone, "train-backbone");
    backbone_ = std::make_unique<backbone::Vit>(backbone::load_backbone(ws_.backbone()));
  }
  return *backbone_;
}

const std::vector<std::shared_ptr<const sae::SaeParams>>& Pipeline::saes() {
  if (saes_.empty()) {
    backbone();
    for (int l = 0; l < cfg_.num_read_points(); ++l) {
      ws_.require(ws_.sae(l), hashes_.sae[l], "train-sae --layer " + std::to_string(l));
      saes_.push_back(std::make_shared<const sae::SaeParams>(sae::load_sae(ws_.sae(l))));
    }
  }
  return saes_;
}

const std::vector<sae::FeatureStats>& Pipeline::stats() {
  if (stats_.empty()) {
    saes();
    for (int l = 0; l < cfg_.num_read_points(); ++l) {
      ws_.require(ws_.stats(l), hashes_.stats[l], "feature-stats");
      stats_.push_back(sae::load_feature_stats(ws_.stats(l)));
    }
  }
  return stats_;
}

const attribution::ReplacementModel& Pipeline::sae_model() {
  if (!sae_model_) {
    sae_model_ = std::make_unique<attribution::ReplacementModel>(attribution::make_sae_model(backbone(), saes(), stats()));
  }
  return *sae_model_;
}

const attribution::ReplacementModel& Pipeline::neuron_model() {
  if (!neuron_model_) {
    neuron_model_ =
        std::make_unique<attribution::ReplacementModel>(attribution::make_neuron_model(backbone(), saes(), stats()));
  }
  return *neuron_model_;
}

// ---------------------------------------------------------------- data

Json Pipeline::gen_data() {
  save_config();
  Json splits = Json::object();
  Json records = Json::array();
  for (Split s : {Split::kTrain, Split::kEval, Split::kSpuriousOnly, Split::kClassOnly}) {
    const auto& ds = dataset(s);
    splits[backbone::to_string(s)] = ds.size();
    for (std::size_t i = 0; i < ds.size(); ++i) records.push_back(backbone::manifest_record(ds.samples[i], s, static_cast<int>(i)));
  }
  const Json manifest = {{"config", backbone::to_json(cfg_.data)}, {"config_hash", hashes_.data}, {"splits", splits},
                         {"images", records}};
  write_json_atomic(ws_.manifest(), manifest);
  ws_.stamp(ws_.manifest(), hashes_.data);
  note("dataset manifest written");
  return {{"manifest", ws_.manifest().string()}, {"splits", splits}};
}

// ---------------------------------------------------------------- backbone

Json Pipeline::train_backbone() {
  ws_.require(ws_.manifest(), hashes_.data, "gen-data");
  save_config();
  const auto t0 = Clock::now();
  const auto& train = dataset(Split::kTrain);
  const auto& eval = dataset(Split::kEval);
  auto trained = backbone::train_backbone(train, &eval, cfg_.backbone, cfg_.backbone_train, progress_);
  const double secs = seconds_since(t0);

  Json log = {{"epoch_loss", trained.log.epoch_loss},
              {"epoch_train_accuracy", trained.log.epoch_train_accuracy},
              {"eval_accuracy", trained.log.eval_accuracy},
              {"seconds", secs}};
  backbone::save_backbone(ws_.backbone(), trained.model, {{"config_hash", hashes_.backbone}, {"log", log}});
  ws_.stamp(ws_.backbone(), hashes_.backbone);
  backbone_ = std::make_unique<backbone::Vit>(std::move(trained.model));
  saes_.clear();
  stats_.clear();
  sae_model_.reset();
  neuron_model_.reset();

  Json report = log;
  if (cfg_.data.spurious_plant) {
    intervene::InterventionSpec none;
    none.policy = intervene::Policy::kZero;
    const auto h = intervene::apply_intervention(*backbone_, {}, {}, none);
    const auto r = intervene::debias_eval(h, eval, dataset(Split::kSpuriousOnly), dataset(Split::kClassOnly),
                                          cfg_.data.spurious_plant->class_id, cfg_.threads);
    report["planted_class"] = r.planted_class;
    report["class_vs_spurious_auc"] = r.auc;
    report["spurious_planted_rate"] = r.spurious_planted_rate;
  }
  write_report("backbone", report, hashes_.backbone);
  note("backbone eval accuracy " + std::to_string(trained.log.eval_accuracy));
  return report;
}

// ---------------------------------------------------------------- SAEs

Json Pipeline::train_sae(const std::vector<int>& layers_in) {
  const auto& bb = backbone();
  save_config();
  std::vector<int> layers = layers_in;
  if (layers.empty()) {
    layers.resize(cfg_.num_read_points());
    std::iota(layers.begin(), layers.end(), 0);
  }
  for (int l : layers) {
    if (l < 0 || l >= cfg_.num_read_points()) throw InputError("layer " + std::to_string(l) + " out of range");
  }
  const auto t0 = Clock::now();
  const auto train_tokens = sae::collect_read_points(bb, dataset(Split::kTrain), cfg_.sae.train_images, cfg_.threads);
  const auto heldout_tokens = sae::collect_read_points(bb, dataset(Split::kEval), cfg_.sae.heldout_images, cfg_.threads);
  const double collect_secs = seconds_since(t0);
  note("collected " + std::to_string(train_tokens[0].rows()) + " training tokens per layer");

  Json out = Json::array();
  for (int l : layers) {
    const auto t1 = Clock::now();
    auto trained = sae::train_sae(train_tokens[l], l, cfg_.sae.f, cfg_.sae.k, cfg_.sae.train, &heldout_tokens[l],
                                  progress_);
    const double secs = seconds_since(t1) + collect_secs / static_cast<double>(layers.size());
    Json epochs = Json::array();
    for (const auto& e : trained.log.epochs) {
      epochs.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"aux_loss", e.aux_loss}, {"fvu", e.fvu},
                        {"dead_features", e.dead_features}});
    }
    const bool accepted = trained.log.final_fvu < cfg_.sae.fvu_gate;
    Json meta = {{"config_hash", hashes_.sae[l]},
                 {"train", sae::to_json(cfg_.sae.train)},
                 {"heldout_fvu", trained.log.final_fvu},
                 {"accepted", accepted},
                 {"seconds", secs}};
    sae::save_sae(ws_.sae(l), trained.params, meta);
    ws_.stamp(ws_.sae(l), hashes_.sae[l]);
    Json rep = meta;
    rep["layer"] = l;
    rep["epochs"] = epochs;
    rep["warnings"] = trained.log.warnings;
    write_report("sae_L" + std::to_string(l), rep, hashes_.sae[l]);
    note("layer " + std::to_string(l) + " held-out FVU " + std::to_string(trained.log.final_fvu) +
         (accepted ? "" : " (above gate)"));
    out.push_back({{"layer", l}, {"heldout_fvu", trained.log.final_fvu}, {"accepted", accepted}, {"seconds", secs}});
  }
  saes_.clear();
  stats_.clear();
  sae_model_.reset();
  neuron_model_.reset();
  return out;
}

Json Pipeline::sae_sweep() {
  const auto& bb = backbone();
  save_config();
  const int l = cfg_.sae.sweep_layer;
  const Matrix train = sae::collect_tokens(bb, dataset(Split::kTrain), l, cfg_.sae.train_images, cfg_.threads);
  const Matrix heldout = sae::collect_tokens(bb, dataset(Split::kEval), l, cfg_.sae.heldout_images, cfg_.threads);
  sae::SaeTrainConfig tc = cfg_.sae.train;
  tc.epochs = cfg_.sae.sweep_epochs;
  Json points = Json::array();
  for (int f : cfg_.sae.sweep_f) {
    for (int k : cfg_.sae.sweep_k) {
      if (k > f) continue;
      const auto t0 = Clock::now();
      const auto trained = sae::train_sae(train, l, f, k, tc, &heldout);
      points.push_back({{"f", f}, {"k", k}, {"fvu", trained.log.final_fvu}, {"seconds", seconds_since(t0)}});
      note("sweep f=" + std::to_string(f) + " k=" + std::to_string(k) + " FVU " + std::to_string(trained.log.final_fvu));
    }
  }
  const Json rep = {{"layer", l}, {"width", bb.width()}, {"epochs", tc.epochs}, {"points", points}};
  write_report("sae_sweep", rep, hashes_.sae[l]);
  return rep;
}

Json Pipeline::fvu() {
  const auto& bb = backbone();
  const auto& s = saes();
  const auto heldout = sae::collect_read_points(bb, dataset(Split::kEval), cfg_.sae.heldout_images, cfg_.threads);
  Json layers = Json::array();
  bool all_pass = true;
  for (int l = 0; l < cfg_.num_read_points(); ++l) {
    const double v = sae::compute_fvu(*s[l], heldout[l]);
    const auto codes = sae::encode_decode(*s[l], heldout[l]);
    long mismatches = 0;
    for (Eigen::Index r = 0; r < heldout[l].rows(); ++r) {
      for (Eigen::Index c = 0; c < heldout[l].cols(); ++c) {
        if (codes.reconstruction(r, c) + codes.error(r, c) != heldout[l](r, c)) ++mismatches;
      }
    }
    Json meta;
    sae::load_sae(ws_.sae(l), &meta);
    layers.push_back({{"layer", l},
                      {"heldout_fvu", v},
                      {"decoder_norm_deviation", s[l]->max_decoder_norm_deviation()},
                      {"exactness_mismatches", mismatches},
                      {"train_seconds", meta.value("seconds", 0.0)}});
    all_pass = all_pass && v < cfg_.sae.fvu_gate;
  }
  const Json rep = {{"gate", cfg_.sae.fvu_gate}, {"heldout_tokens", heldout[0].rows()}, {"layers", layers},
                    {"all_below_gate", all_pass}};
  write_report("fvu", rep, config_hash(hashes_.sae));
  return rep;
}

Json Pipeline::fit_scaling() {
  const int l = cfg_.sae.sweep_layer;
  const auto path = ws_.report("sae_sweep");
  ws_.require(path, hashes_.sae[l], "train-sae --sweep");
  const Json sweep = read_json(path);
  std::vector<sae::ScalingObservation> obs;
  for (const auto& p : sweep.at("points")) obs.push_back({p.at("f").get<double>(), p.at("k").get<double>(), p.at("fvu").get<double>()});
  const auto fit = sae::fit_scaling_law(obs);
  const int width = sweep.at("width").get<int>();
  Json contours = Json::array();
  for (double level : {0.05, 0.1}) {
    const auto c = sae::iso_fvu_contour(fit.params, level, width, {1, 2, 4, 8, 16});
    contours.push_back({{"level", level}, {"contour", sae::to_json(c)}});
  }
  const Json rep = {{"layer", l},
                    {"params", sae::to_json(fit.params)},
                    {"variance_explained", fit.variance_explained},
                    {"rss", fit.rss},
                    {"observations", obs.size()},
                    {"contours", contours}};
  write_report("scaling", rep, hashes_.sae[l]);
  note("scaling law variance explained " + std::to_string(fit.variance_explained));
  return rep;
}

// ---------------------------------------------------------------- features

Json Pipeline::feature_stats() {
  const auto& bb = backbone();
  const auto& s = saes();
  const auto& eval = dataset(Split::kEval);
  const int n = cfg_.stats.images < 0 ? static_cast<int>(eval.size())
                                      : std::min<int>(cfg_.stats.images, static_cast<int>(eval.size()));
  std::vector<sae::FeatureStatsAccumulator> acc;
  for (int l = 0; l < cfg_.num_read_points(); ++l) {
    acc.emplace_back(l, s[l]->num_features(), bb.num_tokens(), bb.width(), cfg_.stats.exemplars);
  }
  std::mutex mu;
  sae::parallel_for(n, cfg_.threads, [&](int i) {
    const auto rec = backbone::run_forward(bb, eval.samples[i].image, {}, false);
    const int pred = argmax(rec.logits);
    std::vector<sae::SaeCodes> codes;
    for (int l = 0; l < cfg_.num_read_points(); ++l) codes.push_back(sae::encode_decode(*s[l], rec.read_points[l]));
    std::lock_guard<std::mutex> lock(mu);
    for (int l = 0; l < cfg_.num_read_points(); ++l) {
      acc[l].add_image(i, codes[l].codes, codes[l].error, rec.read_points[l], pred);
    }
  });
  stats_.clear();
  sae_model_.reset();
  neuron_model_.reset();
  Json out = Json::array();
  for (int l = 0; l < cfg_.num_read_points(); ++l) {
    const auto st = acc[l].finalize();
    sae::save_feature_stats(ws_.stats(l), st, {{"config_hash", hashes_.stats[l]}, {"split", "eval"}, {"images", n}});
    ws_.stamp(ws_.stats(l), hashes_.stats[l]);
    int dead = 0;
    for (const auto& f : st.features) dead += f.active_tokens == 0;
    out.push_back({{"layer", l}, {"images", n}, {"dead_features", dead}});
  }
  note("feature stats written for " + std::to_string(n) + " eval images");
  return out;
}

Json Pipeline::cards(const std::vector<int>& layers_in, const std::vector<int>& indices) {
  const auto& bb = backbone();
  const auto& s = saes();
  const auto& st = stats();
  std::vector<int> layers = layers_in;
  if (layers.empty()) {
    layers.resize(cfg_.num_read_points());
    std::iota(layers.begin(), layers.end(), 0);
  }
  Json out = Json::array();
  for (int l : layers) {
    if (l < 0 || l >= cfg_.num_read_points()) throw InputError("layer " + std::to_string(l) + " out of range");
    std::vector<int> idx = indices;
    if (idx.empty()) {
      std::vector<int> order(st[l].features.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int b) { return st[l].features[a].frequency > st[l].features[b].frequency; });
      order.resize(std::min<std::size_t>(order.size(), cfg_.features.cards_per_layer));
      idx = order;
    }
    for (int i : idx) {
      if (i < 0 || i >= s[l]->num_features()) throw NotFoundError("feature L" + std::to_string(l) + "#" + std::to_string(i) + " does not exist");
    }
    const auto cards = features::build_feature_cards(bb, *s[l], st[l], dataset(Split::kEval), idx);
    for (const auto& c : cards) {
      features::export_feature_card(c, dataset(Split::kEval), cfg_.data.patch_size, ws_.cards_dir());
      const auto p = ws_.cards_dir() / (features::card_stem(l, c.index) + ".json");
      ws_.stamp(p, hashes_.stats[l]);
      out.push_back(features::card_stem(l, c.index));
    }
  }
  note("exported " + std::to_string(out.size()) + " feature cards");
  return out;
}

Json Pipeline::positions() {
  const auto& bb = backbone();
  const auto& s = saes();
  const auto& st = stats();
  const auto& eval = dataset(Split::kEval);
  const int images = static_cast<int>(st[0].images);
  const int positions = bb.num_tokens() - 1;
  Json layers = Json::array();
  int total = 0;
  for (int l : cfg_.features.early_layers) {
    const auto det = features::position_detectors(st[l], cfg_.features.mi_threshold);
    total += static_cast<int>(det.size());
    Json entry = {{"layer", l}, {"detectors", features::to_json(det)}};
    if (!det.empty()) {
      entry["coverage"] = features::to_json(features::coverage_map(det, st[l]));
      // Permutation null of the strongest detector's activity pattern.
      const int f = det.front().index;
      std::vector<std::uint8_t> active(static_cast<std::size_t>(images) * positions, 0);
      sae::parallel_for(images, cfg_.threads, [&](int i) {
        const auto rec = backbone::run_forward(bb, eval.samples[i].image, {}, false);
        const auto codes = sae::encode(*s[l], rec.read_points[l]);
        for (int t = 1; t <= positions; ++t) {
          for (int j : codes[t].index) {
            if (j == f) active[static_cast<std::size_t>(i) * positions + t - 1] = 1;
          }
        }
      });
      entry["null"] = {{"feature", f},
                       {"shuffles", cfg_.features.null_shuffles},
                       {"mean_mi", features::permutation_null_mi(active, images, positions, cfg_.features.null_shuffles,
                                                                 derive_seed({cfg_.circuits.seed, 17, static_cast<std::uint64_t>(l)}))}};
    }
    layers.push_back(entry);
  }
  const Json rep = {{"threshold", cfg_.features.mi_threshold}, {"layers", layers}, {"detectors_total", total}};
  write_report("positions", rep, config_hash(hashes_.stats));
  note("position detectors found: " + std::to_string(total));
  return rep;
}

Json Pipeline::tuning_curves() {
  const auto& bb = backbone();
  const auto& s = saes();
  const auto angles = features::angle_grid(cfg_.features.angle_bins);
  Json layers = Json::array();
  for (int l : cfg_.features.tuning_layers) {
    auto curves = features::radial_tuning_curves(bb, *s[l], cfg_.features.probe, angles);
    std::vector<features::TuningCurve> peaked;
    for (const auto& c : curves) {
      if (c.peak() > 0.0 && c.peak() >= 2.0 * c.median()) peaked.push_back(c);
    }
    std::stable_sort(peaked.begin(), peaked.end(), [](const auto& a, const auto& b) { return a.peak() > b.peak(); });
    std::vector<features::TuningCurve> top(peaked.begin(), peaked.begin() + std::min<std::size_t>(peaked.size(), 10));
    Json tj = Json::array();
    for (const auto& c : top) tj.push_back(features::to_json(c));
    layers.push_back({{"layer", l},
                      {"single_peak_features", peaked.size()},
                      {"top_coverage", top.empty() ? 0.0 : features::angular_coverage(top)},
                      {"top", tj}});
  }
  const Json rep = {{"probe", features::to_json(cfg_.features.probe)}, {"angle_bins", cfg_.features.angle_bins},
                    {"layers", layers}};
  write_report("tuning", rep, config_hash(hashes_.sae));
  return rep;
}

// ---------------------------------------------------------------- circuits

Json Pipeline::build_graph(int first_image, int images) {
  const auto& rm = sae_model();
  const auto& eval = dataset(Split::kEval);
  if (first_image < 0 || images < 1 || first_image + images > static_cast<int>(eval.size())) {
    throw InputError("build-graph image range outside the eval split");
  }
  Json timings = Json::array();
  std::vector<int> sizes;
  for (const auto& b : rm.layers) sizes.push_back(b.size());
  for (int i = first_image; i < first_image + images; ++i) {
    const auto& img = eval.samples[i].image;
    const auto m = attribution::Objective::logit(backbone::predict(*rm.backbone, img));
    const auto t0 = Clock::now();
    attribution::ImageAttribution ctx(rm, img, m, cfg_.circuits.mode);
    const int top = ctx.top_layer();
    std::vector<Matrix> edges;
    for (int l = 0; l < top; ++l) {
      std::vector<int> down(ctx.num_nodes(l + 1));
      std::iota(down.begin(), down.end(), 0);
      edges.push_back(ctx.edge_importance(l, down));
    }
    const double secs = seconds_since(t0);

    auto g = circuits::CircuitGraph::full(sizes, top, true);
    g.objective = m;
    g.strategy = "full";
    g.mode = cfg_.circuits.mode;
    g.image = i;
    for (int l = 0; l <= top; ++l) {
      const RowVector imp = ctx.node_importance(l);
      const RowVector act = ctx.node_activation(l);
      for (auto& n : g.layers[l]) {
        const int col = n.key.error ? rm.layers[l].error_index() : n.key.index;
        n.importance = imp(col);
        n.activation = act(col);
      }
    }
    // Keep the strongest edges; the full matrices are too large for a document.
    std::vector<circuits::CircuitEdge> all;
    for (int l = 0; l < top; ++l) {
      const auto& e = edges[l];
      auto key = [&](int layer, int idx) {
        const bool err = rm.layers[layer].has_error() && idx == rm.layers[layer].error_index();
        return circuits::NodeKey{layer, err, err ? 0 : idx};
      };
      for (Eigen::Index u = 0; u < e.rows(); ++u) {
        for (Eigen::Index d = 0; d < e.cols(); ++d) {
          if (e(u, d) != 0.0) all.push_back({key(l, static_cast<int>(u)), key(l + 1, static_cast<int>(d)), e(u, d)});
        }
      }
    }
    const std::size_t keep = 2000;
    if (all.size() > keep) {
      std::nth_element(all.begin(), all.begin() + keep, all.end(),
                       [](const auto& a, const auto& b) { return std::abs(a.importance) > std::abs(b.importance); });
      all.resize(keep);
      g.warnings.push_back("edges truncated to the " + std::to_string(keep) + " largest by magnitude");
    }
    g.edges = std::move(all);
    const std::string id = "graph_e" + std::to_string(i);
    circuits::save_circuit(ws_.circuit(id), g);
    ws_.stamp(ws_.circuit(id), hashes_.circuits);
    timings.push_back({{"image", i}, {"id", id}, {"edge_seconds", secs}, {"backward_passes", ctx.backward_passes()}});
    note("graph " + id + ": edge extraction " + std::to_string(secs) + " s");
  }
  double worst = 0.0;
  for (const auto& t : timings) worst = std::max(worst, t.at("edge_seconds").get<double>());
  const Json rep = {{"images", timings}, {"max_edge_seconds", worst}};
  write_report("edge_timing", rep, hashes_.circuits);
  return rep;
}

Json Pipeline::discover(const DiscoverRequest& req) {
  const bool neuron = req.basis == "neuron";
  if (!neuron && req.basis != "sae") throw InputError("basis must be 'sae' or 'neuron'");
  const auto& rm = neuron ? neuron_model() : sae_model();
  const auto& eval = dataset(Split::kEval);
  if (req.image < 0 || req.image >= static_cast<int>(eval.size())) throw InputError("image index outside the eval split");
  const auto& img = eval.samples[req.image].image;
  const auto m = req.objective.empty() ? attribution::Objective::logit(backbone::predict(*rm.backbone, img))
                                       : attribution::Objective::parse(req.objective);
  m.validate(rm);
  const auto mode = req.mode.value_or(cfg_.circuits.mode);
  attribution::ImageAttribution ctx(rm, img, m, mode);
  circuits::AttributionScoreSource src(ctx);
  circuits::DiscoveryOptions opt;
  opt.strategy = req.strategy;
  opt.k = req.k.value_or(cfg_.circuits.k);
  opt.fraction = req.fraction;
  opt.threshold = req.threshold;
  opt.include_errors = req.include_errors;
  opt.seed = derive_seed({cfg_.circuits.seed, static_cast<std::uint64_t>(req.image)});
  auto g = circuits::discover_circuit(src, opt);
  g.objective = m;
  g.image = req.image;
  const std::string id = circuit_id(req, m, opt.k, mode);
  circuits::save_circuit(ws_.circuit(id), g);
  ws_.stamp(ws_.circuit(id), hashes_.circuits);
  for (const auto& w : g.warnings) note("warning: " + w);
  note("circuit " + id + " with " + std::to_string(g.num_nodes()) + " nodes");
  return {{"id", id}, {"nodes", g.num_nodes()}, {"edges", g.edges.size()}, {"warnings", g.warnings}};
}

namespace {

struct Arm {
  std::string name;
  bool neuron = false;
  backbone::GradMode mode = backbone::GradMode::kCorrected;
  circuits::Strategy strategy = circuits::Strategy::kEdge;
  bool causality = true;
};

struct ArmResult {
  std::vector<double> faithfulness, completeness, causality;
  std::vector<std::vector<double>> curve_f, curve_c, curve_q;  // per image, clamped values
};

Json summarize(const std::vector<double>& v, const std::vector<std::vector<double>>& curves, const std::vector<int>& ks) {
  Json j = {{"mean", mean(v)}, {"per_image", v}};
  if (!curves.empty() && !ks.empty()) {
    std::vector<double> avg(ks.size(), 0.0);
    for (const auto& c : curves) {
      for (std::size_t i = 0; i < c.size(); ++i) avg[i] += c[i] / static_cast<double>(curves.size());
    }
    j["k"] = ks;
    j["curve_mean"] = avg;
  }
  return j;
}

}  // namespace

Json Pipeline::evaluate(const EvaluateRequest& req) {
  const std::vector<std::string> metrics = {"faithfulness", "completeness", "causality"};
  if (req.metric != "all" && std::find(metrics.begin(), metrics.end(), req.metric) == metrics.end()) {
    throw InputError("metric must be faithfulness, completeness, causality or all");
  }
  auto wants = [&](const std::string& m) { return req.metric == "all" || req.metric == m; };
  const auto& rm = sae_model();
  const auto& eval = dataset(Split::kEval);

  if (!req.circuit.empty()) {
    const auto path = ws_.circuit(req.circuit);
    ws_.require(path, hashes_.circuits, "discover");
    const auto g = circuits::load_circuit(path);
    const auto& model = g.basis == "neuron" ? neuron_model() : rm;
    if (g.image < 0 || g.image >= static_cast<int>(eval.size())) throw InputError("circuit has no eval image");
    const auto& img = eval.samples[g.image].image;
    Json rep = {{"circuit", req.circuit}};
    auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
    if (wants("faithfulness")) rep["faithfulness"] = opt(circuits::faithfulness(model, g, img));
    if (wants("completeness")) rep["completeness"] = opt(circuits::reported_completeness(model, g, img));
    if (wants("causality")) rep["causality"] = g.basis == "neuron" ? Json(nullptr) : opt(circuits::causality(model, g, img));
    write_report("circuit_" + req.circuit, rep, hashes_.circuits);
    return rep;
  }

  const int n = req.images.value_or(cfg_.circuits.eval_images);
  if (n < 1 || n > static_cast<int>(eval.size())) throw InputError("evaluate needs 1..eval_count images");
  const auto& nm = neuron_model();
  const std::vector<Arm> arms = {
      {"edge-corrected", false, backbone::GradMode::kCorrected, circuits::Strategy::kEdge, true},
      {"edge-vanilla", false, backbone::GradMode::kVanilla, circuits::Strategy::kEdge, true},
      {"node-corrected", false, backbone::GradMode::kCorrected, circuits::Strategy::kNode, true},
      {"random", false, backbone::GradMode::kCorrected, circuits::Strategy::kRandom, true},
      {"neuron-edge-corrected", true, backbone::GradMode::kCorrected, circuits::Strategy::kEdge, false},
  };
  const int f_feat = rm.layers.front().size();
  const int f_neuron = nm.layers.front().size();
  std::vector<ArmResult> res(arms.size());
  for (auto& r : res) {
    r.faithfulness.assign(n, 0.0);
    r.completeness.assign(n, 0.0);
    r.causality.assign(n, 0.0);
    r.curve_f.assign(n, {});
    r.curve_c.assign(n, {});
    r.curve_q.assign(n, {});
  }
  const auto t0 = Clock::now();
  int done = 0;
  std::mutex mu;
  sae::parallel_for(n, cfg_.threads, [&](int i) {
    const auto& img = eval.samples[i].image;
    const auto m = attribution::Objective::logit(backbone::predict(*rm.backbone, img));
    const int top = m.top_layer(*rm.backbone);
    const auto terms_f = circuits::faithfulness_terms(rm, m, top, img);
    const auto terms_n = circuits::faithfulness_terms(nm, m, top, img);
    std::map<std::pair<bool, backbone::GradMode>, std::unique_ptr<attribution::ImageAttribution>> ctxs;
    for (std::size_t a = 0; a < arms.size(); ++a) {
      const auto& arm = arms[a];
      const auto& model = arm.neuron ? nm : rm;
      const auto& terms = arm.neuron ? terms_n : terms_f;
      auto& ctx = ctxs[{arm.neuron, arm.mode}];
      if (!ctx) ctx = std::make_unique<attribution::ImageAttribution>(model, img, m, arm.mode);
      circuits::AttributionScoreSource src(*ctx);
      const int f_max = arm.neuron ? f_neuron : f_feat;
      std::vector<int> ks = req.auc ? circuits::k_grid(f_max) : std::vector<int>{std::min(cfg_.circuits.k, f_max)};
      std::vector<double> fv, cv, qv;
      for (int k : ks) {
        circuits::DiscoveryOptions opt;
        opt.strategy = arm.strategy;
        opt.k = k;
        opt.record_edges = false;
        opt.seed = derive_seed({cfg_.circuits.seed, static_cast<std::uint64_t>(i)});
        auto g = circuits::discover_circuit(src, opt);
        g.objective = m;
        auto nan_if = [](const std::optional<double>& v) { return v.value_or(std::nan("")); };
        if (wants("faithfulness")) fv.push_back(nan_if(circuits::faithfulness(model, g, img, terms)));
        if (wants("completeness")) cv.push_back(nan_if(circuits::reported_completeness(model, g, img, terms)));
        if (wants("causality") && arm.causality) qv.push_back(nan_if(circuits::causality(model, g, img)));
      }
      auto& r = res[a];
      if (!fv.empty()) {
        const auto c = circuits::curve_from_values(ks, fv);
        r.faithfulness[i] = c.auc;
        r.curve_f[i] = c.value;
      }
      if (!cv.empty()) {
        const auto c = circuits::curve_from_values(ks, cv);
        r.completeness[i] = c.auc;
        r.curve_c[i] = c.value;
      }
      if (!qv.empty()) {
        const auto c = circuits::curve_from_values(ks, qv);
        r.causality[i] = c.auc;
        r.curve_q[i] = c.value;
      }
    }
    std::lock_guard<std::mutex> lock(mu);
    ++done;
    if (done % 10 == 0 || done == n) {
      note("evaluated " + std::to_string(done) + "/" + std::to_string(n) + " images (" +
           std::to_string(seconds_since(t0)) + " s)");
    }
  });

  Json arms_j = Json::object();
  for (std::size_t a = 0; a < arms.size(); ++a) {
    const int f_max = arms[a].neuron ? f_neuron : f_feat;
    const auto ks = req.auc ? circuits::k_grid(f_max) : std::vector<int>{std::min(cfg_.circuits.k, f_max)};
    Json j = {{"f_max", f_max}};
    if (wants("faithfulness")) j["faithfulness"] = summarize(res[a].faithfulness, res[a].curve_f, ks);
    if (wants("completeness")) j["completeness"] = summarize(res[a].completeness, res[a].curve_c, ks);
    if (wants("causality") && arms[a].causality) j["causality"] = summarize(res[a].causality, res[a].curve_q, ks);
    arms_j[arms[a].name] = j;
  }
  Json tests = Json::object();
  auto idx = [&](const std::string& name) {
    for (std::size_t a = 0; a < arms.size(); ++a) {
      if (arms[a].name == name) return a;
    }
    throw InputError("unknown arm " + name);
  };
  auto test = [&](const std::string& metric, const std::string& a, const std::string& b,
                  std::vector<double> ArmResult::*field) {
    tests[metric + ":" + a + ">" + b] = paired_json(circuits::paired_t_test(res[idx(a)].*field, res[idx(b)].*field));
  };
  if (wants("faithfulness")) {
    test("faithfulness", "edge-corrected", "edge-vanilla", &ArmResult::faithfulness);
    test("faithfulness", "edge-vanilla", "random", &ArmResult::faithfulness);
    test("faithfulness", "edge-corrected", "neuron-edge-corrected", &ArmResult::faithfulness);
    test("faithfulness", "edge-corrected", "node-corrected", &ArmResult::faithfulness);
  }
  if (wants("causality")) {
    test("causality", "edge-corrected", "random", &ArmResult::causality);
    test("causality", "edge-corrected", "node-corrected", &ArmResult::causality);
  }
  const Json rep = {{"images", n},       {"metric", req.metric}, {"auc", req.auc}, {"objective", "predicted-class logit"},
                    {"arms", arms_j},    {"tests", tests},       {"seconds", seconds_since(t0)}};
  write_report("evaluation", rep, hashes_.circuits);
  return rep;
}

Json Pipeline::completeness_identity() {
  const auto& rm = sae_model();
  const auto& eval = dataset(Split::kEval);
  const int n = std::min<int>(cfg_.circuits.completeness_images, static_cast<int>(eval.size()));
  std::vector<double> corrected(n), vanilla(n), values(n);
  sae::parallel_for(n, cfg_.threads, [&](int i) {
    const auto& img = eval.samples[i].image;
    const auto m = attribution::Objective::logit(backbone::predict(*rm.backbone, img));
    const double v = attribution::eval_objective(rm, m, backbone::run_forward(*rm.backbone, img, {}, false));
    double worst_c = 0.0, sum_v = 0.0;
    for (int l = 0; l < rm.num_read_points(); ++l) {
      worst_c = std::max(worst_c, attribution::completeness_residual(rm, m, img, l, backbone::GradMode::kCorrected));
      sum_v += attribution::completeness_residual(rm, m, img, l, backbone::GradMode::kVanilla);
    }
    values[i] = v;
    corrected[i] = worst_c / std::abs(v);
    vanilla[i] = sum_v / rm.num_read_points() / std::abs(v);
  });
  const Json rep = {{"images", n},
                    {"objective", "predicted-class logit"},
                    {"corrected_relative", corrected},
                    {"vanilla_relative", vanilla},
                    {"objective_values", values},
                    {"corrected_max", *std::max_element(corrected.begin(), corrected.end())},
                    {"vanilla_mean", mean(vanilla)}};
  write_report("completeness_identity", rep, hashes_.circuits);
  return rep;
}

Json Pipeline::similarity() {
  const auto& rm = sae_model();
  const auto& eval = dataset(Split::kEval);
  const int classes = cfg_.data.num_classes();
  const int per = cfg_.circuits.similarity_images_per_class;
  std::vector<std::pair<int, circuits::CircuitGraph>> circuits_by_class;
  for (int c = 0; c < classes; ++c) {
    int taken = 0;
    for (int i = 0; i < static_cast<int>(eval.size()) && taken < per; ++i) {
      if (eval.samples[i].label != c) continue;
      const auto m = attribution::Objective::logit(c);
      attribution::ImageAttribution ctx(rm, eval.samples[i].image, m, cfg_.circuits.mode);
      circuits::AttributionScoreSource src(ctx);
      circuits::DiscoveryOptions opt;
      opt.k = cfg_.circuits.similarity_k;
      opt.include_errors = false;
      auto g = circuits::discover_circuit(src, opt);
      g.objective = m;
      g.image = i;
      circuits_by_class.emplace_back(c, std::move(g));
      ++taken;
    }
  }
  const int top = rm.backbone->num_blocks();
  Json layers = Json::array();
  for (int l : {top - 1, top}) {
    std::vector<double> intra, inter;
    const int n = rm.layers[l].size();
    for (std::size_t a = 0; a < circuits_by_class.size(); ++a) {
      for (std::size_t b = a + 1; b < circuits_by_class.size(); ++b) {
        const auto d = circuits::circuit_similarity(circuits_by_class[a].second, circuits_by_class[b].second, l, n);
        if (!d) continue;
        (circuits_by_class[a].first == circuits_by_class[b].first ? intra : inter).push_back(d->adjusted);
      }
    }
    layers.push_back({{"layer", l},
                      {"intra_mean", mean(intra)},
                      {"inter_mean", mean(inter)},
                      {"intra_pairs", intra.size()},
                      {"inter_pairs", inter.size()},
                      {"rank_auc", intra.empty() || inter.empty() ? Json(nullptr) : Json(circuits::rank_auc(intra, inter))}});
  }
  Json trace = nullptr;
  if (!circuits_by_class.empty()) {
    trace = circuits::to_json(circuits::feature_similarity_trace(circuits_by_class.front().second, rm.saes));
  }
  const Json rep = {{"images_per_class", per}, {"k", cfg_.circuits.similarity_k}, {"layers", layers},
                    {"feature_similarity", trace}};
  write_report("similarity", rep, hashes_.circuits);
  return rep;
}

// ---------------------------------------------------------------- intervene

Json Pipeline::ablate(const intervene::InterventionSpec& spec_in) {
  if (!cfg_.data.spurious_plant) throw ConfigError("dataset config has no spurious plant to evaluate against");
  const auto spec = spec_in.normalized();
  const auto h = intervene::apply_intervention(backbone(), saes(), stats(), spec);
  const auto r = intervene::debias_eval(h, dataset(Split::kEval), dataset(Split::kSpuriousOnly),
                                        dataset(Split::kClassOnly), cfg_.data.spurious_plant->class_id, cfg_.threads);
  Json rep = intervene::to_json(r);
  const Json spec_j = intervene::to_json(spec);
  const std::string id = "spec_" + config_hash(spec_j);
  write_json_atomic(ws_.interventions_dir() / (id + ".json"), spec_j);
  rep["intervention_id"] = id;
  write_report("ablation", rep, hashes_.intervene);
  return rep;
}

Json Pipeline::debias() {
  if (!cfg_.data.spurious_plant) throw ConfigError("dataset config has no spurious plant");
  const auto& rm = sae_model();
  const auto sel = intervene::select_spurious_feature(rm, stats(), cfg_.data, cfg_.intervene, cfg_.threads);
  intervene::InterventionSpec none;
  none.policy = cfg_.intervene.policy;
  const int planted = cfg_.data.spurious_plant->class_id;
  auto run = [&](const intervene::InterventionSpec& s) {
    return intervene::debias_eval(intervene::apply_intervention(backbone(), saes(), stats(), s), dataset(Split::kEval),
                                  dataset(Split::kSpuriousOnly), dataset(Split::kClassOnly), planted, cfg_.threads);
  };
  const auto base = run(none);
  Json rep = {{"planted_class", planted}, {"selection", intervene::to_json(sel)}, {"baseline", intervene::to_json(base)}};
  if (sel.chosen) {
    intervene::InterventionSpec spec = none;
    spec.nodes = {*sel.chosen};
    const auto r = run(spec);
    rep["chosen"] = "L" + std::to_string(sel.chosen->layer) + "#" + std::to_string(sel.chosen->index);
    rep["intervened"] = intervene::to_json(r);
    rep["auc_gain"] = r.auc - base.auc;
    rep["accuracy_drop"] = base.accuracy - r.accuracy;
    note("ablating " + rep["chosen"].get<std::string>() + ": AUC " + std::to_string(base.auc) + " -> " +
         std::to_string(r.auc) + ", accuracy " + std::to_string(base.accuracy) + " -> " + std::to_string(r.accuracy));
  } else {
    rep["chosen"] = nullptr;
    note("no candidate raised the AUC within the accuracy budget");
  }
  write_report("debias", rep, hashes_.intervene);
  return rep;
}

}  // namespace vitscope::service
