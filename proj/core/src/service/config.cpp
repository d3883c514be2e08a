#include "vitscope/service/config.hpp"

namespace vitscope::service {
namespace {

std::vector<int> int_list(const Json& j, const char* key, const std::vector<int>& def) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_array()) throw ConfigError(std::string("config key '") + key + "' must be an array");
  return j.at(key).get<std::vector<int>>();
}

}  // namespace

Config default_config() {
  Config c;
  c.backbone_train.epochs = 5;
  c.sae.train.learning_rate = 1e-3;
  c.sae.train.epochs = 30;
  return c;
}

void Config::validate() const {
  data.validate();
  backbone.validate();
  if (backbone.image_size != data.image_size || backbone.patch_size != data.patch_size) {
    throw ConfigError("backbone image/patch size must match the dataset");
  }
  if (backbone.num_classes != data.num_classes()) {
    throw ConfigError("backbone.num_classes must equal the dataset's class count");
  }
  sae.train.validate(sae.f);
  if (sae.k < 1 || sae.k > sae.f) throw ConfigError("sae.k must lie in [1, f]");
  if (sae.train_images < 1 || sae.heldout_images < 1) throw ConfigError("sae image counts must be positive");
  if (sae.sweep_layer < 0 || sae.sweep_layer >= num_read_points()) throw ConfigError("sae.sweep_layer out of range");
  for (int l : features.early_layers) {
    if (l < 0 || l >= num_read_points()) throw ConfigError("features.early_layers holds an invalid layer");
  }
  for (int l : features.tuning_layers) {
    if (l < 0 || l >= num_read_points()) throw ConfigError("features.tuning_layers holds an invalid layer");
  }
  if (features.angle_bins < 4) throw ConfigError("features.angle_bins must be at least 4");
  if (circuits.k < 1) throw ConfigError("circuits.k must be positive");
  if (circuits.eval_images < 1 || circuits.eval_images > data.eval_count) {
    throw ConfigError("circuits.eval_images must lie in [1, data.eval_count]");
  }
  if (service.port < 0 || service.port > 65535) throw ConfigError("service.port out of range");
}

Json to_json(const Config& c) {
  return {
      {"data", backbone::to_json(c.data)},
      {"backbone", {{"model", backbone::to_json(c.backbone)}, {"train", backbone::to_json(c.backbone_train)}}},
      {"sae",
       {{"f", c.sae.f},
        {"k", c.sae.k},
        {"train_images", c.sae.train_images},
        {"heldout_images", c.sae.heldout_images},
        {"fvu_gate", c.sae.fvu_gate},
        {"train", sae::to_json(c.sae.train)},
        {"sweep",
         {{"layer", c.sae.sweep_layer}, {"f", c.sae.sweep_f}, {"k", c.sae.sweep_k}, {"epochs", c.sae.sweep_epochs}}}}},
      {"stats", {{"images", c.stats.images}, {"exemplars", c.stats.exemplars}}},
      {"features",
       {{"mi_threshold", c.features.mi_threshold},
        {"null_shuffles", c.features.null_shuffles},
        {"early_layers", c.features.early_layers},
        {"probe", features::to_json(c.features.probe)},
        {"angle_bins", c.features.angle_bins},
        {"tuning_layers", c.features.tuning_layers},
        {"cards_per_layer", c.features.cards_per_layer}}},
      {"circuits",
       {{"k", c.circuits.k},
        {"mode", backbone::to_string(c.circuits.mode)},
        {"eval_images", c.circuits.eval_images},
        {"completeness_images", c.circuits.completeness_images},
        {"seed", c.circuits.seed},
        {"similarity_images_per_class", c.circuits.similarity_images_per_class},
        {"similarity_k", c.circuits.similarity_k}}},
      {"intervene", intervene::to_json(c.intervene)},
      {"service", {{"host", c.service.host}, {"port", c.service.port}, {"threads", c.service.threads}}},
      {"threads", c.threads},
  };
}

Config config_from_json(const Json& in) {
  Json j = to_json(default_config());
  j.merge_patch(in);
  Config c;
  try {
    c.data = backbone::shapes_config_from_json(j.at("data"));
    c.backbone = backbone::backbone_config_from_json(j.at("backbone").at("model"));
    c.backbone_train = backbone::backbone_train_settings_from_json(j.at("backbone").at("train"));

    const auto& s = j.at("sae");
    c.sae.f = s.at("f").get<int>();
    c.sae.k = s.at("k").get<int>();
    c.sae.train_images = s.at("train_images").get<int>();
    c.sae.heldout_images = s.at("heldout_images").get<int>();
    c.sae.fvu_gate = s.at("fvu_gate").get<double>();
    c.sae.train = sae::sae_train_config_from_json(s.at("train"));
    const auto& sw = s.at("sweep");
    c.sae.sweep_layer = sw.at("layer").get<int>();
    c.sae.sweep_f = int_list(sw, "f", c.sae.sweep_f);
    c.sae.sweep_k = int_list(sw, "k", c.sae.sweep_k);
    c.sae.sweep_epochs = sw.at("epochs").get<int>();

    c.stats.images = j.at("stats").at("images").get<int>();
    c.stats.exemplars = j.at("stats").at("exemplars").get<int>();

    const auto& fe = j.at("features");
    c.features.mi_threshold = fe.at("mi_threshold").get<double>();
    c.features.null_shuffles = fe.at("null_shuffles").get<int>();
    c.features.early_layers = int_list(fe, "early_layers", {});
    c.features.probe = features::curve_probe_config_from_json(fe.at("probe"));
    c.features.angle_bins = fe.at("angle_bins").get<int>();
    c.features.tuning_layers = int_list(fe, "tuning_layers", {});
    c.features.cards_per_layer = fe.at("cards_per_layer").get<int>();

    const auto& ci = j.at("circuits");
    c.circuits.k = ci.at("k").get<int>();
    c.circuits.mode = backbone::grad_mode_from_string(ci.at("mode").get<std::string>());
    c.circuits.eval_images = ci.at("eval_images").get<int>();
    c.circuits.completeness_images = ci.at("completeness_images").get<int>();
    c.circuits.seed = ci.at("seed").get<std::uint64_t>();
    c.circuits.similarity_images_per_class = ci.at("similarity_images_per_class").get<int>();
    c.circuits.similarity_k = ci.at("similarity_k").get<int>();

    c.intervene = intervene::selection_config_from_json(j.at("intervene"));

    const auto& sv = j.at("service");
    c.service.host = sv.at("host").get<std::string>();
    c.service.port = sv.at("port").get<int>();
    c.service.threads = sv.at("threads").get<int>();
    c.threads = j.at("threads").get<int>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value = Json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = Json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

Config load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  Json j = Json::object();
  if (!path.empty()) {
    if (!std::filesystem::exists(path)) throw NotFoundError("config file " + path.string() + " does not exist");
    try {
      j = Json::parse(read_file(path));
    } catch (const Json::parse_error& e) {
      throw ConfigError("config file " + path.string() + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

}  // namespace vitscope::service
