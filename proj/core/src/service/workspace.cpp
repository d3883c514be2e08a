#include "vitscope/service/workspace.hpp"

#include <algorithm>
#include <cstdlib>
#include <regex>

namespace vitscope::service {

namespace fs = std::filesystem;

Workspace::Workspace(fs::path root) : root_(std::move(root)) {}

Workspace Workspace::locate(const std::string& flag) {
  if (!flag.empty()) return Workspace(flag);
  if (const char* env = std::getenv("VITSCOPE_WORKSPACE"); env && *env) return Workspace(env);
  return Workspace("workspace");
}

void Workspace::init() const {
  const auto marker = root_ / "VERSION";
  if (fs::exists(marker)) {
    std::string v = read_file(marker);
    while (!v.empty() && (v.back() == '\n' || v.back() == '\r')) v.pop_back();
    if (v != kVersion) throw ConfigError("workspace " + root_.string() + " has format '" + v + "', expected " + kVersion);
  }
  for (const char* d : {"data", "backbone", "sae", "stats", "cards", "circuits", "reports", "interventions"}) {
    fs::create_directories(root_ / d);
  }
  if (!fs::exists(marker)) write_file_atomic(marker, std::string(kVersion) + "\n");
}

bool Workspace::initialized() const { return fs::exists(root_ / "VERSION"); }

fs::path Workspace::sae(int layer) const { return root_ / "sae" / ("L" + std::to_string(layer) + ".vsck"); }
fs::path Workspace::stats(int layer) const { return root_ / "stats" / ("L" + std::to_string(layer) + ".json"); }

fs::path Workspace::circuit(const std::string& id) const {
  if (!valid_id(id)) throw InputError("invalid circuit id '" + id + "'");
  return circuits_dir() / (id + ".json");
}

fs::path Workspace::report(const std::string& name) const {
  if (!valid_id(name)) throw InputError("invalid report name '" + name + "'");
  return reports_dir() / (name + ".json");
}

namespace {
fs::path hash_path(const fs::path& artifact) { return fs::path(artifact.string() + ".hash"); }
}  // namespace

void Workspace::stamp(const fs::path& artifact, const std::string& hash) const {
  write_file_atomic(hash_path(artifact), hash + "\n");
}

std::optional<std::string> Workspace::stamp_of(const fs::path& artifact) const {
  const auto p = hash_path(artifact);
  if (!fs::exists(p)) return std::nullopt;
  std::string h = read_file(p);
  while (!h.empty() && (h.back() == '\n' || h.back() == '\r')) h.pop_back();
  return h;
}

bool Workspace::fresh(const fs::path& artifact, const std::string& hash) const {
  return fs::exists(artifact) && stamp_of(artifact) == hash;
}

void Workspace::require(const fs::path& artifact, const std::string& hash, const std::string& hint) const {
  if (!fs::exists(artifact)) {
    throw NotFoundError("missing " + artifact.string() + "; run `vitscope " + hint + "` first");
  }
  const auto s = stamp_of(artifact);
  if (s != hash) {
    throw StaleArtifactError(artifact.string() + " was built from a different configuration (hash " +
                             s.value_or("none") + ", expected " + hash + "); rerun `vitscope " + hint + "`");
  }
}

bool Workspace::valid_id(const std::string& id) {
  static const std::regex kRe(R"([A-Za-z0-9_\-][A-Za-z0-9_.\-]*)");
  return !id.empty() && id.size() <= 200 && std::regex_match(id, kRe) && id.find("..") == std::string::npos;
}

std::vector<std::string> Workspace::list_ids(const fs::path& dir, const std::string& extension) const {
  std::vector<std::string> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().extension() != extension) continue;
    const auto stem = e.path().stem().string();
    if (valid_id(stem)) out.push_back(stem);
  }
  std::sort(out.begin(), out.end());
  return out;
}

Hashes::Hashes(const Config& c) {
  const Json j = to_json(c);
  data = config_hash(j.at("data"));
  backbone = config_hash({{"data", data}, {"backbone", j.at("backbone")}});
  Json sae_cfg = j.at("sae");
  sae_cfg.erase("sweep");
  sae_cfg.erase("fvu_gate");
  for (int l = 0; l < c.num_read_points(); ++l) {
    sae.push_back(config_hash({{"backbone", backbone}, {"sae", sae_cfg}, {"layer", l}}));
    stats.push_back(config_hash({{"sae", sae.back()}, {"stats", j.at("stats")}}));
  }
  circuits = config_hash({{"stats", stats}, {"circuits", j.at("circuits")}});
  intervene = config_hash({{"stats", stats}, {"intervene", j.at("intervene")}});
}

}  // namespace vitscope::service
