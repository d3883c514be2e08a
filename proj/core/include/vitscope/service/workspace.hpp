#pragma once

#include "vitscope/service/config.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace vitscope::service {

/// Directory layout of one workbench run:
///
///   VERSION                    format marker
///   config.json                resolved config of the last command
///   data/manifest.json
///   backbone/model.vsck
///   sae/L{l}.vsck
///   stats/L{l}.json
///   cards/L{l}_F{i}.json (+ png exemplars)
///   annotations.jsonl
///   circuits/{id}.json
///   reports/{name}.json
///   interventions/{id}.json
///
/// Every artifact has a sibling "<file>.hash" holding the hash of the
/// configuration it was built from, chained through its upstream inputs.
class Workspace {
 public:
  static constexpr const char* kVersion = "vitscope-workspace/1";

  explicit Workspace(std::filesystem::path root);

  /// `flag` when non-empty, else $VITSCOPE_WORKSPACE, else ./workspace.
  static Workspace locate(const std::string& flag = {});

  const std::filesystem::path& root() const { return root_; }

  /// Creates the directories and the version marker. Throws ConfigError
  /// when an existing marker names another format.
  void init() const;
  bool initialized() const;

  std::filesystem::path config_file() const { return root_ / "config.json"; }
  std::filesystem::path manifest() const { return root_ / "data" / "manifest.json"; }
  std::filesystem::path backbone() const { return root_ / "backbone" / "model.vsck"; }
  std::filesystem::path sae(int layer) const;
  std::filesystem::path stats(int layer) const;
  std::filesystem::path cards_dir() const { return root_ / "cards"; }
  std::filesystem::path annotations() const { return root_ / "annotations.jsonl"; }
  std::filesystem::path circuits_dir() const { return root_ / "circuits"; }
  std::filesystem::path circuit(const std::string& id) const;
  std::filesystem::path reports_dir() const { return root_ / "reports"; }
  std::filesystem::path report(const std::string& name) const;
  std::filesystem::path interventions_dir() const { return root_ / "interventions"; }

  /// Records `hash` as the provenance of `artifact`.
  void stamp(const std::filesystem::path& artifact, const std::string& hash) const;
  std::optional<std::string> stamp_of(const std::filesystem::path& artifact) const;
  bool fresh(const std::filesystem::path& artifact, const std::string& hash) const;

  /// Throws NotFoundError ("... run `vitscope <hint>` first") when missing,
  /// StaleArtifactError when built from other inputs.
  void require(const std::filesystem::path& artifact, const std::string& hash, const std::string& hint) const;

  /// Names usable as ids: [A-Za-z0-9_.-]+, no leading dot.
  static bool valid_id(const std::string& id);

  std::vector<std::string> list_ids(const std::filesystem::path& dir, const std::string& extension) const;

 private:
  std::filesystem::path root_;
};

/// Provenance hashes of each artifact kind under `c`.
struct Hashes {
  std::string data;
  std::string backbone;
  std::vector<std::string> sae;    // per read point
  std::vector<std::string> stats;  // per read point
  std::string circuits;            // every SAE and stats file plus the circuits section
  std::string intervene;

  explicit Hashes(const Config& c);
};

}  // namespace vitscope::service
