#pragma once

#include "vitscope/io.hpp"

#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace vitscope::features {

const std::vector<std::string>& annotation_categories();

struct AnnotationRecord {
  long id = -1;  // assigned by the store
  int layer = 0;
  int index = 0;
  std::string category;
  double score = 0.0;  // 0, 0.5 or 1
  std::string note;
  std::string annotator;
  std::string timestamp;  // ISO-8601 UTC; filled in when empty
};

Json to_json(const AnnotationRecord& r);
/// Parses and validates; ValidationError-style InputError names the field.
AnnotationRecord annotation_from_json(const Json& j);
void validate(const AnnotationRecord& r);

/// Append-only line-delimited store. Later records for the same
/// (feature, annotator) supersede earlier ones for display; nothing is
/// ever rewritten.
class AnnotationStore {
 public:
  using FeatureExists = std::function<bool(int layer, int index)>;

  explicit AnnotationStore(std::filesystem::path path, FeatureExists exists = {});

  long record(AnnotationRecord r);
  std::vector<AnnotationRecord> all() const;
  /// Latest record per annotator for one feature, ordered by annotator.
  std::vector<AnnotationRecord> latest(int layer, int index) const;
  /// Mean score over the latest (feature, annotator) records of a layer.
  std::optional<double> mean_score(int layer) const;

 private:
  std::filesystem::path path_;
  FeatureExists exists_;
  mutable std::mutex mu_;
};

}  // namespace vitscope::features
