#include "vitscope/features/annotations.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <map>
#include <tuple>

namespace vitscope::features {
namespace {

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<AnnotationRecord> read_all(const std::filesystem::path& path) {
  std::vector<AnnotationRecord> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const Json j = Json::parse(line);
    AnnotationRecord r = annotation_from_json(j);
    r.id = j.at("id").get<long>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

const std::vector<std::string>& annotation_categories() {
  static const std::vector<std::string> kCategories = {
      "Line",       "Shape",      "Color",         "Texture",      "Semantic",        "Object",
      "Background", "Positional", "Miscellaneous", "Polysemantic", "Uninterpretable"};
  return kCategories;
}

Json to_json(const AnnotationRecord& r) {
  return {{"id", r.id},         {"layer", r.layer},         {"index", r.index},         {"category", r.category},
          {"score", r.score},   {"note", r.note},           {"annotator", r.annotator}, {"timestamp", r.timestamp}};
}

void validate(const AnnotationRecord& r) {
  const auto& cats = annotation_categories();
  if (std::find(cats.begin(), cats.end(), r.category) == cats.end()) {
    throw InputError("field 'category': '" + r.category + "' is not one of the annotation categories");
  }
  if (r.score != 0.0 && r.score != 0.5 && r.score != 1.0) {
    throw InputError("field 'score': must be 0, 0.5 or 1");
  }
  if (r.annotator.empty()) throw InputError("field 'annotator': must not be empty");
  if (r.layer < 0) throw InputError("field 'layer': must be non-negative");
  if (r.index < 0) throw InputError("field 'index': must be non-negative");
}

AnnotationRecord annotation_from_json(const Json& j) {
  if (!j.is_object()) throw InputError("annotation body must be a JSON object");
  AnnotationRecord r;
  auto need = [&](const char* field) -> const Json& {
    if (!j.contains(field)) throw InputError(std::string("field '") + field + "': missing");
    return j.at(field);
  };
  try {
    r.layer = need("layer").get<int>();
    r.index = need("index").get<int>();
    r.category = need("category").get<std::string>();
    r.score = need("score").get<double>();
    r.annotator = need("annotator").get<std::string>();
    r.note = j.value("note", std::string());
    r.timestamp = j.value("timestamp", std::string());
  } catch (const Json::type_error& e) {
    throw InputError(std::string("annotation has a field of the wrong type: ") + e.what());
  }
  validate(r);
  return r;
}

AnnotationStore::AnnotationStore(std::filesystem::path path, FeatureExists exists)
    : path_(std::move(path)), exists_(std::move(exists)) {}

long AnnotationStore::record(AnnotationRecord r) {
  validate(r);
  if (exists_ && !exists_(r.layer, r.index)) {
    throw NotFoundError("feature L" + std::to_string(r.layer) + "_F" + std::to_string(r.index) + " does not exist");
  }
  if (r.timestamp.empty()) r.timestamp = now_utc();
  std::lock_guard lock(mu_);
  r.id = static_cast<long>(std::filesystem::exists(path_) ? read_all(path_).size() : 0);
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream out(path_, std::ios::app);
  out << to_json(r).dump() << '\n';
  out.flush();
  if (!out) throw Error("could not append to " + path_.string());
  return r.id;
}

std::vector<AnnotationRecord> AnnotationStore::all() const {
  std::lock_guard lock(mu_);
  if (!std::filesystem::exists(path_)) return {};
  return read_all(path_);
}

std::vector<AnnotationRecord> AnnotationStore::latest(int layer, int index) const {
  std::map<std::string, AnnotationRecord> by_annotator;
  for (auto& r : all()) {
    if (r.layer == layer && r.index == index) by_annotator[r.annotator] = r;
  }
  std::vector<AnnotationRecord> out;
  for (auto& [_, r] : by_annotator) out.push_back(r);
  return out;
}

std::optional<double> AnnotationStore::mean_score(int layer) const {
  std::map<std::tuple<int, std::string>, double> latest_scores;
  for (const auto& r : all()) {
    if (r.layer == layer) latest_scores[{r.index, r.annotator}] = r.score;
  }
  if (latest_scores.empty()) return std::nullopt;
  double sum = 0.0;
  for (const auto& [_, s] : latest_scores) sum += s;
  return sum / static_cast<double>(latest_scores.size());
}

}  // namespace vitscope::features
