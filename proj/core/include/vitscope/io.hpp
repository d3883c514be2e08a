#pragma once

#include "vitscope/common.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace vitscope {

using Json = nlohmann::json;

/// Versioned binary container: a JSON metadata document plus named
/// double-precision arrays. Used for every checkpoint the workbench writes.
///
/// Layout: 8-byte magic "VSCKPT01", u32 format version, u64 metadata length,
/// metadata bytes (UTF-8 JSON), then each array's row-major doubles in
/// little-endian order, at the offsets listed in metadata["arrays"].
struct Container {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::string kind;
  Json meta = Json::object();
  std::map<std::string, Matrix> arrays;

  const Matrix& array(const std::string& name) const;
};

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

/// Writes through a sibling temp file and renames it into place, so readers
/// see either the old or the new file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

void write_json_atomic(const std::filesystem::path& path, const Json& j);
Json read_json(const std::filesystem::path& path);

/// FNV-1a over the canonical dump of `j`, as 16 hex digits.
std::string config_hash(const Json& j);

Json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const Json& j);

/// Encodes an 8-bit RGB raster (row-major, 3 bytes per pixel) as PNG.
std::string encode_png(int width, int height, const std::vector<std::uint8_t>& rgb);

}  // namespace vitscope
