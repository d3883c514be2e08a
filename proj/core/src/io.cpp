#include "vitscope/io.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vitscope {
namespace {

constexpr std::array<char, 8> kMagic{'V', 'S', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "container format assumes a little-endian host");

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw InputError("container truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

void put_be32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

void put_png_chunk(std::string& out, const char* type, const std::string& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  put_be32(out, static_cast<std::uint32_t>(
                    crc32(0L, reinterpret_cast<const Bytef*>(body.data()),
                          static_cast<uInt>(body.size()))));
}

}  // namespace

const Matrix& Container::array(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw InputError("container (" + kind + ") has no array '" + name + "'");
  return it->second;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  Json meta = c.meta;
  meta["kind"] = c.kind;
  Json arrays = Json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : c.arrays) {
    arrays.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
  }
  meta["arrays"] = arrays;
  const std::string meta_bytes = meta.dump();

  std::string out(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, Container::kFormatVersion);
  put<std::uint64_t>(out, meta_bytes.size());
  out += meta_bytes;
  for (const auto& [name, m] : c.arrays) {
    out.append(reinterpret_cast<const char*>(m.data()), m.size() * sizeof(double));
  }
  write_file_atomic(path, out);
}

Container read_container(const std::filesystem::path& path) {
  const std::string in = read_file(path);
  if (in.size() < kMagic.size() || std::memcmp(in.data(), kMagic.data(), kMagic.size()) != 0) {
    throw InputError(path.string() + ": not a vitscope container");
  }
  std::size_t pos = kMagic.size();
  const auto version = take<std::uint32_t>(in, pos);
  if (version != Container::kFormatVersion) {
    throw InputError(path.string() + ": unsupported container version " + std::to_string(version));
  }
  const auto meta_len = take<std::uint64_t>(in, pos);
  if (pos + meta_len > in.size()) throw InputError(path.string() + ": truncated metadata");
  Container c;
  c.meta = Json::parse(in.substr(pos, meta_len));
  pos += meta_len;
  c.kind = c.meta.value("kind", "");
  const std::size_t data_start = pos;
  for (const auto& a : c.meta.at("arrays")) {
    const auto rows = a.at("rows").get<Eigen::Index>();
    const auto cols = a.at("cols").get<Eigen::Index>();
    const auto off = a.at("offset").get<std::uint64_t>();
    const std::size_t bytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
    if (data_start + off + bytes > in.size()) throw InputError(path.string() + ": truncated array data");
    Matrix m(rows, cols);
    std::memcpy(m.data(), in.data() + data_start + off, bytes);
    c.arrays.emplace(a.at("name").get<std::string>(), std::move(m));
  }
  c.meta.erase("arrays");
  c.meta.erase("kind");
  return c;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw NotFoundError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_json_atomic(const std::filesystem::path& path, const Json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

Json read_json(const std::filesystem::path& path) { return Json::parse(read_file(path)); }

std::string config_hash(const Json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    rows.push_back(std::vector<double>(m.row(r).data(), m.row(r).data() + m.cols()));
  }
  return rows;
}

Matrix matrix_from_json(const Json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j[r].size()) != cols) throw InputError("ragged matrix in JSON");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

std::string encode_png(int width, int height, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3) {
    throw InputError("encode_png: pixel buffer size mismatch");
  }
  std::string raw;
  raw.reserve(static_cast<std::size_t>(height) * (width * 3 + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    raw.append(reinterpret_cast<const char*>(rgb.data()) + static_cast<std::size_t>(y) * width * 3,
               static_cast<std::size_t>(width) * 3);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::string z(zlen, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK) {
    throw Error("zlib compression failed");
  }
  z.resize(zlen);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(width));
  put_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit, truecolor
  put_png_chunk(out, "IHDR", ihdr);
  put_png_chunk(out, "IDAT", z);
  put_png_chunk(out, "IEND", "");
  return out;
}

}  // namespace vitscope
