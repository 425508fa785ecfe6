#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dap/common.hpp"

namespace dap {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Raw grid container: 16-byte header, then row-major little-endian payload.
//   bytes 0..3   magic "DAPG"
//   byte  4      format version (1)
//   byte  5      dtype: 1 = float32, 2 = uint8
//   bytes 6..7   reserved (0)
//   bytes 8..11  rows (uint32 LE)
//   bytes 12..15 cols (uint32 LE)
namespace gridfmt {
constexpr char kMagic[4] = {'D', 'A', 'P', 'G'};
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kF32 = 1;
constexpr std::uint8_t kU8 = 2;
}  // namespace gridfmt

inline void write_u32le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t read_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

// Writes via a temp file + rename so partially written outputs never appear.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline std::string encode_grid_header(std::uint8_t dtype, std::uint32_t rows, std::uint32_t cols) {
  std::string out;
  out.reserve(16);
  out.append(gridfmt::kMagic, 4);
  out.push_back(static_cast<char>(gridfmt::kVersion));
  out.push_back(static_cast<char>(dtype));
  out.push_back(0);
  out.push_back(0);
  write_u32le(out, rows);
  write_u32le(out, cols);
  return out;
}

inline std::string encode_grid(const MatF& grid) {
  std::string out = encode_grid_header(gridfmt::kF32, static_cast<std::uint32_t>(grid.rows()),
                                       static_cast<std::uint32_t>(grid.cols()));
  const auto n = static_cast<std::size_t>(grid.size()) * sizeof(float);
  out.append(reinterpret_cast<const char*>(grid.data()), n);
  return out;
}

inline std::string encode_grid(const MaskGrid& grid) {
  std::string out = encode_grid_header(gridfmt::kU8, static_cast<std::uint32_t>(grid.rows()),
                                       static_cast<std::uint32_t>(grid.cols()));
  out.append(reinterpret_cast<const char*>(grid.data()), static_cast<std::size_t>(grid.size()));
  return out;
}

inline void save_grid(const fs::path& path, const MatF& grid) {
  write_file_atomic(path, encode_grid(grid));
}
inline void save_grid(const fs::path& path, const MaskGrid& grid) {
  write_file_atomic(path, encode_grid(grid));
}

inline std::uint8_t decode_grid_header(const std::string& bytes, std::uint32_t& rows,
                                       std::uint32_t& cols) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), gridfmt::kMagic, 4) != 0)
    throw IoError("not a DAPG grid file");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (p[4] != gridfmt::kVersion) throw IoError("unsupported DAPG version");
  rows = read_u32le(p + 8);
  cols = read_u32le(p + 12);
  return p[5];
}

inline MatF load_grid_f32(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::uint32_t rows = 0, cols = 0;
  if (decode_grid_header(bytes, rows, cols) != gridfmt::kF32)
    throw IoError(path.string() + ": expected float32 grid");
  const std::size_t need = 16 + static_cast<std::size_t>(rows) * cols * sizeof(float);
  if (bytes.size() != need) throw IoError(path.string() + ": truncated grid payload");
  MatF grid(rows, cols);
  std::memcpy(grid.data(), bytes.data() + 16, need - 16);
  return grid;
}

inline MaskGrid load_grid_u8(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::uint32_t rows = 0, cols = 0;
  if (decode_grid_header(bytes, rows, cols) != gridfmt::kU8)
    throw IoError(path.string() + ": expected uint8 grid");
  const std::size_t need = 16 + static_cast<std::size_t>(rows) * cols;
  if (bytes.size() != need) throw IoError(path.string() + ": truncated grid payload");
  MaskGrid grid(rows, cols);
  std::memcpy(grid.data(), bytes.data() + 16, need - 16);
  return grid;
}

inline void save_json(const fs::path& path, const json& j) {
  write_file_atomic(path, j.dump(2) + "\n");
}

inline json load_json(const fs::path& path) {
  return json::parse(read_file(path));
}

// Checkpoint container: "DAPC", uint32 LE JSON header length, JSON header
// (config plus tensor directory), then the float32 tensor payloads in
// directory order.
namespace ckptfmt {
constexpr char kMagic[4] = {'D', 'A', 'P', 'C'};
}

struct NamedTensor {
  std::string name;
  MatF data;
};

inline void save_checkpoint(const fs::path& path, const json& config,
                            const std::vector<NamedTensor>& tensors) {
  json dir = json::array();
  for (const auto& t : tensors)
    dir.push_back({{"name", t.name}, {"rows", t.data.rows()}, {"cols", t.data.cols()}});
  json header = {{"format_version", 1}, {"config", config}, {"tensors", dir}};
  const std::string hs = header.dump();

  std::string out;
  out.append(ckptfmt::kMagic, 4);
  write_u32le(out, static_cast<std::uint32_t>(hs.size()));
  out += hs;
  for (const auto& t : tensors)
    out.append(reinterpret_cast<const char*>(t.data.data()),
               static_cast<std::size_t>(t.data.size()) * sizeof(float));
  write_file_atomic(path, out);
}

inline json load_checkpoint(const fs::path& path, std::vector<NamedTensor>& tensors) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 8 || std::memcmp(bytes.data(), ckptfmt::kMagic, 4) != 0)
    throw IoError(path.string() + ": not a DAPC checkpoint");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t hlen = read_u32le(p + 4);
  if (bytes.size() < 8 + hlen) throw IoError(path.string() + ": truncated header");
  json header = json::parse(bytes.substr(8, hlen));
  std::size_t off = 8 + hlen;
  tensors.clear();
  for (const auto& d : header.at("tensors")) {
    NamedTensor t;
    t.name = d.at("name").get<std::string>();
    const auto rows = d.at("rows").get<Eigen::Index>();
    const auto cols = d.at("cols").get<Eigen::Index>();
    const std::size_t n = static_cast<std::size_t>(rows) * cols * sizeof(float);
    if (off + n > bytes.size()) throw IoError(path.string() + ": truncated tensor payload");
    t.data.resize(rows, cols);
    std::memcpy(t.data.data(), bytes.data() + off, n);
    off += n;
    tensors.push_back(std::move(t));
  }
  if (off != bytes.size()) throw IoError(path.string() + ": trailing bytes after tensors");
  return header.at("config");
}

}  // namespace dap
