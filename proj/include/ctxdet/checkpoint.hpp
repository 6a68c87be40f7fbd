#pragma once

// Named f64 array container.
//
// Layout: a text manifest followed by a little-endian payload.
//
//   ctxdet-checkpoint 1
//   entries <count>
//   <name> <rank> <d0> ... <dk> <byte offset> <byte length>
//   ...
//   payload <total bytes>
//   <raw little-endian IEEE-754 doubles>
//
// Offsets are relative to the start of the payload.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ctxdet/tensor.hpp"

namespace ctxdet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

namespace detail {

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
  return r;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& entries) {
  out << "ctxdet-checkpoint 1\n";
  out << "entries " << entries.size() << "\n";
  std::size_t offset = 0;
  for (const auto& e : entries) {
    if (e.name.empty() || e.name.find_first_of(" \t\n") != std::string::npos)
      throw CheckpointError("checkpoint entry names must be non-empty and contain no whitespace");
    const std::size_t bytes = e.value.size() * sizeof(double);
    out << e.name << ' ' << e.value.rank();
    for (std::size_t d : e.value.shape()) out << ' ' << d;
    out << ' ' << offset << ' ' << bytes << "\n";
    offset += bytes;
  }
  out << "payload " << offset << "\n";
  for (const auto& e : entries)
    for (double v : e.value.data()) {
      const std::uint64_t le = detail::to_le(std::bit_cast<std::uint64_t>(v));
      char buf[8];
      std::memcpy(buf, &le, 8);
      out.write(buf, 8);
    }
  if (!out) throw CheckpointError("failed while writing checkpoint");
}

inline std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(in, line)) throw CheckpointError(std::string("checkpoint truncated before ") + what);
    return std::istringstream(line);
  };
  {
    auto ls = next_line("header");
    std::string magic;
    int version = 0;
    ls >> magic >> version;
    if (magic != "ctxdet-checkpoint" || version != 1)
      throw CheckpointError("not a ctxdet checkpoint (bad header '" + line + "')");
  }
  std::size_t count = 0;
  {
    auto ls = next_line("entry count");
    std::string key;
    if (!(ls >> key >> count) || key != "entries") throw CheckpointError("bad entry-count line");
  }
  struct Meta {
    std::string name;
    Shape shape;
    std::size_t offset, bytes;
  };
  std::vector<Meta> metas;
  for (std::size_t i = 0; i < count; ++i) {
    auto ls = next_line("manifest end");
    Meta m;
    std::size_t rank = 0;
    if (!(ls >> m.name >> rank)) throw CheckpointError("bad manifest line '" + line + "'");
    m.shape.resize(rank);
    for (auto& d : m.shape)
      if (!(ls >> d)) throw CheckpointError("bad shape in manifest line '" + line + "'");
    if (!(ls >> m.offset >> m.bytes)) throw CheckpointError("bad offset in manifest line '" + line + "'");
    if (m.bytes != shape_numel(m.shape) * sizeof(double))
      throw CheckpointError("manifest size mismatch for '" + m.name + "'");
    metas.push_back(std::move(m));
  }
  std::size_t total = 0;
  {
    auto ls = next_line("payload");
    std::string key;
    if (!(ls >> key >> total) || key != "payload") throw CheckpointError("bad payload line");
  }
  std::vector<char> payload(total);
  in.read(payload.data(), static_cast<std::streamsize>(total));
  if (static_cast<std::size_t>(in.gcount()) != total) throw CheckpointError("checkpoint payload truncated");

  std::vector<NamedTensor> out;
  for (const auto& m : metas) {
    if (m.offset + m.bytes > total) throw CheckpointError("entry '" + m.name + "' exceeds payload");
    std::vector<double> data(m.bytes / 8);
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::uint64_t le;
      std::memcpy(&le, payload.data() + m.offset + 8 * i, 8);
      data[i] = std::bit_cast<double>(detail::to_le(le));
    }
    out.push_back({m.name, Tensor(m.shape, std::move(data))});
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& entries) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path + "' for writing");
  write_checkpoint(f, entries);
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path + "'");
  return read_checkpoint(f);
}

}  // namespace ctxdet
