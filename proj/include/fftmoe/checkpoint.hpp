// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fftmoe/error.hpp"
#include "fftmoe/tensor.hpp"

namespace fftmoe {

// Checkpoint layout:
//
//   fftmoe-checkpoint 1
//   tensors <count>
//   <name> <offset> <nbytes> <ndim> <dim0> ... <dimN-1>     (one line per tensor)
//   end
//   <payload>
//
// The payload starts right after the "end\n" line. Each tensor occupies
// nbytes = 8 * numel bytes of little-endian IEEE-754 doubles in row-major
// order at byte `offset` from the payload start. Names contain no whitespace.

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffULL) << (8 * (7 - i));
    return r;
  }
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ostringstream header;
  header << "fftmoe-checkpoint 1\n";
  header << "tensors " << tensors.size() << "\n";
  std::uint64_t offset = 0;
  for (const NamedTensor& t : tensors) {
    if (t.name.empty() || t.name.find_first_of(" \t\n") != std::string::npos) {
      throw UsageError("checkpoint tensor name '" + t.name + "' must be non-empty without whitespace");
    }
    const std::uint64_t nbytes = 8 * t.tensor.numel();
    header << t.name << ' ' << offset << ' ' << nbytes << ' ' << t.tensor.dim();
    for (std::size_t d : t.tensor.shape()) header << ' ' << d;
    header << '\n';
    offset += nbytes;
  }
  header << "end\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const NamedTensor& t : tensors) {
    for (double v : t.tensor.values()) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, &v, sizeof(bits));
      bits = detail::to_little_endian(bits);
      out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
    }
  }
  if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  auto fail = [&path](const std::string& why) { return InputError("checkpoint '" + path + "': " + why); };

  std::string line;
  if (!std::getline(in, line) || line != "fftmoe-checkpoint 1") throw fail("bad magic line");
  std::size_t count = 0;
  {
    if (!std::getline(in, line)) throw fail("missing tensor count");
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key >> count) || key != "tensors") throw fail("malformed tensor count line");
  }
  struct Entry {
    std::string name;
    std::uint64_t offset, nbytes;
    Shape shape;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw fail("truncated header");
    std::istringstream ls(line);
    Entry e;
    std::size_t ndim = 0;
    if (!(ls >> e.name >> e.offset >> e.nbytes >> ndim)) throw fail("malformed entry '" + line + "'");
    e.shape.resize(ndim);
    for (std::size_t& d : e.shape) {
      if (!(ls >> d) || d == 0) throw fail("bad shape in entry '" + e.name + "'");
    }
    if (e.nbytes != 8 * shape_numel(e.shape)) throw fail("byte count disagrees with shape for '" + e.name + "'");
    entries.push_back(std::move(e));
  }
  if (!std::getline(in, line) || line != "end") throw fail("missing end marker");
  const std::streampos payload = in.tellg();

  std::vector<NamedTensor> out;
  for (const Entry& e : entries) {
    in.seekg(payload + static_cast<std::streamoff>(e.offset));
    std::vector<double> values(e.nbytes / 8);
    for (double& v : values) {
      std::uint64_t bits = 0;
      if (!in.read(reinterpret_cast<char*>(&bits), sizeof(bits))) throw fail("payload truncated in '" + e.name + "'");
      bits = detail::to_little_endian(bits);
      std::memcpy(&v, &bits, sizeof(v));
    }
    out.push_back({e.name, Tensor::from(e.shape, std::move(values))});
  }
  return out;
}

}  // namespace fftmoe
