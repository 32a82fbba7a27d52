// SPDX-License-Identifier: Apache-2.0
#include "metrolab/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "metrolab/errors.hpp"

namespace metrolab {
namespace {

constexpr char kMagic[8] = {'M', 'E', 'T', 'R', 'O', 'L', 'A', 'B'};

template <class T>
void put(std::ostream& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(bytes, sizeof(T));
}

template <class T>
T get(std::istream& in, const std::string& what) {
  char bytes[sizeof(T)];
  if (!in.read(bytes, sizeof(T))) throw CheckpointError("truncated checkpoint while reading " + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in, const std::string& what) {
  const auto n = get<std::uint64_t>(in, what);
  if (n > (std::uint64_t{1} << 32)) throw CheckpointError("implausible length for " + what);
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n))) {
    throw CheckpointError("truncated checkpoint while reading " + what);
  }
  return s;
}

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, checkpoint.version);
    put_string(out, checkpoint.config_text);
    put<std::uint64_t>(out, checkpoint.step);
    put_string(out, checkpoint.rng_state);
    put<std::uint64_t>(out, checkpoint.tensors.size());
    for (const auto& t : checkpoint.tensors) {
      put_string(out, t.name);
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
      for (auto e : t.shape) put<std::uint64_t>(out, e);
      put<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
      if (t.dtype == DType::f32) {
        for (double v : t.values) put<float>(out, static_cast<float>(v));
      } else {
        for (double v : t.values) put<double>(out, v);
      }
    }
    if (!out) throw CheckpointError("failed while writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  Checkpoint c;
  c.version = get<std::uint32_t>(in, "version");
  if (c.version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(c.version));
  }
  c.config_text = get_string(in, "config");
  c.step = get<std::uint64_t>(in, "step");
  c.rng_state = get_string(in, "rng state");
  const auto count = get<std::uint64_t>(in, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray t;
    t.name = get_string(in, "tensor name");
    const auto rank = get<std::uint32_t>(in, t.name + " rank");
    std::size_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(in, t.name + " extent")));
      numel *= t.shape.back();
    }
    const auto tag = get<std::uint8_t>(in, t.name + " dtype");
    if (tag != static_cast<std::uint8_t>(DType::f32) && tag != static_cast<std::uint8_t>(DType::f64)) {
      throw CheckpointError("unknown dtype tag for " + t.name);
    }
    t.dtype = static_cast<DType>(tag);
    t.values.resize(numel);
    for (auto& v : t.values) {
      v = t.dtype == DType::f32 ? static_cast<double>(get<float>(in, t.name)) : get<double>(in, t.name);
    }
    c.tensors.push_back(std::move(t));
  }
  return c;
}

}  // namespace metrolab
