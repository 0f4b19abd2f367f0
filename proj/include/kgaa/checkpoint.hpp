#pragma once

// Parameter checkpoint container.
//
// Layout (all integers and floats little-endian):
//   magic   "KGAACKPT"                      8 bytes
//   version u32                             currently 1
//   count   u32                             number of entries
//   entry*  { u32 name_len, name bytes,
//             u32 rank, u64 dims[rank],
//             f32 values[prod(dims)] }

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "kgaa/errors.hpp"
#include "kgaa/nn.hpp"
#include "kgaa/tensor.hpp"

namespace kgaa {

inline constexpr std::array<char, 8> kCheckpointMagic = {'K', 'G', 'A', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string path;
  Shape shape;
  std::vector<float> values;
};

class Checkpoint {
 public:
  void put(std::string path, Shape shape, std::vector<float> values) {
    if (values.size() != shape_numel(shape)) {
      throw DimensionError("checkpoint entry " + path + ": payload does not fill " +
                           shape_str(shape));
    }
    auto it = index_.find(path);
    if (it != index_.end()) {
      entries_[it->second] = {std::move(path), std::move(shape), std::move(values)};
      return;
    }
    index_.emplace(path, entries_.size());
    entries_.push_back({std::move(path), std::move(shape), std::move(values)});
  }

  template <class T>
  void put(std::string path, const Tensor<T>& t) {
    std::vector<float> v(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) v[i] = static_cast<float>(t[i]);
    put(std::move(path), t.shape(), std::move(v));
  }

  bool contains(const std::string& path) const { return index_.count(path) != 0; }

  const CheckpointEntry& at(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw LookupError("checkpoint has no entry " + path);
    return entries_[it->second];
  }

  template <class T>
  Tensor<T> tensor(const std::string& path) const {
    const auto& e = at(path);
    std::vector<T> v(e.values.begin(), e.values.end());
    return Tensor<T>(e.shape, std::move(v));
  }

  const std::vector<CheckpointEntry>& entries() const { return entries_; }

  std::vector<char> serialize() const {
    std::vector<char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      put_u32(out, static_cast<std::uint32_t>(e.path.size()));
      out.insert(out.end(), e.path.begin(), e.path.end());
      put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
      for (auto d : e.shape) put_u64(out, d);
      for (float f : e.values) put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
    return out;
  }

  static Checkpoint deserialize(const std::vector<char>& bytes, const std::string& source) {
    Reader r{bytes, 0, source};
    if (bytes.size() < 8 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
      throw DataError(source + ": not a checkpoint file (bad magic)");
    }
    r.pos = 8;
    const auto version = r.u32();
    if (version != kCheckpointVersion) {
      throw DataError(source + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ck;
    const auto count = r.u32();
    for (std::uint32_t k = 0; k < count; ++k) {
      const auto len = r.u32();
      r.need(len);
      std::string name(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos),
                       bytes.begin() + static_cast<std::ptrdiff_t>(r.pos + len));
      r.pos += len;
      const auto rank = r.u32();
      Shape shape(rank);
      for (auto& d : shape) d = r.u64();
      std::vector<float> values(shape_numel(shape));
      for (auto& f : values) f = std::bit_cast<float>(r.u32());
      ck.put(std::move(name), std::move(shape), std::move(values));
    }
    if (r.pos != bytes.size()) throw DataError(source + ": trailing bytes after checkpoint");
    return ck;
  }

  void save(const std::filesystem::path& file) const {
    const auto bytes = serialize();
    std::ofstream os(file, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write checkpoint " + file.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }

  static Checkpoint load(const std::filesystem::path& file) {
    std::ifstream is(file, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + file.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize(bytes, file.string());
  }

 private:
  static void put_u32(std::vector<char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  static void put_u64(std::vector<char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }

  struct Reader {
    const std::vector<char>& bytes;
    std::size_t pos;
    const std::string& source;

    void need(std::size_t n) const {
      if (pos + n > bytes.size()) throw DataError(source + ": truncated checkpoint");
    }
    std::uint32_t u32() {
      need(4);
      std::uint32_t v = 0;
      for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
      pos += 4;
      return v;
    }
    std::uint64_t u64() {
      need(8);
      std::uint64_t v = 0;
      for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
      pos += 8;
      return v;
    }
  };

  std::vector<CheckpointEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
void store_to_checkpoint(const ParameterStore<T>& store, Checkpoint& ck) {
  for (const auto& p : store) ck.put(p.path, p.value);
}

// Copies every store parameter from the checkpoint; shapes must agree exactly.
template <class T>
void load_store(ParameterStore<T>& store, const Checkpoint& ck) {
  for (auto& p : store) {
    if (!ck.contains(p.path)) {
      throw DataError("checkpoint is missing parameter " + p.path +
                      " (was it written for a different configuration?)");
    }
    const auto& e = ck.at(p.path);
    if (e.shape != p.value.shape()) {
      throw DimensionError("parameter " + p.path + ": checkpoint shape " + shape_str(e.shape) +
                           " does not match configured shape " + shape_str(p.value.shape()));
    }
    for (std::size_t i = 0; i < e.values.size(); ++i) p.value[i] = static_cast<T>(e.values[i]);
  }
}

}  // namespace kgaa
