#pragma once

// Flat binary parameter container.
//
//   "FXAT"  u32 version
//   repeated until end of file:
//     u64 name length, UTF-8 name bytes
//     u64 rank, rank x u64 dims
//     numel x f64 values
//
// All integers and floats are little-endian regardless of host order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "fixattn/error.hpp"
#include "fixattn/tensor.hpp"

namespace fixattn {

inline constexpr char kCheckpointMagic[4] = {'F', 'X', 'A', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const CheckpointRecord&) const = default;
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int k = 0; k < bytes; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xffu));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::uint64_t get_le(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int k = 0; k < width; ++k) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + k])) << (8 * k);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string get_bytes(std::size_t count) {
    need(count);
    auto s = bytes_.substr(pos_, count);
    pos_ += count;
    return s;
  }

 private:
  void need(std::size_t count) const {
    if (bytes_.size() - pos_ < count) throw CorpusError("truncated checkpoint");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<CheckpointRecord>& records) {
  std::string out(kCheckpointMagic, 4);
  detail::put_le(out, kCheckpointVersion, 4);
  for (const auto& r : records) {
    if (numel(r.shape) != r.values.size()) {
      throw ShapeError("checkpoint record '" + r.name + "' has shape " + to_string(r.shape) +
                       " but " + std::to_string(r.values.size()) + " values");
    }
    detail::put_le(out, r.name.size(), 8);
    out += r.name;
    detail::put_le(out, r.shape.size(), 8);
    for (auto d : r.shape) detail::put_le(out, d, 8);
    for (double v : r.values) detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  return out;
}

inline std::vector<CheckpointRecord> decode_checkpoint(const std::string& bytes) {
  detail::ByteReader in(bytes);
  if (in.get_bytes(4) != std::string(kCheckpointMagic, 4)) {
    throw CorpusError("not a checkpoint file (bad magic)");
  }
  const auto version = in.get_le(4);
  if (version != kCheckpointVersion) {
    throw CorpusError("unsupported checkpoint version " + std::to_string(version));
  }
  std::vector<CheckpointRecord> records;
  while (!in.done()) {
    CheckpointRecord r;
    r.name = in.get_bytes(in.get_le(8));
    r.shape.resize(in.get_le(8));
    for (auto& d : r.shape) d = in.get_le(8);
    r.values.resize(numel(r.shape));
    for (auto& v : r.values) v = std::bit_cast<double>(in.get_le(8));
    records.push_back(std::move(r));
  }
  return records;
}

template <class T>
std::vector<CheckpointRecord> to_records(const ParameterList<T>& params) {
  std::vector<CheckpointRecord> records;
  records.reserve(params.size());
  for (const auto& p : params) {
    const auto data = p.tensor.data();
    records.push_back({p.name, p.tensor.shape(), std::vector<double>(data.begin(), data.end())});
  }
  return records;
}

// Copies record values into parameters with the same names and shapes; the
// two sets must match exactly.
template <class T>
void assign_records(ParameterList<T>& params, const std::vector<CheckpointRecord>& records) {
  if (records.size() != params.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(records.size()) +
                      " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    const auto& r = records[k];
    if (r.name != p.name || r.shape != p.tensor.shape()) {
      throw ConfigError("checkpoint tensor '" + r.name + "' " + to_string(r.shape) +
                        " does not match model tensor '" + p.name + "' " +
                        to_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(r.values[i]);
  }
}

inline void write_checkpoint(const std::string& path, const std::vector<CheckpointRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("cannot write checkpoint '" + path + "'");
  const auto bytes = encode_checkpoint(records);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::vector<CheckpointRecord> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot read checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace fixattn
