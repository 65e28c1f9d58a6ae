#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "gnn3d/error.hpp"
#include "gnn3d/tensor.hpp"

namespace gnn3d {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace bytes {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& data) : data_(data) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size())
      throw FormatError("unexpected end of data", static_cast<long long>(pos_));
  }
  const std::vector<std::uint8_t>& data_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::data, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::data, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
}

}  // namespace bytes

inline constexpr char kCheckpointMagic[4] = {'G', 'D', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout (all little-endian):
///   "GDCK" | u32 version | u32 metadata length | metadata bytes
///   | u32 parameter count | parameters | u32 buffer count | buffers
/// where each tensor record is
///   u32 name length | name | u32 rank | u64 dims[rank] | f64 values.
/// Parameters are the trainable entries, buffers the batch-norm running stats,
/// each in store insertion order.
struct Checkpoint {
  std::string metadata;
  ParamStore store;
};

namespace detail {

inline void put_tensor(std::vector<std::uint8_t>& out, const std::string& name, const Tensor& t) {
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) bytes::put<std::uint64_t>(out, d);
  for (double v : t.storage()) bytes::put<double>(out, v);
}

inline std::pair<std::string, Tensor> get_tensor(bytes::Reader& in) {
  const auto name_len = in.get<std::uint32_t>();
  std::string name = in.get_string(name_len);
  const auto rank = in.get<std::uint32_t>();
  if (rank == 0 || rank > 8) throw FormatError("bad tensor rank for " + name, static_cast<long long>(in.position()));
  Shape shape(rank);
  std::size_t count = 1;
  for (auto& d : shape) {
    d = static_cast<std::size_t>(in.get<std::uint64_t>());
    if (d == 0 || d > (std::size_t{1} << 32))
      throw FormatError("bad dimension for " + name, static_cast<long long>(in.position()));
    count *= d;
  }
  std::vector<double> values(count);
  for (auto& v : values) v = in.get<double>();
  return {std::move(name), Tensor(std::move(shape), std::move(values))};
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const std::string& metadata, const ParamStore& store) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  bytes::put<std::uint32_t>(out, kCheckpointVersion);
  bytes::put<std::uint32_t>(out, static_cast<std::uint32_t>(metadata.size()));
  out.insert(out.end(), metadata.begin(), metadata.end());
  for (bool trainable : {true, false}) {
    std::uint32_t n = 0;
    for (const auto& e : store.entries()) n += e.trainable == trainable;
    bytes::put<std::uint32_t>(out, n);
    for (const auto& e : store.entries())
      if (e.trainable == trainable) detail::put_tensor(out, e.name, e.value);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& data) {
  if (data.size() < 4 || std::memcmp(data.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("not a checkpoint (bad magic)", 0);
  bytes::Reader in(data);
  in.get_string(4);
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  Checkpoint ck;
  ck.metadata = in.get_string(in.get<std::uint32_t>());
  for (bool trainable : {true, false}) {
    const auto n = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      auto [name, t] = detail::get_tensor(in);
      ck.store.add(name, std::move(t), trainable);
    }
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint", static_cast<long long>(in.position()));
  return ck;
}

/// Copy checkpoint values into an already-initialized store. Names, shapes and
/// trainability must agree exactly.
inline void load_into(const ParamStore& source, ParamStore& target) {
  if (source.entries().size() != target.entries().size())
    throw Error(ErrorKind::data, "checkpoint holds " + std::to_string(source.entries().size()) +
                                     " tensors, model expects " + std::to_string(target.entries().size()));
  for (const auto& e : source.entries()) {
    if (!target.contains(e.name)) throw Error(ErrorKind::data, "checkpoint tensor " + e.name + " unknown to model");
    auto& t = target.get(e.name);
    if (t.value.shape() != e.value.shape() || t.trainable != e.trainable)
      throw Error(ErrorKind::data, "checkpoint tensor " + e.name + " has shape " + shape_str(e.value.shape()) +
                                       ", model expects " + shape_str(t.value.shape()));
    t.value = e.value;
  }
}

}  // namespace gnn3d
