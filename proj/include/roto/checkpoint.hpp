#pragma once
// Binary checkpoints.
//
// Layout: 8 magic bytes, u64 format version, then little-endian u64 / f64
// fields and length-prefixed arrays, then a u32 CRC-32 of everything before it.
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <boost/crc.hpp>

#include "roto/errors.hpp"
#include "roto/gbml.hpp"
#include "roto/homogenizer.hpp"
#include "roto/tensor.hpp"

namespace roto::ckpt {

inline constexpr std::array<char, 8> kMagic{'R', 'O', 'T', 'O', 'C', 'K', 'P', 'T'};
inline constexpr std::uint64_t kVersion = 1;

struct Checkpoint {
  std::string config_json;  // the run configuration, canonical dump
  std::uint64_t step = 0;
  std::vector<Tensor> params;
  gbml::Adam adam;
  std::optional<homog::HomogenizerState> homogenizer;
  std::string data_rng;
  std::string isi_rng;
};

namespace detail {

class Writer {
 public:
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void f64s(std::span<const double> v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void u64s(std::span<const std::uint64_t> v) {
    u64(v.size());
    for (auto x : v) u64(x);
  }
  void tensor(const Tensor& t) {
    u64(t.rank());
    for (std::size_t i = 0; i < t.rank(); ++i) u64(t.dim(i));
    for (double x : t.data()) f64(x);
  }
  void tensors(const std::vector<Tensor>& ts) {
    u64(ts.size());
    for (const auto& t : ts) tensor(t);
  }
  void matrix(const Eigen::MatrixXd& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) f64(m(i, j));
  }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string_view bytes) : b_(bytes) {}

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::size_t count(std::size_t width) {
    const std::uint64_t n = u64();
    if (n > (b_.size() - pos_) / width) throw FormatError("checkpoint: truncated or corrupt length field");
    return static_cast<std::size_t>(n);
  }
  std::string str() {
    const std::size_t n = count(1);
    std::string s(b_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<double> f64s() {
    std::vector<double> v(count(8));
    for (auto& x : v) x = f64();
    return v;
  }
  std::vector<std::uint64_t> u64s() {
    std::vector<std::uint64_t> v(count(8));
    for (auto& x : v) x = u64();
    return v;
  }
  Tensor tensor() {
    const std::size_t rank = count(8);
    std::vector<std::size_t> dims(rank);
    std::size_t numel = 1;
    for (auto& d : dims) {
      d = static_cast<std::size_t>(u64());
      if (d != 0 && numel > (b_.size() - pos_) / 8 / d) throw FormatError("checkpoint: truncated or corrupt tensor");
      numel *= d;
    }
    need(numel * 8);
    Tensor t{Shape(std::span<const std::size_t>(dims))};
    for (auto& x : t.data()) x = f64();
    return t;
  }
  std::vector<Tensor> tensors() {
    std::vector<Tensor> ts(count(8));
    for (auto& t : ts) t = tensor();
    return ts;
  }
  Eigen::MatrixXd matrix() {
    const std::uint64_t r = u64(), c = u64();
    if (r != 0 && c > (b_.size() - pos_) / 8 / r) throw FormatError("checkpoint: truncated or corrupt matrix");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = f64();
    return m;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError("checkpoint: truncated");
  }
  std::string_view b_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32(std::string_view bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
  detail::Writer w;
  w.raw(kMagic.data(), kMagic.size());
  w.u64(kVersion);
  w.str(c.config_json);
  w.u64(c.step);
  w.tensors(c.params);
  w.u64(c.adam.t);
  w.f64(c.adam.beta1);
  w.f64(c.adam.beta2);
  w.f64(c.adam.eps);
  w.tensors(c.adam.m);
  w.tensors(c.adam.v);
  w.u64(c.homogenizer ? 1 : 0);
  if (c.homogenizer) {
    const auto& h = *c.homogenizer;
    const auto& k = h.cfg;
    w.u64(k.slots);
    w.u64(k.feature_dim);
    w.f64(k.beta);
    w.f64(k.weight_rate);
    w.f64(k.rotation_rate);
    w.f64(k.omega_min);
    w.u64(k.normalize);
    w.u64(k.reset_per_batch);
    w.f64(k.anchor);
    w.f64s(h.omega);
    w.u64(h.skew.size());
    for (const auto& m : h.skew) w.matrix(m);
    w.u64(h.rotation.size());
    for (const auto& m : h.rotation) w.matrix(m);
    w.f64s(h.anchors);
    w.u64s(h.slot_family);
    std::vector<std::uint64_t> bound(h.slot_bound.begin(), h.slot_bound.end());
    w.u64s(bound);
    w.u64(h.leader_steps);
    w.u64(h.batches);
    w.u64(h.skipped_reweights);
    w.u64(h.skipped_rotations);
  }
  w.str(c.data_rng);
  w.str(c.isi_rng);
  const std::uint32_t crc = detail::crc32(w.bytes());
  for (int i = 0; i < 4; ++i) w.bytes().push_back(static_cast<char>((crc >> (8 * i)) & 0xff));
  return std::move(w.bytes());
}

inline Checkpoint deserialize(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 8 + 4) throw FormatError("checkpoint: truncated (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) throw FormatError("checkpoint: bad magic bytes");
  detail::Reader head(bytes.substr(kMagic.size(), 8));
  const std::uint64_t version = head.u64();
  if (version != kVersion)
    throw VersionError("checkpoint: format version " + std::to_string(version) + ", this build reads version " +
                       std::to_string(kVersion));
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[body.size() + i])) << (8 * i);
  if (detail::crc32(body) != stored) throw ChecksumError("checkpoint: CRC-32 mismatch (file corrupt or truncated)");

  detail::Reader r(body);
  r.take(kMagic.size() + 8);
  Checkpoint c;
  c.config_json = r.str();
  c.step = r.u64();
  c.params = r.tensors();
  c.adam.t = r.u64();
  c.adam.beta1 = r.f64();
  c.adam.beta2 = r.f64();
  c.adam.eps = r.f64();
  c.adam.m = r.tensors();
  c.adam.v = r.tensors();
  if (r.u64()) {
    homog::HomogenizerState h;
    auto& k = h.cfg;
    k.slots = r.u64();
    k.feature_dim = r.u64();
    k.beta = r.f64();
    k.weight_rate = r.f64();
    k.rotation_rate = r.f64();
    k.omega_min = r.f64();
    k.normalize = r.u64() != 0;
    k.reset_per_batch = r.u64() != 0;
    k.anchor = r.f64();
    h.omega = r.f64s();
    h.skew.resize(r.count(16));
    for (auto& m : h.skew) m = r.matrix();
    h.rotation.resize(r.count(16));
    for (auto& m : h.rotation) m = r.matrix();
    h.anchors = r.f64s();
    h.slot_family = r.u64s();
    auto bound = r.u64s();
    h.slot_bound.assign(bound.begin(), bound.end());
    h.leader_steps = r.u64();
    h.batches = r.u64();
    h.skipped_reweights = r.u64();
    h.skipped_rotations = r.u64();
    const std::size_t N = h.omega.size();
    if (k.slots != N || h.skew.size() != N || h.rotation.size() != N || h.anchors.size() != N ||
        h.slot_family.size() != N || h.slot_bound.size() != N)
      throw FormatError("checkpoint: homogenizer arrays disagree on the slot count");
    c.homogenizer = std::move(h);
  }
  c.data_rng = r.str();
  c.isi_rng = r.str();
  if (!r.done()) throw FormatError("checkpoint: trailing bytes before the checksum");
  return c;
}

inline void save(const Checkpoint& c, const std::string& path) {
  const std::string bytes = serialize(c);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("checkpoint: cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("checkpoint: write to '" + path + "' failed");
}

inline Checkpoint load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

/// Same bytes on disk.
inline bool identical(const Checkpoint& a, const Checkpoint& b) { return serialize(a) == serialize(b); }

}  // namespace roto::ckpt
