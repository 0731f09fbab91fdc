// SPDX-License-Identifier: Apache-2.0
//
// Framed binary checkpoint:
//
//   "MOCE1" | u32 version
//   str config_json | str task_table
//   u64 n_params | n x (str name | u32 rank | u64 dims[rank] | f64 values)
//   u64 opt_step | f64 opt_lr | n x (f64 m[] | f64 v[])
//   u64 seed | u64 epochs_done
//   u64 fnv1a(all preceding bytes)
//
// Integers and doubles are little-endian; str is u64 length then bytes.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "moce/config.hpp"
#include "moce/tasks.hpp"
#include "moce/train.hpp"

namespace moce {

class CheckpointError : public Error {
 public:
  using Error::Error;
};

inline constexpr char kCheckpointMagic[5] = {'M', 'O', 'C', 'E', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.append(c, n);
  }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  const std::string& buffer() const noexcept { return buf_; }

 private:
  template <class U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::size_t position() const noexcept { return pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) throw CheckpointError("checkpoint is truncated");
  }
  template <class U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <class Real>
std::string serialize_checkpoint(const RunConfig& cfg, const TaskTable& tasks,
                                 const train::Trainer<Real>& trainer) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(dump_run_config(cfg));
  std::ostringstream tt;
  write_task_embeddings(tt, tasks);
  w.str(tt.str());
  const auto& params = trainer.model().params().params();
  w.u64(params.size());
  for (const auto& [name, t] : params) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (Real v : t.values()) w.f64(static_cast<double>(v));
  }
  const auto& opt = trainer.optimizer();
  w.u64(opt.step);
  w.f64(opt.lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::size_t n = params[k].second.numel();
    const bool have = k < opt.m.size() && opt.m[k].size() == n;
    for (std::size_t i = 0; i < n; ++i) w.f64(have ? opt.m[k][i] : 0.0);
    for (std::size_t i = 0; i < n; ++i) w.f64(have ? opt.v[k][i] : 0.0);
  }
  w.u64(trainer.config().seed);
  w.u64(trainer.epochs_done());
  w.u64(fnv1a(w.buffer()));
  return w.buffer();
}

namespace detail {

/// Checks magic, checksum and version; returns a reader positioned after the
/// version field.
inline ByteReader open_checkpoint(std::string_view data) {
  if (data.size() < sizeof kCheckpointMagic + 4 + 8)
    throw CheckpointError("checkpoint is truncated");
  if (std::memcmp(data.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  const std::string_view body = data.substr(0, data.size() - 8);
  ByteReader tail(data.substr(data.size() - 8));
  if (tail.u64() != fnv1a(body)) throw CheckpointError("checkpoint checksum mismatch");
  ByteReader r(body);
  char magic[sizeof kCheckpointMagic];
  r.bytes(magic, sizeof magic);
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  return r;
}

}  // namespace detail

/// The run configuration stored in a checkpoint (selects the precision to
/// load with).
inline RunConfig checkpoint_config(std::string_view data) {
  auto r = detail::open_checkpoint(data);
  return parse_run_config(r.str());
}

template <class Real>
struct LoadedCheckpoint {
  RunConfig config;
  TaskTable tasks;
  train::Trainer<Real> trainer;
};

/// Verifies magic, version and checksum, then rebuilds the trainer with the
/// stored parameters and optimizer state.
template <class Real>
LoadedCheckpoint<Real> deserialize_checkpoint(std::string_view data) {
  auto r = detail::open_checkpoint(data);
  const std::size_t body_size = data.size() - 8;
  RunConfig cfg = parse_run_config(r.str());
  std::istringstream tt(r.str());
  TaskTable tasks = read_task_embeddings(tt, "<checkpoint>");
  LoadedCheckpoint<Real> out{cfg, std::move(tasks), train::Trainer<Real>(cfg.train)};
  auto& params = out.trainer.model().params().params();
  if (r.u64() != params.size()) throw CheckpointError("checkpoint parameter count mismatch");
  for (auto& [name, t] : params) {
    if (r.str() != name) throw CheckpointError("checkpoint parameter order mismatch at " + name);
    const auto rank = r.u32();
    ad::Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (shape != t.shape()) throw CheckpointError("checkpoint shape mismatch for " + name);
    for (auto& v : t.mutable_values()) v = static_cast<Real>(r.f64());
  }
  auto& opt = out.trainer.optimizer();
  opt.step = r.u64();
  opt.lr = r.f64();
  opt.m.assign(params.size(), {});
  opt.v.assign(params.size(), {});
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::size_t n = params[k].second.numel();
    opt.m[k].resize(n);
    opt.v[k].resize(n);
    for (auto& x : opt.m[k]) x = r.f64();
    for (auto& x : opt.v[k]) x = r.f64();
  }
  if (r.u64() != cfg.train.seed) throw CheckpointError("checkpoint seed mismatch");
  out.trainer.set_epochs_done(r.u64());
  if (r.position() != body_size) throw CheckpointError("checkpoint has trailing bytes");
  return out;
}

template <class Real>
void save_checkpoint(const std::string& path, const RunConfig& cfg, const TaskTable& tasks,
                     const train::Trainer<Real>& trainer) {
  const std::string bytes = serialize_checkpoint(cfg, tasks, trainer);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path);
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <class Real>
LoadedCheckpoint<Real> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint<Real>(read_file_bytes(path));
}

}  // namespace moce
