// Copyright 2026 The ConMIM Lab Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "conmim/data/ppm.hpp"
#include "conmim/trainer/optim.hpp"
#include "conmim/vit/params.hpp"

namespace conmim::train {

// File layout (little-endian):
//   "CMIM" | u32 version | u32 len + config text | records until EOF
//   record: u32 len + name | u8 dtype | u8 rank | u32 dims[rank] | payload
// dtype codes: 0 f32, 1 f64, 2 i64.

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, version, truncated, malformed };
  CheckpointError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

template <class T>
struct Checkpoint {
  vit::EncoderPair<T> pair;
  AdamState<T> adam;
  ScheduleState state;
  std::string config;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  template <class U>
  void pod(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(U));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  template <class U>
  void tensor(const std::string& name, std::uint8_t code, const nd::Shape& shape, std::span<const U> payload) {
    str(name);
    pod(code);
    pod(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) pod(static_cast<std::uint32_t>(d));
    const auto* p = reinterpret_cast<const std::uint8_t*>(payload.data());
    bytes.insert(bytes.end(), p, p + payload.size_bytes());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  bool done() const { return pos_ == b_.size(); }
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n)
      throw CheckpointError(CheckpointError::Kind::truncated, std::string("checkpoint truncated while reading ") + what +
                                                                  " at byte " + std::to_string(pos_));
  }
  template <class U>
  U pod(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, b_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(const char* what) {
    const auto n = pod<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::span<const std::uint8_t> raw(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

// Checks magic and version; the returned reader sits at the config string.
inline Reader open_checkpoint(std::span<const std::uint8_t> bytes) {
  using K = CheckpointError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "CMIM", 4) != 0) throw CheckpointError(K::bad_magic, "checkpoint: bad magic");
  Reader r(bytes.subspan(4));
  const auto version = r.pod<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(K::version, "checkpoint: version mismatch, file has " + std::to_string(version) +
                                          ", expected " + std::to_string(kCheckpointVersion));
  return r;
}

template <class T>
void put_set(Writer& w, const std::string& prefix, const vit::ParamSet<T>& ps) {
  for (const auto& [name, t] : ps) w.tensor<T>(prefix + name, static_cast<std::uint8_t>(nd::dtype_of<T>()), t.shape(), t.values());
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint<T>& ck) {
  detail::Writer w;
  w.bytes = {'C', 'M', 'I', 'M'};
  w.pod(kCheckpointVersion);
  w.str(ck.config);
  detail::put_set(w, "theta/", ck.pair.theta);
  detail::put_set(w, "theta_tilde/", ck.pair.theta_tilde);
  detail::put_set(w, "adam.m/", ck.adam.m);
  detail::put_set(w, "adam.v/", ck.adam.v);
  auto scalar = [&](const std::string& name, std::int64_t v) {
    w.tensor<std::int64_t>(name, 2, {}, std::span<const std::int64_t>(&v, 1));
  };
  scalar("state/step", ck.state.step);
  scalar("state/total_steps", ck.state.total_steps);
  scalar("state/warmup_steps", ck.state.warmup_steps);
  scalar("state/adam_t", ck.adam.t);
  return std::move(w.bytes);
}

template <class T>
Checkpoint<T> deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  using K = CheckpointError::Kind;
  detail::Reader r = detail::open_checkpoint(bytes);
  Checkpoint<T> ck;
  ck.config = r.str("config");
  const auto expected_code = static_cast<std::uint8_t>(nd::dtype_of<T>());
  while (!r.done()) {
    const std::string name = r.str("record name");
    const auto code = r.pod<std::uint8_t>("dtype");
    const auto rank = r.pod<std::uint8_t>("rank");
    nd::Shape shape(rank);
    for (auto& d : shape) d = r.pod<std::uint32_t>("dims");
    const std::size_t n = nd::shape_numel(shape);
    if (code == 2) {
      if (n != 1) throw CheckpointError(K::malformed, "checkpoint: state record " + name + " is not a scalar");
      std::int64_t v;
      std::memcpy(&v, r.raw(sizeof v, "payload").data(), sizeof v);
      if (name == "state/step") ck.state.step = v;
      else if (name == "state/total_steps") ck.state.total_steps = v;
      else if (name == "state/warmup_steps") ck.state.warmup_steps = v;
      else if (name == "state/adam_t") ck.adam.t = v;
      else throw CheckpointError(K::malformed, "checkpoint: unknown state record " + name);
      continue;
    }
    if (code != expected_code)
      throw CheckpointError(K::malformed, "checkpoint: record " + name + " has dtype code " + std::to_string(code));
    const auto payload = r.raw(n * sizeof(T), "payload");
    nd::Tensor<T> t = nd::Tensor<T>::uninitialized(shape);
    std::memcpy(t.mutable_data(), payload.data(), payload.size());
    const auto slash = name.find('/');
    const std::string set = name.substr(0, slash), key = name.substr(slash + 1);
    if (set == "theta") ck.pair.theta.add(key, std::move(t));
    else if (set == "theta_tilde") ck.pair.theta_tilde.add(key, std::move(t));
    else if (set == "adam.m") ck.adam.m.add(key, std::move(t));
    else if (set == "adam.v") ck.adam.v.add(key, std::move(t));
    else throw CheckpointError(K::malformed, "checkpoint: unknown record " + name);
  }
  if (!ck.pair.congruent()) throw CheckpointError(K::malformed, "checkpoint: theta and theta_tilde differ in structure");
  return ck;
}

template <class T>
void save_checkpoint(const Checkpoint<T>& ck, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ck);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  data::write_file(tmp, bytes);
  std::filesystem::rename(tmp, path);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint<T>(data::read_file(path));
}

/// The run configuration stored with a checkpoint, without decoding tensors.
inline std::string checkpoint_config(const std::filesystem::path& path) {
  const auto bytes = data::read_file(path);
  return detail::open_checkpoint(bytes).str("config");
}

}  // namespace conmim::train
