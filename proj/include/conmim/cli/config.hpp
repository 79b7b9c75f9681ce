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

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "conmim/data/mask.hpp"
#include "conmim/eval/probe.hpp"
#include "conmim/objectives/losses.hpp"
#include "conmim/trainer/config.hpp"
#include "conmim/vit/config.hpp"

namespace conmim::cli {

/// Bad input from the user (exit status 2), as opposed to a runtime failure.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataSpec {
  std::string source = "synth";  // synth | manifest
  std::string manifest;          // manifest source only
  std::size_t n = 8000;          // pretraining images
  int classes = 8;
  std::size_t probe_train = 2000;
  std::size_t probe_val = 1000;
};

struct RunConfig {
  vit::ViTConfig model;
  train::TrainConfig train;
  obj::LossConfig loss;
  eval::ProbeConfig probe;
  DataSpec data;
  std::string out_dir = "run";
  std::uint64_t seed = 0;
  bool wall_clock = false;

  /// Pushes the run seed into every sub-config.
  void propagate_seed() {
    train.seed = seed;
    probe.seed = seed;
  }

  void validate() const {
    model.validate();
    train.validate();
    loss.validate();
    if (probe.unfrozen_blocks > model.depth) throw UsageError("probe.unfrozen_blocks exceeds model.depth");
    if (data.source != "synth" && data.source != "manifest") throw UsageError("data.source must be synth or manifest");
    if (data.source == "manifest" && data.manifest.empty()) throw UsageError("data.manifest is required for source = manifest");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class U>
U parse_number(const std::string& key, const std::string& v) {
  U out{};
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw UsageError("config: bad value '" + v + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw UsageError("config: " + key + " must be true or false, got '" + v + "'");
}

template <class F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw UsageError("config: " + key + ": " + e.what());
  }
}

inline std::string fmt(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
  return std::string(buf, r.ptr);
}

}  // namespace detail

/// Setter and printer for one `section.key`.
struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::map<std::string, Field>& fields() {
  using detail::fmt;
  using detail::parse_bool;
  using detail::parse_number;
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> m;
    auto size = [&](const std::string& k, auto member) {
      m[k] = {[=](RunConfig& c, const std::string& v) { member(c) = parse_number<std::size_t>(k, v); },
              [=](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }};
    };
    auto real = [&](const std::string& k, auto member) {
      m[k] = {[=](RunConfig& c, const std::string& v) { member(c) = parse_number<double>(k, v); },
              [=](const RunConfig& c) { return fmt(member(const_cast<RunConfig&>(c))); }};
    };
    auto flag = [&](const std::string& k, auto member) {
      m[k] = {[=](RunConfig& c, const std::string& v) { member(c) = parse_bool(k, v); },
              [=](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
    };
    auto text = [&](const std::string& k, auto set, auto get) { m[k] = {set, get}; };

    size("model.image_side", [](RunConfig& c) -> auto& { return c.model.image_side; });
    size("model.patch_side", [](RunConfig& c) -> auto& { return c.model.patch_side; });
    size("model.depth", [](RunConfig& c) -> auto& { return c.model.depth; });
    size("model.dim", [](RunConfig& c) -> auto& { return c.model.dim; });
    size("model.heads", [](RunConfig& c) -> auto& { return c.model.heads; });
    size("model.mlp_ratio", [](RunConfig& c) -> auto& { return c.model.mlp_ratio; });
    size("model.proj_depth", [](RunConfig& c) -> auto& { return c.model.proj_depth; });
    text("model.masking",
         [](RunConfig& c, const std::string& v) {
           if (v == "embedding") c.model.masking = vit::MaskingMode::embedding;
           else if (v == "pixel") c.model.masking = vit::MaskingMode::pixel;
           else throw UsageError("config: model.masking must be embedding or pixel");
         },
         [](const RunConfig& c) { return std::string(c.model.masking == vit::MaskingMode::pixel ? "pixel" : "embedding"); });
    text("model.dtype",
         [](RunConfig& c, const std::string& v) {
           if (v == "f32") c.model.dtype = nd::DType::f32;
           else if (v == "f64") c.model.dtype = nd::DType::f64;
           else throw UsageError("config: model.dtype must be f32 or f64");
         },
         [](const RunConfig& c) { return std::string(c.model.dtype == nd::DType::f64 ? "f64" : "f32"); });

    size("train.epochs", [](RunConfig& c) -> auto& { return c.train.epochs; });
    size("train.batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; });
    real("train.peak_lr", [](RunConfig& c) -> auto& { return c.train.peak_lr; });
    real("train.min_lr", [](RunConfig& c) -> auto& { return c.train.min_lr; });
    real("train.warmup_epochs", [](RunConfig& c) -> auto& { return c.train.warmup_epochs; });
    real("train.weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; });
    real("train.beta1", [](RunConfig& c) -> auto& { return c.train.beta1; });
    real("train.beta2", [](RunConfig& c) -> auto& { return c.train.beta2; });
    real("train.adam_eps", [](RunConfig& c) -> auto& { return c.train.adam_eps; });
    real("train.grad_clip", [](RunConfig& c) -> auto& { return c.train.grad_clip; });
    real("train.alpha0", [](RunConfig& c) -> auto& { return c.train.alpha0; });
    real("train.mask_ratio", [](RunConfig& c) -> auto& { return c.train.mask_ratio; });
    text("train.mask_strategy",
         [](RunConfig& c, const std::string& v) {
           c.train.mask_strategy = detail::wrap("train.mask_strategy", [&] { return data::parse_strategy(v); });
         },
         [](const RunConfig& c) { return std::string(data::strategy_name(c.train.mask_strategy)); });
    text("train.objective",
         [](RunConfig& c, const std::string& v) {
           c.train.objective = detail::wrap("train.objective", [&] { return train::parse_objective(v); });
         },
         [](const RunConfig& c) { return std::string(train::objective_name(c.train.objective)); });
    text("train.aug",
         [](RunConfig& c, const std::string& v) {
           c.train.aug = detail::wrap("train.aug", [&] { return train::parse_aug_variant(v); });
         },
         [](const RunConfig& c) { return std::string(train::aug_variant_name(c.train.aug)); });
    flag("train.momentum_sync", [](RunConfig& c) -> auto& { return c.train.momentum_sync; });
    size("train.vocab", [](RunConfig& c) -> auto& { return c.train.vocab; });
    size("train.max_steps", [](RunConfig& c) -> auto& { return c.train.max_steps; });
    flag("train.audit_stop_gradient", [](RunConfig& c) -> auto& { return c.train.audit_stop_gradient; });

    real("loss.temperature", [](RunConfig& c) -> auto& { return c.loss.temperature; });
    text("loss.negative_pool",
         [](RunConfig& c, const std::string& v) {
           c.loss.negative_pool = detail::wrap("loss.negative_pool", [&] { return obj::parse_pool(v); });
         },
         [](const RunConfig& c) { return std::string(obj::pool_name(c.loss.negative_pool)); });
    real("loss.filter_threshold", [](RunConfig& c) -> auto& { return c.loss.filter_threshold; });

    text("probe.mode",
         [](RunConfig& c, const std::string& v) {
           c.probe.mode = detail::wrap("probe.mode", [&] { return eval::parse_probe_mode(v); });
         },
         [](const RunConfig& c) { return std::string(c.probe.mode == eval::ProbeMode::partial ? "partial" : "linear"); });
    size("probe.unfrozen_blocks", [](RunConfig& c) -> auto& { return c.probe.unfrozen_blocks; });
    size("probe.epochs", [](RunConfig& c) -> auto& { return c.probe.epochs; });
    real("probe.lr", [](RunConfig& c) -> auto& { return c.probe.lr; });
    real("probe.weight_decay", [](RunConfig& c) -> auto& { return c.probe.weight_decay; });
    size("probe.batch_size", [](RunConfig& c) -> auto& { return c.probe.batch_size; });
    text("probe.feature_source",
         [](RunConfig& c, const std::string& v) {
           c.probe.feature_source = detail::wrap("probe.feature_source", [&] { return eval::parse_feature_source(v); });
         },
         [](const RunConfig& c) {
           return std::string(c.probe.feature_source == eval::FeatureSource::cls ? "cls" : "mean_patch");
         });

    text("data.source", [](RunConfig& c, const std::string& v) { c.data.source = v; },
         [](const RunConfig& c) { return c.data.source; });
    text("data.manifest", [](RunConfig& c, const std::string& v) { c.data.manifest = v; },
         [](const RunConfig& c) { return c.data.manifest; });
    size("data.n", [](RunConfig& c) -> auto& { return c.data.n; });
    m["data.classes"] = {[](RunConfig& c, const std::string& v) { c.data.classes = parse_number<int>("data.classes", v); },
                         [](const RunConfig& c) { return std::to_string(c.data.classes); }};
    size("data.probe_train", [](RunConfig& c) -> auto& { return c.data.probe_train; });
    size("data.probe_val", [](RunConfig& c) -> auto& { return c.data.probe_val; });

    text("run.out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; },
         [](const RunConfig& c) { return c.out_dir; });
    m["run.seed"] = {[](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("run.seed", v); },
                     [](const RunConfig& c) { return std::to_string(c.seed); }};
    flag("run.wall_clock", [](RunConfig& c) -> auto& { return c.wall_clock; });
    return m;
  }();
  return table;
}

/// Applies one `section.key = value` assignment.
inline void set_field(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& f = fields();
  auto it = f.find(key);
  if (it == f.end()) throw UsageError("config: unknown key '" + key + "'");
  it->second.set(cfg, value);
}

/// `key = value` lines under `[section]` headers; '#' starts a comment.
inline RunConfig parse_config(std::istream& in, const std::string& origin = "<config>") {
  RunConfig cfg;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw UsageError(where + "unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(where + "expected key = value");
    if (section.empty()) throw UsageError(where + "key outside of any [section]");
    try {
      set_field(cfg, section + "." + detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    } catch (const UsageError& e) {
      throw UsageError(where + e.what());
    }
  }
  cfg.propagate_seed();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  return parse_config(in, path.string());
}

/// Canonical text form; parse_config(dump(c)) reproduces c.
inline std::string dump_config(const RunConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& [key, f] : fields()) {
    const auto dot = key.find('.');
    if (key.substr(0, dot) != section) {
      section = key.substr(0, dot);
      out << (out.tellp() > 0 ? "\n" : "") << '[' << section << "]\n";
    }
    out << key.substr(dot + 1) << " = " << f.get(cfg) << '\n';
  }
  return out.str();
}

}  // namespace conmim::cli
