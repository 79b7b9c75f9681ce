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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "conmim/trainer/pretrain.hpp"

namespace conmim::cli {

inline constexpr const char* kMetricsHeader =
    "step,epoch,lr,momentum_alpha,loss,pos_key_rank_mean,softmax_entropy_mean,wall_ms";

inline std::string format_row(const train::MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%zu,%.9g,%.17g,%.9g,%.9g,%.9g,%.3f", static_cast<long long>(r.step), r.epoch, r.lr,
                r.momentum_alpha, r.loss, r.pos_key_rank_mean, r.softmax_entropy_mean, r.wall_ms);
  return buf;
}

/// Appends a row to `dir/metrics.csv`, writing the header when the file is
/// new or empty. Flushed per row.
inline void emit_metrics(const std::filesystem::path& dir, const train::MetricsRow& row,
                         const std::string& file = "metrics.csv") {
  const auto path = dir / file;
  std::error_code ec;
  const bool fresh = !std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot write metrics to " + path.string());
  if (fresh) out << kMetricsHeader << '\n';
  out << format_row(row) << '\n';
  out.flush();
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace conmim::cli
