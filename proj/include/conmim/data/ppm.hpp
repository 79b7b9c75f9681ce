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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "conmim/data/image.hpp"

namespace conmim::data {

namespace detail {

inline bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

// Header integer; '#' comments run to end of line.
inline std::size_t header_int(std::span<const std::uint8_t> b, std::size_t& pos) {
  for (;;) {
    while (pos < b.size() && is_space(b[pos])) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::size_t v = 0, digits = 0;
  while (pos < b.size() && b[pos] >= '0' && b[pos] <= '9') {
    v = v * 10 + (b[pos++] - '0');
    if (++digits > 9) throw std::runtime_error("ppm: header value too large");
  }
  if (digits == 0) throw std::runtime_error("ppm: malformed header");
  return v;
}

}  // namespace detail

/// Binary P6 with maxval 255; samples are scaled by 1/255.
inline ImageRecord load_ppm(std::span<const std::uint8_t> bytes, std::string source_id = "") {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw std::runtime_error("ppm: not P6");
  std::size_t pos = 2;
  const std::size_t w = detail::header_int(bytes, pos);
  const std::size_t h = detail::header_int(bytes, pos);
  const std::size_t maxval = detail::header_int(bytes, pos);
  if (w == 0 || h == 0) throw std::runtime_error("ppm: zero dimension");
  if (maxval != 255) throw std::runtime_error("ppm: maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (pos >= bytes.size() || !detail::is_space(bytes[pos])) throw std::runtime_error("ppm: malformed header");
  ++pos;
  const std::size_t expected = w * h * 3, actual = bytes.size() - pos;
  if (actual < expected)
    throw std::runtime_error("ppm: truncated payload, expected " + std::to_string(expected) + " bytes, got " +
                             std::to_string(actual));
  ImageRecord rec = blank_image(h, w);
  rec.source_id = std::move(source_id);
  float* dst = rec.pixels.mutable_data();
  for (std::size_t i = 0; i < expected; ++i) dst[i] = static_cast<float>(bytes[pos + i]) / 255.f;
  return rec;
}

inline std::vector<std::uint8_t> write_ppm(const ImageRecord& img) {
  const std::string header = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + img.pixels.size());
  for (float v : img.pixels.values())
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f)));
  return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline ImageRecord load_ppm_file(const std::filesystem::path& path) {
  return load_ppm(read_file(path), path.filename().string());
}

// Manifest: one `path<TAB>label` line per record; relative paths resolve
// against the manifest's directory.

inline void write_dataset(const std::filesystem::path& dir, const std::vector<ImageRecord>& records) {
  std::filesystem::create_directories(dir / "images");
  std::ofstream manifest(dir / "manifest.tsv", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.tsv").string());
  for (std::size_t i = 0; i < records.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.ppm", i);
    const std::filesystem::path rel = std::filesystem::path("images") / name;
    write_file(dir / rel, write_ppm(records[i]));
    manifest << rel.generic_string() << '\t' << (records[i].label ? std::to_string(*records[i].label) : "-1") << '\n';
  }
}

inline std::vector<ImageRecord> read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest " + manifest_path.string());
  std::vector<ImageRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(manifest_path.string() + ":" + std::to_string(lineno) + ": expected path<TAB>label");
    std::filesystem::path p = line.substr(0, tab);
    if (p.is_relative()) p = manifest_path.parent_path() / p;
    ImageRecord rec = load_ppm_file(p);
    const int label = std::stoi(line.substr(tab + 1));
    if (label >= 0) rec.label = label;
    rec.source_id = line.substr(0, tab);
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace conmim::data
