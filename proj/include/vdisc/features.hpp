// Copyright 2026 The vdisc Authors.
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

// Embedding production, sign binarization, and the distance metrics.

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vdisc/codec.hpp"
#include "vdisc/core.hpp"
#include "vdisc/errors.hpp"

namespace vdisc {

struct ExtractorSpec {
  enum class Kind { kSeededHash, kFileIngest };

  Kind kind = Kind::kSeededHash;
  std::size_t dim = 64;
  std::uint64_t seed = 0;
  std::string path;  // file-ingest: JSON-lines of {"signature","embedding"}

  void validate() const {
    if (dim == 0) throw InputError("extractor dim must be positive");
    if (kind == Kind::kFileIngest && path.empty()) {
      throw InputError("file-ingest extractor needs a path");
    }
  }

  bool operator==(const ExtractorSpec&) const = default;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t load_le64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | p[i];
  return v;
}

}  // namespace detail

/// Keyed hash stream: MD5 over (seed, dim, bytes) seeds a splitmix64
/// generator whose outputs are mapped onto [-1, 1).
inline Embedding extract_seeded_hash(std::span<const std::uint8_t> image_bytes,
                                     std::uint64_t seed, std::size_t dim) {
  if (dim == 0) throw InputError("extractor dim must be positive");
  std::vector<std::uint8_t> keyed(16 + image_bytes.size());
  for (int i = 0; i < 8; ++i) {
    keyed[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(seed >> (8 * i));
    keyed[static_cast<std::size_t>(8 + i)] =
        static_cast<std::uint8_t>(static_cast<std::uint64_t>(dim) >> (8 * i));
  }
  std::copy(image_bytes.begin(), image_bytes.end(), keyed.begin() + 16);
  const codec::Digest key = codec::md5(keyed);
  std::uint64_t state =
      detail::load_le64(key.data()) ^ std::rotl(detail::load_le64(key.data() + 8), 17);
  Embedding e;
  e.values.resize(dim);
  for (auto& v : e.values) {
    const double unit = static_cast<double>(detail::splitmix64(state) >> 11) * 0x1.0p-53;
    v = static_cast<float>(2.0 * unit - 1.0);
  }
  return e;
}

inline Embedding extract_seeded_hash(std::string_view image_bytes, std::uint64_t seed,
                                     std::size_t dim) {
  return extract_seeded_hash(
      std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(image_bytes.data()),
                                    image_bytes.size()),
      seed, dim);
}

/// Loads the JSON-lines embedding table used by file-ingest extractors.
inline std::unordered_map<Signature, Embedding> load_embedding_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError(fmt::format("embedding file '{}' not found", path));
  std::unordered_map<Signature, Embedding> table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto sig = Signature::from_hex(j.at("signature").get<std::string>());
      table[sig] = Embedding::from_bytes(
          codec::base64_decode(j.at("embedding").get<std::string>()));
    } catch (const nlohmann::json::exception& ex) {
      throw InputError(fmt::format("{}:{}: {}", path, lineno, ex.what()));
    }
  }
  return table;
}

/// Extractor bound to a spec; file-ingest tables load once at construction.
class Extractor {
 public:
  explicit Extractor(ExtractorSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    if (spec_.kind == ExtractorSpec::Kind::kFileIngest) {
      table_ = std::make_shared<const std::unordered_map<Signature, Embedding>>(
          load_embedding_table(spec_.path));
    }
  }

  const ExtractorSpec& spec() const { return spec_; }

  Embedding extract(const Signature& sig, std::span<const std::uint8_t> image_bytes) const {
    if (spec_.kind == ExtractorSpec::Kind::kSeededHash) {
      return extract_seeded_hash(image_bytes, spec_.seed, spec_.dim);
    }
    const auto it = table_->find(sig);
    if (it == table_->end()) {
      throw NotFoundError(fmt::format("no ingested embedding for {}", sig.hex()));
    }
    if (it->second.dim() != spec_.dim) {
      throw DimensionError(fmt::format("ingested embedding for {} has dim {}, expected {}",
                                       sig.hex(), it->second.dim(), spec_.dim));
    }
    return it->second;
  }

  Embedding extract(std::span<const std::uint8_t> image_bytes) const {
    return extract(compute_signature(image_bytes), image_bytes);
  }

 private:
  ExtractorSpec spec_;
  std::shared_ptr<const std::unordered_map<Signature, Embedding>> table_;
};

/// Bit i is set iff values[i] > 0; zero maps to 0.
inline BinaryFingerprint binarize(const Embedding& e) {
  BinaryFingerprint fp(e.dim());
  for (std::size_t i = 0; i < e.dim(); ++i) {
    if (e.values[i] > 0.0F) fp.set(i);
  }
  return fp;
}

inline std::size_t hamming(const BinaryFingerprint& a, const BinaryFingerprint& b) {
  if (a.dim() != b.dim()) {
    throw DimensionError(fmt::format("hamming: dim {} vs {}", a.dim(), b.dim()));
  }
  const auto wa = a.words();
  const auto wb = b.words();
  std::size_t d = 0;
  for (std::size_t i = 0; i < wa.size(); ++i) d += static_cast<std::size_t>(std::popcount(wa[i] ^ wb[i]));
  return d;
}

inline double l1(const Embedding& a, const Embedding& b) {
  if (a.dim() != b.dim()) throw DimensionError(fmt::format("l1: dim {} vs {}", a.dim(), b.dim()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    s += std::abs(static_cast<double>(a.values[i]) - static_cast<double>(b.values[i]));
  }
  return s;
}

inline double l2(const Embedding& a, const Embedding& b) {
  if (a.dim() != b.dim()) throw DimensionError(fmt::format("l2: dim {} vs {}", a.dim(), b.dim()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    const double d = static_cast<double>(a.values[i]) - static_cast<double>(b.values[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

/// 1 - hamming/dim. An empty fingerprint pair is maximally similar.
inline double similarity_from_distance(std::size_t distance, std::size_t dim) {
  if (dim == 0) return 1.0;
  return 1.0 - static_cast<double>(distance) / static_cast<double>(dim);
}

inline double visual_similarity(const BinaryFingerprint& a, const BinaryFingerprint& b) {
  return similarity_from_distance(hamming(a, b), a.dim());
}

}  // namespace vdisc
