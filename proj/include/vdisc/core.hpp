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

// Domain types shared across the engine.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <compare>
#include <cstring>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "vdisc/codec.hpp"
#include "vdisc/errors.hpp"

namespace vdisc {

/// 16-byte MD5 content digest identifying an image. Ordering on the raw
/// bytes coincides with ordering on the lowercase hex rendering.
struct Signature {
  std::array<std::uint8_t, 16> bytes{};

  std::string hex() const { return codec::to_hex(bytes); }

  static Signature from_hex(std::string_view hex) {
    if (hex.size() != 32) {
      throw InputError(fmt::format("signature must be 32 hex chars, got '{}'", hex));
    }
    Signature s;
    auto nibble = [&](char c) -> std::uint8_t {
      if (c >= '0' && c <= '9') return static_cast<std::uint8_t>(c - '0');
      if (c >= 'a' && c <= 'f') return static_cast<std::uint8_t>(c - 'a' + 10);
      if (c >= 'A' && c <= 'F') return static_cast<std::uint8_t>(c - 'A' + 10);
      throw InputError(fmt::format("invalid hex digit in signature '{}'", hex));
    };
    for (std::size_t i = 0; i < 16; ++i) {
      s.bytes[i] = static_cast<std::uint8_t>(nibble(hex[2 * i]) << 4 | nibble(hex[2 * i + 1]));
    }
    return s;
  }

  /// First 8 hex chars read as an unsigned integer.
  std::uint32_t prefix32() const {
    return std::uint32_t{bytes[0]} << 24 | std::uint32_t{bytes[1]} << 16 |
           std::uint32_t{bytes[2]} << 8 | std::uint32_t{bytes[3]};
  }

  auto operator<=>(const Signature&) const = default;
};

inline Signature compute_signature(std::span<const std::uint8_t> image_bytes) {
  return Signature{codec::md5(image_bytes)};
}

inline Signature compute_signature(std::string_view image_bytes) {
  return Signature{codec::md5(image_bytes)};
}

struct Embedding {
  std::vector<float> values;

  std::size_t dim() const { return values.size(); }

  bool finite() const {
    return std::all_of(values.begin(), values.end(),
                       [](float v) { return std::isfinite(v); });
  }

  /// Little-endian float32 packing used on the wire.
  std::vector<std::uint8_t> to_bytes() const {
    static_assert(std::endian::native == std::endian::little);
    std::vector<std::uint8_t> out(values.size() * 4);
    std::memcpy(out.data(), values.data(), out.size());
    return out;
  }

  static Embedding from_bytes(std::span<const std::uint8_t> bytes) {
    if (bytes.size() % 4 != 0) throw InputError("embedding bytes not a multiple of 4");
    Embedding e;
    e.values.resize(bytes.size() / 4);
    std::memcpy(e.values.data(), bytes.data(), bytes.size());
    if (!e.finite()) throw InputError("embedding contains non-finite values");
    return e;
  }

  bool operator==(const Embedding&) const = default;
};

/// Fixed-width bit vector. Bit i lives in word i/64 at position 63 - i%64,
/// so the big-endian byte image of the words is the MSB-first packing.
class BinaryFingerprint {
 public:
  BinaryFingerprint() = default;
  explicit BinaryFingerprint(std::size_t dim) : dim_(dim), words_((dim + 63) / 64, 0) {}

  std::size_t dim() const { return dim_; }
  std::span<const std::uint64_t> words() const { return words_; }

  bool test(std::size_t i) const { return (words_[i / 64] >> (63 - i % 64)) & 1U; }

  void set(std::size_t i, bool on = true) {
    const std::uint64_t mask = std::uint64_t{1} << (63 - i % 64);
    if (on) {
      words_[i / 64] |= mask;
    } else {
      words_[i / 64] &= ~mask;
    }
  }

  /// Reads `len` (1..64) bits starting at `pos`, first bit most significant.
  std::uint64_t bits(std::size_t pos, std::size_t len) const {
    const std::size_t w = pos / 64;
    const std::size_t off = pos % 64;
    std::uint64_t hi = words_[w] << off;
    if (off + len > 64) hi |= words_[w + 1] >> (64 - off);
    return len == 64 ? hi : hi >> (64 - len);
  }

  std::vector<std::uint8_t> to_bytes() const {
    std::vector<std::uint8_t> out((dim_ + 7) / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<std::uint8_t>(words_[i / 8] >> (56 - 8 * (i % 8)));
    }
    return out;
  }

  static BinaryFingerprint from_bytes(std::span<const std::uint8_t> bytes, std::size_t dim) {
    if (bytes.size() != (dim + 7) / 8) {
      throw InputError(fmt::format("fingerprint of dim {} needs {} bytes, got {}", dim,
                                   (dim + 7) / 8, bytes.size()));
    }
    BinaryFingerprint fp(dim);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      fp.words_[i / 8] |= std::uint64_t{bytes[i]} << (56 - 8 * (i % 8));
    }
    if (dim % 64 != 0 && !fp.words_.empty()) {
      const std::uint64_t tail = ~std::uint64_t{0} >> (dim % 64);
      if (fp.words_.back() & tail) throw InputError("fingerprint has bits set past dim");
    }
    return fp;
  }

  /// Parses a string of '0'/'1' characters.
  static BinaryFingerprint from_string(std::string_view bits) {
    BinaryFingerprint fp(bits.size());
    for (std::size_t i = 0; i < bits.size(); ++i) {
      if (bits[i] != '0' && bits[i] != '1') throw InputError("bit string must be 0/1");
      fp.set(i, bits[i] == '1');
    }
    return fp;
  }

  std::string to_string() const {
    std::string s(dim_, '0');
    for (std::size_t i = 0; i < dim_; ++i) {
      if (test(i)) s[i] = '1';
    }
    return s;
  }

  bool operator==(const BinaryFingerprint&) const = default;

 private:
  std::size_t dim_ = 0;
  std::vector<std::uint64_t> words_;
};

inline constexpr int kNumCategories = 32;

/// Sparse site-wide category weights; only strictly positive entries survive.
struct CategoryVector {
  std::map<int, double> entries;

  bool empty() const { return entries.empty(); }

  /// Index of the heaviest category (ties to the lower index).
  std::optional<int> top() const {
    std::optional<int> best;
    double w = 0.0;
    for (const auto& [i, v] : entries) {
      if (!best || v > w) {
        best = i;
        w = v;
      }
    }
    return best;
  }

  bool operator==(const CategoryVector&) const = default;
};

inline CategoryVector threshold_category(std::span<const double> raw, double tau) {
  if (raw.size() != kNumCategories) {
    throw DimensionError(
        fmt::format("category vector must have {} entries, got {}", kNumCategories, raw.size()));
  }
  if (!(tau >= 0.0)) throw InputError("category threshold must be >= 0");
  CategoryVector out;
  for (int i = 0; i < kNumCategories; ++i) {
    if (raw[static_cast<std::size_t>(i)] > tau) out.entries[i] = raw[static_cast<std::size_t>(i)];
  }
  return out;
}

struct Annotation {
  std::string term;
  double weight = 0.0;

  bool operator==(const Annotation&) const = default;
};

/// Axis-aligned pixel rectangle; ordering is lexicographic on (x, y, w, h).
struct Box {
  double x = 0, y = 0, w = 0, h = 0;

  double area() const { return w * h; }
  bool valid() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) &&
           w > 0 && h > 0;
  }
  bool within(double width, double height) const {
    return x >= 0 && y >= 0 && x + w <= width && y + h <= height;
  }

  auto operator<=>(const Box&) const = default;
};

struct DetectedObject {
  Box box;
  std::string category;
  double confidence = 0.0;

  bool operator==(const DetectedObject&) const = default;
};

using Timestamp = std::chrono::sys_seconds;

/// Parses "YYYY-MM-DDTHH:MM:SSZ".
inline Timestamp parse_timestamp(const std::string& text) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  char z = 0;
  if (std::sscanf(text.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d%c", &y, &mo, &d, &h, &mi, &s, &z) != 7 ||
      z != 'Z' || h > 23 || mi > 59 || s > 60) {
    throw InputError(fmt::format("bad timestamp '{}', expected YYYY-MM-DDTHH:MM:SSZ", text));
  }
  const std::chrono::year_month_day ymd{std::chrono::year{y},
                                        std::chrono::month{static_cast<unsigned>(mo)},
                                        std::chrono::day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) throw InputError(fmt::format("bad calendar date in '{}'", text));
  return std::chrono::sys_days{ymd} + std::chrono::hours{h} + std::chrono::minutes{mi} +
         std::chrono::seconds{s};
}

inline std::string format_timestamp(Timestamp t) {
  const auto day = std::chrono::floor<std::chrono::days>(t);
  const std::chrono::year_month_day ymd{day};
  const std::chrono::hh_mm_ss hms{t - day};
  return fmt::format("{:04}-{:02}-{:02}T{:02}:{:02}:{:02}Z", static_cast<int>(ymd.year()),
                     static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                     hms.hours().count(), hms.minutes().count(), hms.seconds().count());
}

struct ImageDocument {
  Signature signature;
  Timestamp upload_time{};
  int width = 0;
  int height = 0;
  Embedding embedding;
  BinaryFingerprint fingerprint;
  std::vector<Annotation> annotations;
  CategoryVector category;
  std::optional<std::string> class_label;  // offline evaluation only
  std::vector<DetectedObject> detections;

  bool operator==(const ImageDocument&) const = default;
};

enum class Source { kVisual, kTextual, kObjectSearch };

inline std::string_view to_string(Source s) {
  switch (s) {
    case Source::kVisual:
      return "visual";
    case Source::kTextual:
      return "textual";
    case Source::kObjectSearch:
      return "objectSearch";
  }
  return "visual";
}

inline Source source_from_string(std::string_view s) {
  if (s == "visual") return Source::kVisual;
  if (s == "textual") return Source::kTextual;
  if (s == "objectSearch") return Source::kObjectSearch;
  throw InputError(fmt::format("unknown source '{}'", s));
}

struct ScoredResult {
  Signature signature;
  int hamming_distance = 0;
  double similarity = 0.0;
  double rerank_score = 0.0;
  int leaf_id = 0;
  Source source = Source::kVisual;

  bool operator==(const ScoredResult&) const = default;
};

/// Ascending (distance, signature): the engine-wide ranking order.
inline bool nearer(const ScoredResult& a, const ScoredResult& b) {
  if (a.hamming_distance != b.hamming_distance) return a.hamming_distance < b.hamming_distance;
  return a.signature < b.signature;
}

}  // namespace vdisc

template <>
struct std::hash<vdisc::Signature> {
  std::size_t operator()(const vdisc::Signature& s) const noexcept {
    std::uint64_t v = 0;
    std::memcpy(&v, s.bytes.data() + 8, sizeof v);
    return static_cast<std::size_t>(v);
  }
};
