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

// Leaf ranker: an inverted token index over binary fingerprints.
//
// A fingerprint of `dim` bits is cut into `m` equal blocks; each
// (block index, block value) pair is a token with a posting list of
// document ordinals. Two codes that differ in fewer than `m` bits must agree
// on at least one block, so the union of the query's posting lists contains
// every document within Hamming distance m - 1. Candidates are then ranked by
// exact Hamming distance.

#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vdisc/codec.hpp"
#include "vdisc/core.hpp"
#include "vdisc/errors.hpp"
#include "vdisc/features.hpp"

namespace vdisc {

struct Token {
  std::uint32_t block = 0;
  std::uint64_t value = 0;

  auto operator<=>(const Token&) const = default;
};

/// 64-bit blocks for wide codes, 4-bit blocks for narrow ones.
inline std::size_t default_block_count(std::size_t dim) {
  std::size_t m = dim >= 64 ? dim / 64 : dim / 4;
  if (m == 0 || dim % m != 0) m = 1;
  return m;
}

inline void check_block_layout(std::size_t dim, std::size_t m) {
  if (m == 0) throw DimensionError("block count must be positive");
  if (dim == 0 || dim % m != 0) {
    throw DimensionError(fmt::format("dim {} is not divisible into {} blocks", dim, m));
  }
  if (dim / m > 64) {
    throw DimensionError(fmt::format("block width {} exceeds 64 bits", dim / m));
  }
}

inline std::vector<Token> tokenize(const BinaryFingerprint& fp, std::size_t m) {
  check_block_layout(fp.dim(), m);
  const std::size_t width = fp.dim() / m;
  std::vector<Token> tokens(m);
  for (std::size_t i = 0; i < m; ++i) {
    tokens[i] = Token{static_cast<std::uint32_t>(i), fp.bits(i * width, width)};
  }
  return tokens;
}

/// One indexed entry. `meta_ref` points into whatever metadata store owns
/// the documents (the serving corpus, the object table, ...).
struct LeafDoc {
  Signature signature;
  BinaryFingerprint fingerprint;
  std::uint32_t meta_ref = 0;
};

class LeafIndex {
 public:
  LeafIndex() = default;

  static LeafIndex build(std::vector<LeafDoc> docs, std::size_t m, bool exhaustive_fallback = true,
                         int leaf_id = 0) {
    LeafIndex idx;
    idx.m_ = m;
    idx.exhaustive_ = exhaustive_fallback;
    idx.leaf_id_ = leaf_id;
    idx.postings_.resize(m);
    if (!docs.empty()) {
      idx.dim_ = docs.front().fingerprint.dim();
      check_block_layout(idx.dim_, m);
    } else if (m == 0) {
      throw DimensionError("block count must be positive");
    }
    for (std::size_t ord = 0; ord < docs.size(); ++ord) {
      if (docs[ord].fingerprint.dim() != idx.dim_) {
        throw DimensionError(fmt::format("mixed fingerprint dims: {} vs {}",
                                         docs[ord].fingerprint.dim(), idx.dim_));
      }
      for (const Token& t : tokenize(docs[ord].fingerprint, m)) {
        idx.postings_[t.block][t.value].push_back(static_cast<std::uint32_t>(ord));
      }
    }
    idx.docs_ = std::move(docs);
    return idx;
  }

  static LeafIndex build(std::span<const ImageDocument> docs, std::size_t m,
                         bool exhaustive_fallback = true, int leaf_id = 0) {
    std::vector<LeafDoc> entries;
    entries.reserve(docs.size());
    for (std::size_t i = 0; i < docs.size(); ++i) {
      entries.push_back({docs[i].signature, docs[i].fingerprint, static_cast<std::uint32_t>(i)});
    }
    return build(std::move(entries), m, exhaustive_fallback, leaf_id);
  }

  std::size_t dim() const { return dim_; }
  std::size_t block_count() const { return m_; }
  std::size_t size() const { return docs_.size(); }
  bool empty() const { return docs_.empty(); }
  bool exhaustive_fallback() const { return exhaustive_; }
  int leaf_id() const { return leaf_id_; }
  const LeafDoc& doc(std::size_t ordinal) const { return docs_.at(ordinal); }
  std::span<const LeafDoc> docs() const { return docs_; }

  /// Posting list for a token; empty when the token never occurs.
  std::span<const std::uint32_t> postings(const Token& t) const {
    if (t.block >= postings_.size()) return {};
    const auto it = postings_[t.block].find(t.value);
    if (it == postings_[t.block].end()) return {};
    return it->second;
  }

  std::size_t total_postings() const {
    std::size_t total = 0;
    for (const auto& block : postings_) {
      for (const auto& [value, list] : block) total += list.size();
    }
    return total;
  }

  /// Sorted, de-duplicated ordinals sharing at least one token with `q`.
  std::vector<std::uint32_t> candidates(const BinaryFingerprint& q) const {
    check_query(q);
    std::vector<std::uint32_t> out;
    if (docs_.empty()) return out;
    for (const Token& t : tokenize(q, m_)) {
      const auto list = postings(t);
      out.insert(out.end(), list.begin(), list.end());
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  /// Top-k by (distance, signature). With the exhaustive fallback on, the
  /// index scans every document whenever fewer than k candidates fall inside
  /// the guaranteed radius m - 1, which makes the answer exact.
  std::vector<ScoredResult> knn(const BinaryFingerprint& q, std::size_t k) const {
    check_query(q);
    if (docs_.empty() || k == 0) return {};
    std::vector<std::uint32_t> ords = candidates(q);
    std::vector<ScoredResult> scored = score(q, ords);
    if (exhaustive_ && ords.size() < docs_.size()) {
      const auto within = std::count_if(scored.begin(), scored.end(), [&](const ScoredResult& r) {
        return static_cast<std::size_t>(r.hamming_distance) < m_;
      });
      if (static_cast<std::size_t>(within) < k) {
        ords.resize(docs_.size());
        for (std::size_t i = 0; i < ords.size(); ++i) ords[i] = static_cast<std::uint32_t>(i);
        scored = score(q, ords);
      }
    }
    const std::size_t keep = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep),
                      scored.end(), nearer);
    scored.resize(keep);
    return scored;
  }

  /// Writes `<prefix>.postings` (binary, delta-varint ordinals) and
  /// `<prefix>.docs.jsonl`.
  void save(const std::filesystem::path& prefix) const;
  static LeafIndex load(const std::filesystem::path& prefix);

 private:
  void check_query(const BinaryFingerprint& q) const {
    if (!docs_.empty() && q.dim() != dim_) {
      throw DimensionError(fmt::format("query dim {} does not match index dim {}", q.dim(), dim_));
    }
  }

  std::vector<ScoredResult> score(const BinaryFingerprint& q,
                                  std::span<const std::uint32_t> ords) const {
    std::vector<ScoredResult> out;
    out.reserve(ords.size());
    for (std::uint32_t ord : ords) {
      const LeafDoc& d = docs_[ord];
      const std::size_t dist = hamming(q, d.fingerprint);
      ScoredResult r;
      r.signature = d.signature;
      r.hamming_distance = static_cast<int>(dist);
      r.similarity = similarity_from_distance(dist, dim_);
      r.leaf_id = leaf_id_;
      out.push_back(r);
    }
    return out;
  }

  std::size_t dim_ = 0;
  std::size_t m_ = 1;
  bool exhaustive_ = true;
  int leaf_id_ = 0;
  std::vector<LeafDoc> docs_;
  std::vector<std::unordered_map<std::uint64_t, std::vector<std::uint32_t>>> postings_;
};

inline std::vector<ScoredResult> leaf_knn(const LeafIndex& idx, const BinaryFingerprint& q,
                                          std::size_t k) {
  return idx.knn(q, k);
}

namespace detail {

inline constexpr char kPostingsMagic[8] = {'V', 'D', 'P', 'O', 'S', 'T', '0', '1'};
inline constexpr std::uint32_t kIndexFormatVersion = 1;

inline void put_u64(std::string& out, std::uint64_t v, int bytes = 8) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}

inline void put_varint(std::string& out, std::uint64_t v) {
  while (v >= 0x80) {
    out.push_back(static_cast<char>((v & 0x7F) | 0x80));
    v >>= 7;
  }
  out.push_back(static_cast<char>(v));
}

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}

  std::uint64_t u(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
      v |= std::uint64_t{static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)])}
           << (8 * i);
    }
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }

  std::uint64_t varint() {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
      need(1);
      const auto b = static_cast<unsigned char>(data_[pos_++]);
      v |= std::uint64_t{b & 0x7FU} << shift;
      if (!(b & 0x80)) return v;
    }
    throw IntegrityError("postings: varint overflow");
  }

  std::string_view take(std::size_t n) {
    need(n);
    std::string_view s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IntegrityError("postings: truncated file");
  }

  std::string data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw NotFoundError(fmt::format("cannot open '{}'", p.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline void LeafIndex::save(const std::filesystem::path& prefix) const {
  std::string bin(detail::kPostingsMagic, sizeof detail::kPostingsMagic);
  detail::put_u64(bin, detail::kIndexFormatVersion, 4);
  detail::put_u64(bin, dim_);
  detail::put_u64(bin, m_, 4);
  detail::put_u64(bin, docs_.size(), 4);
  detail::put_u64(bin, exhaustive_ ? 1 : 0, 1);
  detail::put_u64(bin, static_cast<std::uint64_t>(static_cast<std::uint32_t>(leaf_id_)), 4);
  for (const auto& block : postings_) {
    std::vector<std::uint64_t> values;
    values.reserve(block.size());
    for (const auto& [value, list] : block) values.push_back(value);
    std::sort(values.begin(), values.end());
    detail::put_u64(bin, values.size(), 4);
    for (std::uint64_t value : values) {
      const auto& list = block.at(value);
      detail::put_u64(bin, value);
      detail::put_u64(bin, list.size(), 4);
      std::uint32_t prev = 0;
      for (std::uint32_t ord : list) {
        detail::put_varint(bin, ord - prev);
        prev = ord;
      }
    }
  }
  std::string docs = nlohmann::json{{"format", "vdisc-doctable"},
                                    {"version", detail::kIndexFormatVersion},
                                    {"dim", dim_},
                                    {"count", docs_.size()}}
                         .dump() +
                     "\n";
  for (std::size_t i = 0; i < docs_.size(); ++i) {
    docs += nlohmann::json{{"ordinal", i},
                           {"signature", docs_[i].signature.hex()},
                           {"fingerprint", codec::base64_encode(docs_[i].fingerprint.to_bytes())},
                           {"meta_ref", docs_[i].meta_ref}}
                .dump() +
            "\n";
  }
  const auto write = [](const std::filesystem::path& p, const std::string& data) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error(fmt::format("failed writing '{}'", p.string()));
  };
  write(prefix.string() + ".postings", bin);
  write(prefix.string() + ".docs.jsonl", docs);
}

inline LeafIndex LeafIndex::load(const std::filesystem::path& prefix) {
  LeafIndex idx;
  detail::ByteReader in(detail::read_file(prefix.string() + ".postings"));
  if (in.take(8) != std::string_view(detail::kPostingsMagic, 8)) {
    throw IntegrityError(fmt::format("'{}.postings' has a bad magic header", prefix.string()));
  }
  if (in.u(4) != detail::kIndexFormatVersion) {
    throw IntegrityError("unsupported postings format version");
  }
  idx.dim_ = in.u(8);
  idx.m_ = in.u(4);
  const std::size_t n = in.u(4);
  idx.exhaustive_ = in.u(1) != 0;
  idx.leaf_id_ = static_cast<int>(static_cast<std::uint32_t>(in.u(4)));
  idx.postings_.resize(idx.m_);
  std::size_t total = 0;
  for (auto& block : idx.postings_) {
    const std::size_t tokens = in.u(4);
    for (std::size_t t = 0; t < tokens; ++t) {
      const std::uint64_t value = in.u(8);
      const std::size_t count = in.u(4);
      auto& list = block[value];
      list.reserve(count);
      std::uint64_t ord = 0;
      for (std::size_t i = 0; i < count; ++i) {
        ord += in.varint();
        if (ord >= n) throw IntegrityError("postings: ordinal out of range");
        list.push_back(static_cast<std::uint32_t>(ord));
      }
      total += count;
    }
  }
  if (!in.done() || total != idx.m_ * n) {
    throw IntegrityError(fmt::format("'{}.postings' is inconsistent", prefix.string()));
  }

  std::ifstream docs(prefix.string() + ".docs.jsonl");
  if (!docs) throw NotFoundError(fmt::format("cannot open '{}.docs.jsonl'", prefix.string()));
  std::string line;
  try {
    std::getline(docs, line);
    const auto header = nlohmann::json::parse(line);
    if (header.at("format") != "vdisc-doctable" ||
        header.at("version").get<std::uint32_t>() != detail::kIndexFormatVersion ||
        header.at("count").get<std::size_t>() != n) {
      throw IntegrityError("doc table header mismatch");
    }
    idx.docs_.reserve(n);
    while (std::getline(docs, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (j.at("ordinal").get<std::size_t>() != idx.docs_.size()) {
        throw IntegrityError("doc table ordinals are not dense");
      }
      idx.docs_.push_back(
          {Signature::from_hex(j.at("signature").get<std::string>()),
           BinaryFingerprint::from_bytes(
               codec::base64_decode(j.at("fingerprint").get<std::string>()), idx.dim_),
           j.at("meta_ref").get<std::uint32_t>()});
    }
  } catch (const nlohmann::json::exception& ex) {
    throw IntegrityError(fmt::format("'{}.docs.jsonl': {}", prefix.string(), ex.what()));
  } catch (const InputError& ex) {
    throw IntegrityError(fmt::format("'{}.docs.jsonl': {}", prefix.string(), ex.what()));
  }
  if (idx.docs_.size() != n) throw IntegrityError("doc table size mismatch");
  return idx;
}

}  // namespace vdisc
