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

// Serving index generations: built from the VisualJoin, published by
// swapping the CURRENT pointer.
//
//   indices/gen-NNNN/leaf-NNNN.postings
//   indices/gen-NNNN/leaf-NNNN.docs.jsonl
//   indices/gen-NNNN/documents.jsonl
//   indices/gen-NNNN/MANIFEST.json
//   indices/CURRENT

#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vdisc/core.hpp"
#include "vdisc/errors.hpp"
#include "vdisc/features.hpp"
#include "vdisc/index.hpp"
#include "vdisc/io.hpp"
#include "vdisc/pipeline.hpp"
#include "vdisc/serialization.hpp"

namespace vdisc::service {

namespace fs = std::filesystem;

struct IndexBuildOptions {
  std::size_t shards = 3;
  std::size_t m = 0;  // 0: default for the dim
  bool exhaustive_fallback = true;
};

/// Documents and their logical leaf shards.
struct Corpus {
  std::vector<ImageDocument> docs;
  std::unordered_map<Signature, std::size_t> by_signature;
  std::vector<LeafIndex> leaves;

  const ImageDocument* find(const Signature& s) const {
    const auto it = by_signature.find(s);
    return it == by_signature.end() ? nullptr : &docs[it->second];
  }
};

inline std::size_t leaf_for(const Signature& s, std::size_t leaves) { return s.prefix32() % leaves; }

/// Splits documents across `opts.shards` leaves by signature prefix.
inline Corpus build_corpus(std::vector<ImageDocument> docs, const IndexBuildOptions& opts) {
  if (opts.shards == 0) throw InputError("need at least one leaf shard");
  std::sort(docs.begin(), docs.end(), [](const auto& a, const auto& b) { return a.signature < b.signature; });
  Corpus c;
  const std::size_t dim = docs.empty() ? 64 : docs.front().fingerprint.dim();
  const std::size_t m = opts.m == 0 ? default_block_count(dim) : opts.m;
  std::vector<std::vector<LeafDoc>> parts(opts.shards);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (docs[i].fingerprint.dim() != dim || dim == 0) {
      throw DimensionError(fmt::format("document {} has a {}-bit fingerprint, expected {}", docs[i].signature.hex(),
                                       docs[i].fingerprint.dim(), dim));
    }
    if (!c.by_signature.emplace(docs[i].signature, i).second) {
      throw InputError(fmt::format("duplicate document {}", docs[i].signature.hex()));
    }
    parts[leaf_for(docs[i].signature, opts.shards)].push_back(
        {docs[i].signature, docs[i].fingerprint, static_cast<std::uint32_t>(i)});
  }
  for (std::size_t l = 0; l < opts.shards; ++l) {
    c.leaves.push_back(LeafIndex::build(std::move(parts[l]), m, opts.exhaustive_fallback, static_cast<int>(l)));
  }
  c.docs = std::move(docs);
  return c;
}

/// Serving documents from the join: catalog metadata plus the index
/// feature's embedding.
inline std::vector<ImageDocument> documents_from_join(const pipeline::VisualJoin& vj, const std::string& feature) {
  std::vector<ImageDocument> docs;
  for (std::size_t s = 0; s < vj.shard_count(); ++s) {
    for (const auto& fp : vj.scan(s)) {
      const auto it = fp.features.find(feature);
      if (it == fp.features.end()) {
        throw IntegrityError(fmt::format("join record {} lacks feature '{}'", fp.signature.hex(), feature));
      }
      ImageDocument d;
      if (fp.meta.is_object() && !fp.meta.empty()) {
        metadata_from_json(fp.meta, d);
      }
      d.signature = fp.signature;
      d.embedding = Embedding::from_bytes(it->second.data);
      d.fingerprint = binarize(d.embedding);
      docs.push_back(std::move(d));
    }
  }
  return docs;
}

inline fs::path indices_dir(const fs::path& root) { return root / "indices"; }

inline std::vector<std::string> list_generations(const fs::path& root) {
  std::vector<std::string> out;
  if (!fs::exists(indices_dir(root))) return out;
  for (const auto& e : fs::directory_iterator(indices_dir(root))) {
    const std::string name = e.path().filename().string();
    if (e.is_directory() && name.starts_with("gen-") && fs::exists(e.path() / pipeline::kManifest)) {
      out.push_back(name);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline void save_corpus(const Corpus& c, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<std::string> files;
  for (std::size_t l = 0; l < c.leaves.size(); ++l) {
    const std::string stem = fmt::format("leaf-{:04}", l);
    c.leaves[l].save(dir / stem);
    files.push_back(stem + ".postings");
    files.push_back(stem + ".docs.jsonl");
  }
  std::string docs;
  for (const auto& d : c.docs) docs += nlohmann::json(d).dump() + "\n";
  io::write_file(dir / "documents.jsonl", docs);
  files.push_back("documents.jsonl");
  const std::size_t dim = c.docs.empty() ? 0 : c.docs.front().fingerprint.dim();
  pipeline::write_manifest(dir,
                           {{"kind", "index-generation"},
                            {"leaves", c.leaves.size()},
                            {"documents", c.docs.size()},
                            {"dim", dim},
                            {"m", c.leaves.empty() ? 0 : c.leaves.front().block_count()}},
                           files);
}

inline Corpus load_corpus(const fs::path& dir) {
  const auto manifest = pipeline::read_valid_manifest(dir);
  if (!manifest) throw IntegrityError(fmt::format("index generation '{}' is missing or corrupt", dir.string()));
  Corpus c;
  for (const auto& line : pipeline::read_lines(dir / "documents.jsonl")) {
    c.docs.push_back(nlohmann::json::parse(line).get<ImageDocument>());
    c.by_signature.emplace(c.docs.back().signature, c.docs.size() - 1);
  }
  const std::size_t leaves = manifest->at("leaves").get<std::size_t>();
  for (std::size_t l = 0; l < leaves; ++l) c.leaves.push_back(LeafIndex::load(dir / fmt::format("leaf-{:04}", l)));
  return c;
}

/// Builds the next generation from the join; does not publish it.
inline std::string build_generation(const fs::path& root, const IndexBuildOptions& opts) {
  const pipeline::Layout layout{root};
  const auto cfg = pipeline::load_config(layout);
  std::string feature = cfg.index_feature;
  if (feature.empty()) {
    if (cfg.features.empty()) throw PreconditionError("no features registered");
    feature = cfg.features.front().name;
  }
  const auto vj = pipeline::VisualJoin::open(layout.join());
  const Corpus corpus = build_corpus(documents_from_join(vj, feature), opts);
  const auto existing = list_generations(root);
  const int next = existing.empty() ? 1 : std::stoi(existing.back().substr(4)) + 1;
  const std::string name = fmt::format("gen-{:04}", next);
  const fs::path staging = indices_dir(root) / ("." + name);
  fs::remove_all(staging);
  save_corpus(corpus, staging);
  fs::rename(staging, indices_dir(root) / name);
  return name;
}

/// Points CURRENT at `generation` (the newest one when empty).
inline std::string swap_generation(const fs::path& root, std::string generation = {}) {
  const auto gens = list_generations(root);
  if (generation.empty()) {
    if (gens.empty()) throw NotFoundError("no index generations have been built");
    generation = gens.back();
  } else if (std::find(gens.begin(), gens.end(), generation) == gens.end()) {
    throw NotFoundError(fmt::format("unknown index generation '{}'", generation));
  }
  io::atomic_write(indices_dir(root) / "CURRENT", generation + "\n");
  return generation;
}

inline std::string current_generation(const fs::path& root) {
  const fs::path p = indices_dir(root) / "CURRENT";
  if (!fs::exists(p)) throw NotFoundError("no index generation has been published");
  std::string name = io::read_file(p);
  while (!name.empty() && (name.back() == '\n' || name.back() == '\r')) name.pop_back();
  return name;
}

}  // namespace vdisc::service
