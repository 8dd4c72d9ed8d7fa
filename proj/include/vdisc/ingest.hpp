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

// Getting images into the pipeline catalog.

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vdisc/core.hpp"
#include "vdisc/detection.hpp"
#include "vdisc/errors.hpp"
#include "vdisc/io.hpp"
#include "vdisc/pipeline.hpp"
#include "vdisc/serialization.hpp"

namespace vdisc::pipeline {

inline constexpr const char* kIngestedEmbeddings = "ingest/embeddings.jsonl";
inline constexpr const char* kDefaultFeature = "embedding";

struct IngestStats {
  std::size_t added = 0;
  std::size_t unchanged = 0;
};

struct IngestOptions {
  double detection_threshold = kDefaultDetectionThreshold;
};

namespace detail {

inline void ensure_config(const Layout& layout, ExtractorSpec extractor) {
  if (fs::exists(layout.config())) return;
  PipelineConfig cfg;
  cfg.features.push_back({kDefaultFeature, 1, std::move(extractor)});
  cfg.index_feature = kDefaultFeature;
  save_config(layout, cfg);
}

/// Adds `doc` to the catalog. Re-ingesting an identical record is a no-op;
/// a conflicting one, or one landing in an already sealed epoch, is refused.
inline bool add_to_catalog(const Layout& layout, Catalog& catalog, ImageDocument doc) {
  doc.embedding = {};
  doc.fingerprint = {};
  if (const auto it = catalog.find(doc.signature); it != catalog.end()) {
    if (metadata_to_json(it->second) == metadata_to_json(doc)) return false;
    throw InputError(fmt::format("{} is already catalogued with different metadata", doc.signature.hex()));
  }
  const EpochId epoch = assign_epoch(doc.upload_time);
  if (epoch_sealed(layout, epoch)) {
    throw InputError(fmt::format("epoch {} is sealed; cannot add {}", epoch.str(), doc.signature.hex()));
  }
  catalog.emplace(doc.signature, std::move(doc));
  return true;
}

}  // namespace detail

/// Catalogues documents that arrive with embeddings; the embeddings go to a
/// table that a file-ingest extractor reads back.
inline IngestStats ingest_documents(const Layout& layout, std::span<const ImageDocument> docs,
                                    const IngestOptions& opts = {}) {
  if (docs.empty()) return {};
  const std::size_t dim = docs.front().embedding.dim();
  detail::ensure_config(layout, {ExtractorSpec::Kind::kFileIngest, dim, 0, kIngestedEmbeddings});

  Catalog catalog = load_catalog(layout);
  const fs::path table_path = layout.root / kIngestedEmbeddings;
  std::map<Signature, Embedding> table;
  if (fs::exists(table_path)) {
    for (auto& [sig, e] : load_embedding_table(table_path.string())) table.emplace(sig, std::move(e));
  }
  IngestStats stats;
  for (ImageDocument d : docs) {
    if (d.embedding.dim() != dim) throw DimensionError("ingested embeddings disagree on dim");
    if (!d.embedding.finite()) throw InputError(fmt::format("{} has non-finite embedding values", d.signature.hex()));
    d.detections = filter_detections(d.detections, opts.detection_threshold);
    const Signature sig = d.signature;
    Embedding e = d.embedding;
    if (detail::add_to_catalog(layout, catalog, std::move(d))) {
      table[sig] = std::move(e);
      ++stats.added;
    } else {
      ++stats.unchanged;
    }
  }
  std::string data;
  for (const auto& [sig, e] : table) {
    data += nlohmann::json{{"signature", sig.hex()}, {"embedding", embedding_to_json(e)}}.dump() + "\n";
  }
  io::atomic_write(table_path, data);
  save_catalog(layout, catalog);
  return stats;
}

inline IngestStats ingest_documents_file(const Layout& layout, const fs::path& path, const IngestOptions& opts = {}) {
  std::vector<ImageDocument> docs;
  std::ifstream in(path);
  if (!in) throw NotFoundError(fmt::format("cannot open '{}'", path.string()));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      docs.push_back(nlohmann::json::parse(line).get<ImageDocument>());
    } catch (const nlohmann::json::exception& ex) {
      throw InputError(fmt::format("{}:{}: {}", path.string(), lineno, ex.what()));
    }
  }
  return ingest_documents(layout, docs, opts);
}

struct ImageFileMeta {
  Timestamp upload_time{};
  int width = 256;
  int height = 256;
};

/// Catalogues raw image files; their bytes are kept for seeded-hash
/// extraction.
inline IngestStats ingest_image_files(const Layout& layout, std::span<const fs::path> files, const ImageFileMeta& meta,
                                      std::size_t dim = 64, std::uint64_t seed = 0) {
  detail::ensure_config(layout, {ExtractorSpec::Kind::kSeededHash, dim, seed, {}});
  Catalog catalog = load_catalog(layout);
  IngestStats stats;
  for (const auto& f : files) {
    const std::string bytes = io::read_file(f);
    ImageDocument d;
    d.signature = compute_signature(bytes);
    d.upload_time = meta.upload_time;
    d.width = meta.width;
    d.height = meta.height;
    if (!fs::exists(layout.image(d.signature))) io::atomic_write(layout.image(d.signature), bytes);
    if (detail::add_to_catalog(layout, catalog, std::move(d))) {
      ++stats.added;
    } else {
      ++stats.unchanged;
    }
  }
  save_catalog(layout, catalog);
  return stats;
}

/// JSON-lines {"signature", "detections": [...]}; replaces the detections
/// of catalogued images after the confidence filter.
inline std::size_t ingest_detections_file(const Layout& layout, const fs::path& path, const IngestOptions& opts = {}) {
  Catalog catalog = load_catalog(layout);
  std::ifstream in(path);
  if (!in) throw NotFoundError(fmt::format("cannot open '{}'", path.string()));
  std::string line;
  std::size_t updated = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const auto sig = Signature::from_hex(j.at("signature").get<std::string>());
    const auto it = catalog.find(sig);
    if (it == catalog.end()) throw NotFoundError(fmt::format("detections for unknown image {}", sig.hex()));
    auto dets = j.at("detections").get<std::vector<DetectedObject>>();
    for (const auto& d : dets) {
      if (!d.box.within(it->second.width, it->second.height)) {
        throw InputError(fmt::format("detection outside image bounds for {}", sig.hex()));
      }
    }
    it->second.detections = filter_detections(dets, opts.detection_threshold);
    ++updated;
  }
  save_catalog(layout, catalog);
  return updated;
}

}  // namespace vdisc::pipeline
