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

// Incremental fingerprinting pipeline.
//
// Five jobs, each restartable and idempotent:
//   1. group catalogued signatures into daily epochs and cut each epoch into
//      sorted shards;
//   2. diff every registered (feature, version) store against the known
//      epochs and plan the missing work;
//   3. split planned shards into work chunks and compute them on a worker
//      pool, each chunk committed by atomic rename, then recombine chunks
//      into per-shard feature files;
//   4. merge all features of an epoch into per-image fingerprints;
//   5. re-materialize every epoch into the VisualJoin: sorted, sharded files
//      with a block index for random access by signature.
//
// On-disk layout under the pipeline root:
//   catalog.jsonl                       ingested image metadata
//   images/<sig>.bin                    raw image bytes, when ingested as files
//   pipeline.json                       feature registry and sizing
//   epochs/<date>/shard-NNNN.txt        epoch shard membership
//   store/<feature>/v<ver>/<date>/      chunk outputs and shard feature files
//   fingerprints/<date>/                merged fingerprints
//   join/                               the VisualJoin
// A directory's MANIFEST.json is written last and carries shard checksums;
// a directory without a valid manifest is treated as absent.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "vdisc/codec.hpp"
#include "vdisc/core.hpp"
#include "vdisc/errors.hpp"
#include "vdisc/features.hpp"
#include "vdisc/io.hpp"
#include "vdisc/serialization.hpp"

namespace vdisc::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Epochs and shards

struct EpochId {
  std::chrono::sys_days day{};

  std::string str() const {
    const std::chrono::year_month_day ymd{day};
    return fmt::format("{:04}-{:02}-{:02}", static_cast<int>(ymd.year()),
                       static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  }

  static EpochId parse(const std::string& text) {
    return {std::chrono::floor<std::chrono::days>(parse_timestamp(text + "T00:00:00Z"))};
  }

  friend bool operator==(const EpochId& a, const EpochId& b) { return a.day == b.day; }
  friend bool operator<(const EpochId& a, const EpochId& b) { return a.day < b.day; }
};

inline EpochId assign_epoch(Timestamp upload_time) {
  return {std::chrono::floor<std::chrono::days>(upload_time)};
}

namespace detail {

/// Shard placement hash; uses different signature bytes than the join.
inline std::uint64_t placement_hash(const Signature& s) {
  std::uint64_t v = 0;
  for (int i = 4; i < 12; ++i) v = v << 8 | s.bytes[static_cast<std::size_t>(i)];
  return v;
}

}  // namespace detail

/// ceil(n / target) shards (at least one), members placed by a hash of the
/// signature and sorted within each shard.
inline std::vector<std::vector<Signature>> shard_epoch(std::span<const Signature> members,
                                                       std::size_t target_shard_size) {
  if (target_shard_size == 0) throw InputError("target shard size must be positive");
  std::unordered_set<Signature> seen;
  for (const auto& s : members) {
    if (!seen.insert(s).second) throw InputError(fmt::format("duplicate signature {}", s.hex()));
  }
  const std::size_t count = std::max<std::size_t>(1, (members.size() + target_shard_size - 1) / target_shard_size);
  std::vector<std::vector<Signature>> shards(count);
  for (const auto& s : members) shards[detail::placement_hash(s) % count].push_back(s);
  for (auto& shard : shards) std::sort(shard.begin(), shard.end());
  return shards;
}

// ---------------------------------------------------------------------------
// Configuration

struct FeatureSpec {
  std::string name;
  int version = 1;
  ExtractorSpec extractor;

  bool operator==(const FeatureSpec&) const = default;
};

inline json extractor_to_json(const ExtractorSpec& e) {
  json j = {{"kind", e.kind == ExtractorSpec::Kind::kSeededHash ? "seeded-hash" : "file-ingest"},
            {"dim", e.dim}};
  if (e.kind == ExtractorSpec::Kind::kSeededHash) j["seed"] = e.seed;
  if (!e.path.empty()) j["path"] = e.path;
  return j;
}

inline ExtractorSpec extractor_from_json(const json& j) {
  ExtractorSpec e;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "seeded-hash") {
    e.kind = ExtractorSpec::Kind::kSeededHash;
  } else if (kind == "file-ingest") {
    e.kind = ExtractorSpec::Kind::kFileIngest;
  } else {
    throw InputError(fmt::format("unknown extractor kind '{}'", kind));
  }
  e.dim = j.at("dim").get<std::size_t>();
  e.seed = j.value("seed", std::uint64_t{0});
  e.path = j.value("path", std::string{});
  e.validate();
  return e;
}

struct PipelineConfig {
  std::vector<FeatureSpec> features;
  std::size_t target_shard_size = 200000;
  std::size_t chunk_members = 1000;
  std::size_t join_shards = 4;
  std::size_t join_block_records = 64;
  std::string index_feature;  // feature whose data is the serving embedding

  const FeatureSpec& feature(const std::string& name) const {
    for (const auto& f : features) {
      if (f.name == name) return f;
    }
    throw NotFoundError(fmt::format("feature '{}' is not registered", name));
  }

  void validate() const {
    std::set<std::string> names;
    for (const auto& f : features) {
      if (f.name.empty() || f.name.find_first_not_of("abcdefghijklmnopqrstuvwxyz0123456789_-") !=
                                std::string::npos) {
        throw InputError(fmt::format("feature name '{}' must match [a-z0-9_-]+", f.name));
      }
      if (f.version < 1) throw InputError(fmt::format("feature '{}' version must be >= 1", f.name));
      if (!names.insert(f.name).second) throw InputError(fmt::format("feature '{}' registered twice", f.name));
      f.extractor.validate();
    }
    if (target_shard_size == 0 || chunk_members == 0 || join_shards == 0 || join_block_records == 0) {
      throw InputError("pipeline sizes must be positive");
    }
    if (!index_feature.empty()) (void)feature(index_feature);
  }

  json to_json() const {
    json fs_json = json::array();
    for (const auto& f : features) {
      fs_json.push_back({{"name", f.name}, {"version", f.version}, {"extractor", extractor_to_json(f.extractor)}});
    }
    return {{"features", fs_json},
            {"target_shard_size", target_shard_size},
            {"chunk_members", chunk_members},
            {"join_shards", join_shards},
            {"join_block_records", join_block_records},
            {"index_feature", index_feature}};
  }

  static PipelineConfig from_json(const json& j) {
    PipelineConfig c;
    for (const auto& f : j.at("features")) {
      c.features.push_back({f.at("name").get<std::string>(), f.value("version", 1),
                            extractor_from_json(f.at("extractor"))});
    }
    c.target_shard_size = j.value("target_shard_size", c.target_shard_size);
    c.chunk_members = j.value("chunk_members", c.chunk_members);
    c.join_shards = j.value("join_shards", c.join_shards);
    c.join_block_records = j.value("join_block_records", c.join_block_records);
    c.index_feature = j.value("index_feature", std::string{});
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Layout, manifests, catalog

struct Layout {
  fs::path root;

  fs::path config() const { return root / "pipeline.json"; }
  fs::path catalog() const { return root / "catalog.jsonl"; }
  fs::path images() const { return root / "images"; }
  fs::path image(const Signature& s) const { return images() / (s.hex() + ".bin"); }
  fs::path lock() const { return root / ".lock"; }
  fs::path epochs() const { return root / "epochs"; }
  fs::path epoch(const EpochId& e) const { return epochs() / e.str(); }
  fs::path store(const std::string& feature, int version, const EpochId& e) const {
    return root / "store" / feature / fmt::format("v{}", version) / e.str();
  }
  fs::path fingerprints(const EpochId& e) const { return root / "fingerprints" / e.str(); }
  fs::path join() const { return root / "join"; }

  /// Relative extractor paths resolve against the root.
  ExtractorSpec resolve(ExtractorSpec e) const {
    if (!e.path.empty() && fs::path(e.path).is_relative()) e.path = (root / e.path).string();
    return e;
  }
};

inline std::string shard_file_name(std::size_t i, std::string_view ext) {
  return fmt::format("shard-{:04}.{}", i, ext);
}

inline PipelineConfig load_config(const Layout& layout) {
  try {
    return PipelineConfig::from_json(json::parse(io::read_file(layout.config())));
  } catch (const json::exception& ex) {
    throw InputError(fmt::format("{}: {}", layout.config().string(), ex.what()));
  }
}

inline void save_config(const Layout& layout, const PipelineConfig& c) {
  c.validate();
  io::atomic_write(layout.config(), c.to_json().dump(2) + "\n");
}

inline constexpr const char* kManifest = "MANIFEST.json";

/// Records each listed file's checksum; written last.
inline void write_manifest(const fs::path& dir, json body, std::span<const std::string> files) {
  json shards = json::array();
  for (const auto& f : files) {
    const std::string data = io::read_file(dir / f);
    shards.push_back({{"file", f}, {"bytes", data.size()}, {"checksum", io::checksum(data)}});
  }
  body["shards"] = shards;
  io::atomic_write(dir / kManifest, body.dump(2) + "\n");
}

/// The manifest when it exists and every shard it lists matches its
/// checksum; otherwise nothing.
inline std::optional<json> read_valid_manifest(const fs::path& dir) {
  const fs::path path = dir / kManifest;
  if (!fs::exists(path)) return std::nullopt;
  try {
    json m = json::parse(io::read_file(path));
    for (const auto& s : m.at("shards")) {
      const fs::path file = dir / s.at("file").get<std::string>();
      if (!fs::exists(file) || io::file_checksum(file) != s.at("checksum").get<std::string>()) {
        spdlog::warn("'{}' fails its checksum; treating '{}' as incomplete", file.string(), dir.string());
        return std::nullopt;
      }
    }
    return m;
  } catch (const json::exception& ex) {
    spdlog::warn("unreadable manifest '{}': {}", path.string(), ex.what());
    return std::nullopt;
  }
}

using Catalog = std::map<Signature, ImageDocument>;

inline Catalog load_catalog(const Layout& layout) {
  Catalog out;
  if (!fs::exists(layout.catalog())) return out;
  std::ifstream in(layout.catalog());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ImageDocument d;
    metadata_from_json(json::parse(line), d);
    out[d.signature] = std::move(d);
  }
  return out;
}

inline void save_catalog(const Layout& layout, const Catalog& catalog) {
  std::string data;
  for (const auto& [sig, d] : catalog) data += metadata_to_json(d).dump() + "\n";
  io::atomic_write(layout.catalog(), data);
}

// ---------------------------------------------------------------------------
// Job 1: epochs

inline std::vector<std::vector<Signature>> read_epoch_shards(const Layout& layout, const EpochId& e) {
  const auto manifest = read_valid_manifest(layout.epoch(e));
  if (!manifest) throw PreconditionError(fmt::format("epoch {} has not been compiled", e.str()));
  std::vector<std::vector<Signature>> shards;
  for (const auto& s : manifest->at("shards")) {
    std::ifstream in(layout.epoch(e) / s.at("file").get<std::string>());
    std::vector<Signature> members;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) members.push_back(Signature::from_hex(line));
    }
    shards.push_back(std::move(members));
  }
  return shards;
}

inline bool epoch_sealed(const Layout& layout, const EpochId& e) {
  return read_valid_manifest(layout.epoch(e)).has_value();
}

inline std::set<EpochId> known_epochs(const Layout& layout) {
  std::set<EpochId> out;
  if (!fs::exists(layout.epochs())) return out;
  for (const auto& entry : fs::directory_iterator(layout.epochs())) {
    if (!entry.is_directory() || io::is_hidden(entry.path())) continue;
    const EpochId e = EpochId::parse(entry.path().filename().string());
    if (epoch_sealed(layout, e)) out.insert(e);
  }
  return out;
}

/// Seals every catalogued epoch that has no manifest yet. Returns the
/// epochs sealed by this call.
inline std::vector<EpochId> compile_epochs(const Layout& layout, const Catalog& catalog,
                                           std::size_t target_shard_size) {
  std::map<EpochId, std::vector<Signature>> grouped;
  for (const auto& [sig, d] : catalog) grouped[assign_epoch(d.upload_time)].push_back(sig);
  std::vector<EpochId> sealed;
  for (const auto& [epoch, members] : grouped) {
    if (epoch_sealed(layout, epoch)) continue;
    const fs::path dir = layout.epoch(epoch);
    fs::create_directories(dir);
    std::vector<std::string> files;
    const auto shards = shard_epoch(members, target_shard_size);
    for (std::size_t i = 0; i < shards.size(); ++i) {
      std::string data;
      for (const auto& s : shards[i]) data += s.hex() + "\n";
      files.push_back(shard_file_name(i, "txt"));
      io::atomic_write(dir / files.back(), data);
    }
    write_manifest(dir, {{"kind", "epoch"}, {"epoch", epoch.str()}, {"members", members.size()}}, files);
    sealed.push_back(epoch);
  }
  return sealed;
}

// ---------------------------------------------------------------------------
// Job 2: planning

struct FeatureStore {
  std::string feature;
  int version = 1;
  std::set<EpochId> epochs;  // complete epochs only
};

inline FeatureStore discover_store(const Layout& layout, const FeatureSpec& spec) {
  FeatureStore store{spec.name, spec.version, {}};
  const fs::path dir = layout.root / "store" / spec.name / fmt::format("v{}", spec.version);
  if (!fs::exists(dir)) return store;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_directory() || io::is_hidden(entry.path())) continue;
    if (read_valid_manifest(entry.path())) {
      store.epochs.insert(EpochId::parse(entry.path().filename().string()));
    }
  }
  return store;
}

struct Job {
  std::string feature;
  int version = 1;
  EpochId epoch;

  friend bool operator==(const Job&, const Job&) = default;
  friend bool operator<(const Job& a, const Job& b) {
    if (a.feature != b.feature) return a.feature < b.feature;
    if (a.version != b.version) return a.version < b.version;
    return a.epoch < b.epoch;
  }
};

/// Every (store, known epoch) pair the store has not completed, ordered by
/// feature, version, epoch.
inline std::vector<Job> plan_missing(std::span<const FeatureStore> stores, const std::set<EpochId>& known) {
  std::vector<Job> plan;
  for (const auto& store : stores) {
    for (const auto& e : known) {
      if (!store.epochs.contains(e)) plan.push_back({store.feature, store.version, e});
    }
  }
  std::sort(plan.begin(), plan.end());
  return plan;
}

// ---------------------------------------------------------------------------
// Job 3: chunks

struct WorkChunk {
  std::string feature;
  int version = 1;
  EpochId epoch;
  std::size_t shard_index = 0;
  std::size_t begin = 0;  // member range within the shard
  std::size_t end = 0;
  std::vector<Signature> members;
  std::string chunk_id;
};

inline std::string chunk_id_for(const std::string& feature, int version, const EpochId& e,
                                std::size_t shard, std::size_t begin, std::size_t end) {
  return codec::md5_hex(fmt::format("{}|v{}|{}|{}|{}|{}", feature, version, e.str(), shard, begin, end));
}

/// Consecutive slices of at most `max_members`; an empty shard has no chunks.
inline std::vector<WorkChunk> chunk_shard(const Job& job, std::size_t shard_index,
                                          std::span<const Signature> shard, std::size_t max_members) {
  if (max_members == 0) throw InputError("chunk size must be positive");
  std::vector<WorkChunk> out;
  for (std::size_t begin = 0; begin < shard.size(); begin += max_members) {
    const std::size_t end = std::min(shard.size(), begin + max_members);
    out.push_back({job.feature, job.version, job.epoch, shard_index, begin, end,
                   {shard.begin() + static_cast<std::ptrdiff_t>(begin),
                    shard.begin() + static_cast<std::ptrdiff_t>(end)},
                   chunk_id_for(job.feature, job.version, job.epoch, shard_index, begin, end)});
  }
  return out;
}

/// Where pipeline workers read image content.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual std::optional<std::vector<std::uint8_t>> fetch(const Signature& s) const = 0;
};

class MapImageSource : public ImageSource {
 public:
  void put(const Signature& s, std::vector<std::uint8_t> bytes) { images_[s] = std::move(bytes); }

  std::optional<std::vector<std::uint8_t>> fetch(const Signature& s) const override {
    const auto it = images_.find(s);
    if (it == images_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::unordered_map<Signature, std::vector<std::uint8_t>> images_;
};

/// Serves images/<sig>.bin when present. Catalogued documents ingested
/// without pixels stand in with their 16 signature bytes.
class CatalogImageSource : public ImageSource {
 public:
  CatalogImageSource(Layout layout, const Catalog& catalog) : layout_(std::move(layout)) {
    for (const auto& [sig, d] : catalog) known_.insert(sig);
  }

  std::optional<std::vector<std::uint8_t>> fetch(const Signature& s) const override {
    const fs::path p = layout_.image(s);
    if (fs::exists(p)) {
      const std::string data = io::read_file(p);
      return std::vector<std::uint8_t>(data.begin(), data.end());
    }
    if (known_.contains(s)) return std::vector<std::uint8_t>(s.bytes.begin(), s.bytes.end());
    return std::nullopt;
  }

 private:
  Layout layout_;
  std::unordered_set<Signature> known_;
};

/// Feature payload of one image: version plus raw bytes.
struct FeatureValue {
  int version = 1;
  std::vector<std::uint8_t> data;

  bool operator==(const FeatureValue&) const = default;
};

/// The merged bundle of every feature computed for one image.
struct Fingerprint {
  Signature signature;
  std::map<std::string, FeatureValue> features;
  json meta = json::object();

  bool operator==(const Fingerprint&) const = default;
};

/// Records keep "signature" first so readers can key a line without
/// parsing it.
inline std::string fingerprint_line(const Fingerprint& fp, bool with_meta) {
  json features = json::object();
  for (const auto& [name, v] : fp.features) {
    features[name] = {{"version", v.version}, {"data", codec::base64_encode(v.data)}};
  }
  std::string line = fmt::format(R"({{"signature":"{}","features":{})", fp.signature.hex(), features.dump());
  if (with_meta) line += fmt::format(R"(,"meta":{})", fp.meta.dump());
  line += "}";
  return line;
}

inline constexpr std::size_t kKeyOffset = 14;  // length of {"signature":"

inline std::string_view line_key(std::string_view line) {
  if (line.size() < kKeyOffset + 32) throw IntegrityError("record line too short");
  return line.substr(kKeyOffset, 32);
}

inline Fingerprint parse_fingerprint_line(std::string_view line) {
  try {
    const json j = json::parse(line);
    Fingerprint fp;
    fp.signature = Signature::from_hex(j.at("signature").get<std::string>());
    for (const auto& [name, v] : j.at("features").items()) {
      fp.features[name] = {v.at("version").get<int>(), codec::base64_decode(v.at("data").get<std::string>())};
    }
    if (j.contains("meta")) fp.meta = j["meta"];
    return fp;
  } catch (const json::exception& ex) {
    throw IntegrityError(fmt::format("malformed fingerprint record: {}", ex.what()));
  }
}

inline std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw NotFoundError(fmt::format("cannot open '{}'", p.string()));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(std::move(line));
  }
  return lines;
}

/// Called after a chunk's output is staged and before it is committed.
/// Throwing from it models a worker dying mid-chunk.
using ChunkHook = std::function<void(const WorkChunk&)>;

inline fs::path chunk_output_path(const Layout& layout, const WorkChunk& c) {
  return layout.store(c.feature, c.version, c.epoch) / "chunks" / (c.chunk_id + ".jsonl");
}

/// Computes one chunk and commits it with an atomic rename. A missing
/// member fails the whole chunk before anything is written.
inline void run_chunk(const WorkChunk& chunk, const Extractor& extractor, const ImageSource& images,
                      const fs::path& out, const ChunkHook& before_commit = {}) {
  std::string data;
  for (const auto& sig : chunk.members) {
    const auto bytes = images.fetch(sig);
    if (!bytes) {
      throw NotFoundError(fmt::format("chunk {}: image {} unavailable", chunk.chunk_id, sig.hex()));
    }
    Fingerprint fp{sig, {{chunk.feature, {chunk.version, extractor.extract(sig, *bytes).to_bytes()}}}, {}};
    data += fingerprint_line(fp, false) + "\n";
  }
  fs::create_directories(out.parent_path());
  const fs::path tmp = io::temp_path_for(out);
  io::write_file(tmp, data);
  if (before_commit) before_commit(chunk);
  fs::rename(tmp, out);
}

/// Concatenates a job's chunk outputs into shard feature files and seals
/// the store epoch with its manifest.
inline void recombine(const Layout& layout, const Job& job, std::span<const std::vector<WorkChunk>> chunks_by_shard) {
  const fs::path dir = layout.store(job.feature, job.version, job.epoch);
  fs::create_directories(dir);
  std::vector<std::string> files;
  for (std::size_t s = 0; s < chunks_by_shard.size(); ++s) {
    std::string data;
    for (const auto& c : chunks_by_shard[s]) data += io::read_file(chunk_output_path(layout, c));
    files.push_back(shard_file_name(s, "jsonl"));
    io::atomic_write(dir / files.back(), data);
  }
  write_manifest(dir,
                 {{"kind", "feature"}, {"feature", job.feature}, {"version", job.version}, {"epoch", job.epoch.str()}},
                 files);
}

// ---------------------------------------------------------------------------
// Job 4: merge

inline std::vector<std::pair<std::string, int>> feature_set(std::span<const FeatureSpec> features) {
  std::vector<std::pair<std::string, int>> out;
  for (const auto& f : features) out.emplace_back(f.name, f.version);
  std::sort(out.begin(), out.end());
  return out;
}

/// True when the epoch's merged fingerprints cover exactly `features`.
inline bool epoch_merged(const Layout& layout, const EpochId& e, std::span<const FeatureSpec> features) {
  const auto m = read_valid_manifest(layout.fingerprints(e));
  if (!m) return false;
  json expected = json::array();
  for (const auto& [name, version] : feature_set(features)) expected.push_back({name, version});
  return m->value("features", json::array()) == expected;
}

inline void merge_epoch(const Layout& layout, const EpochId& e, std::span<const FeatureSpec> features) {
  std::vector<std::string> missing;
  for (const auto& f : features) {
    if (!read_valid_manifest(layout.store(f.name, f.version, e))) {
      missing.push_back(fmt::format("{} v{} @ {}", f.name, f.version, e.str()));
    }
  }
  if (!missing.empty()) {
    throw PreconditionError(fmt::format("cannot merge epoch {}; incomplete features: {}", e.str(),
                                        fmt::join(missing, ", ")));
  }
  const auto shards = read_epoch_shards(layout, e);
  const fs::path dir = layout.fingerprints(e);
  fs::create_directories(dir);
  std::vector<std::string> files;
  for (std::size_t s = 0; s < shards.size(); ++s) {
    std::vector<Fingerprint> merged(shards[s].size());
    for (std::size_t i = 0; i < shards[s].size(); ++i) merged[i].signature = shards[s][i];
    for (const auto& f : features) {
      const auto lines = read_lines(layout.store(f.name, f.version, e) / shard_file_name(s, "jsonl"));
      if (lines.size() != merged.size()) {
        throw IntegrityError(fmt::format("{} v{} shard {} of {} has {} records, expected {}", f.name, f.version, s,
                                         e.str(), lines.size(), merged.size()));
      }
      for (std::size_t i = 0; i < lines.size(); ++i) {
        Fingerprint part = parse_fingerprint_line(lines[i]);
        if (part.signature != merged[i].signature) {
          throw IntegrityError(fmt::format("{} v{} shard {} of {} is out of order", f.name, f.version, s, e.str()));
        }
        merged[i].features.merge(part.features);
      }
    }
    std::string data;
    for (const auto& fp : merged) data += fingerprint_line(fp, false) + "\n";
    files.push_back(shard_file_name(s, "jsonl"));
    io::atomic_write(dir / files.back(), data);
  }
  json fset = json::array();
  for (const auto& [name, version] : feature_set(features)) fset.push_back({name, version});
  write_manifest(dir, {{"kind", "fingerprints"}, {"epoch", e.str()}, {"features", fset}}, files);
}

// ---------------------------------------------------------------------------
// Job 5: VisualJoin

/// Read side of the join. Opening verifies every shard and sidecar against
/// the manifest; lookups go through the sidecar block index and a binary
/// search inside one block.
class VisualJoin {
 public:
  static VisualJoin open(const fs::path& dir) {
    const fs::path manifest_path = dir / kManifest;
    if (!fs::exists(manifest_path)) throw NotFoundError(fmt::format("no VisualJoin at '{}'", dir.string()));
    VisualJoin vj;
    vj.dir_ = dir;
    try {
      const json m = json::parse(io::read_file(manifest_path));
      std::map<std::string, std::string> sums;
      for (const auto& s : m.at("shards")) sums[s.at("file")] = s.at("checksum");
      const std::size_t n = m.at("join_shards").get<std::size_t>();
      for (std::size_t i = 0; i < n; ++i) {
        Shard shard;
        shard.data = dir / shard_file_name(i, "jsonl");
        const fs::path idx = dir / shard_file_name(i, "idx");
        for (const fs::path& p : {shard.data, idx}) {
          const auto it = sums.find(p.filename().string());
          if (it == sums.end() || !fs::exists(p) || io::file_checksum(p) != it->second) {
            throw IntegrityError(fmt::format("VisualJoin file '{}' fails its checksum", p.string()));
          }
        }
        const json side = json::parse(io::read_file(idx));
        shard.bytes = side.at("bytes").get<std::uint64_t>();
        shard.records = side.at("records").get<std::size_t>();
        for (const auto& b : side.at("blocks")) {
          shard.block_keys.push_back(b.at(0).get<std::string>());
          shard.block_offsets.push_back(b.at(1).get<std::uint64_t>());
        }
        vj.records_ += shard.records;
        vj.shards_.push_back(std::move(shard));
      }
    } catch (const json::exception& ex) {
      throw IntegrityError(fmt::format("VisualJoin at '{}' is malformed: {}", dir.string(), ex.what()));
    }
    return vj;
  }

  std::size_t shard_count() const { return shards_.size(); }
  std::size_t size() const { return records_; }

  std::size_t shard_of(const Signature& s) const { return s.prefix32() % shards_.size(); }

  std::optional<Fingerprint> lookup(const Signature& sig) const {
    if (shards_.empty()) return std::nullopt;
    const Shard& shard = shards_[shard_of(sig)];
    const std::string key = sig.hex();
    const auto it = std::upper_bound(shard.block_keys.begin(), shard.block_keys.end(), key);
    if (it == shard.block_keys.begin()) return std::nullopt;
    const std::size_t block = static_cast<std::size_t>(it - shard.block_keys.begin()) - 1;
    const std::uint64_t begin = shard.block_offsets[block];
    const std::uint64_t end = block + 1 < shard.block_offsets.size() ? shard.block_offsets[block + 1] : shard.bytes;

    std::ifstream in(shard.data, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(begin));
    std::string buf(end - begin, '\0');
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!in) throw IntegrityError(fmt::format("short read in '{}'", shard.data.string()));

    std::vector<std::string_view> lines;
    std::string_view rest(buf);
    while (!rest.empty()) {
      const auto nl = rest.find('\n');
      lines.push_back(rest.substr(0, nl));
      if (nl == std::string_view::npos) break;
      rest.remove_prefix(nl + 1);
    }
    const auto hit = std::lower_bound(lines.begin(), lines.end(), key,
                                      [](std::string_view line, const std::string& k) { return line_key(line) < k; });
    if (hit == lines.end() || line_key(*hit) != key) return std::nullopt;
    return parse_fingerprint_line(*hit);
  }

  /// Every record of one shard, in file order.
  std::vector<Fingerprint> scan(std::size_t shard) const {
    std::vector<Fingerprint> out;
    for (const auto& line : read_lines(shards_.at(shard).data)) out.push_back(parse_fingerprint_line(line));
    return out;
  }

  /// Full-scan check that keys strictly increase within every shard and
  /// that each record sits in the shard its signature maps to.
  bool check_sorted() const {
    for (std::size_t s = 0; s < shards_.size(); ++s) {
      std::string prev;
      for (const auto& line : read_lines(shards_[s].data)) {
        const std::string key(line_key(line));
        if (!prev.empty() && !(prev < key)) return false;
        if (shard_of(Signature::from_hex(key)) != s) return false;
        prev = key;
      }
    }
    return true;
  }

 private:
  struct Shard {
    fs::path data;
    std::uint64_t bytes = 0;
    std::size_t records = 0;
    std::vector<std::string> block_keys;
    std::vector<std::uint64_t> block_offsets;
  };

  fs::path dir_;
  std::vector<Shard> shards_;
  std::size_t records_ = 0;
};

/// Rewrites the whole join from every listed epoch's merged fingerprints,
/// attaching catalog metadata. Built in a sibling directory and swapped in.
inline std::size_t materialize_join(const Layout& layout, const std::set<EpochId>& epochs, const Catalog& catalog,
                                    std::size_t join_shards, std::size_t block_records) {
  if (join_shards == 0 || block_records == 0) throw InputError("join sizing must be positive");
  std::vector<std::vector<std::pair<std::string, std::string>>> buckets(join_shards);
  for (const auto& e : epochs) {
    const auto m = read_valid_manifest(layout.fingerprints(e));
    if (!m) throw PreconditionError(fmt::format("epoch {} has no merged fingerprints", e.str()));
    for (const auto& s : m->at("shards")) {
      for (const auto& line : read_lines(layout.fingerprints(e) / s.at("file").get<std::string>())) {
        Fingerprint fp = parse_fingerprint_line(line);
        if (const auto it = catalog.find(fp.signature); it != catalog.end()) fp.meta = metadata_to_json(it->second);
        buckets[fp.signature.prefix32() % join_shards].emplace_back(fp.signature.hex(), fingerprint_line(fp, true));
      }
    }
  }
  const fs::path staging = layout.root / ".join-staging";
  fs::remove_all(staging);
  fs::create_directories(staging);
  std::vector<std::string> files;
  std::size_t total = 0;
  for (std::size_t s = 0; s < join_shards; ++s) {
    auto& bucket = buckets[s];
    std::sort(bucket.begin(), bucket.end());
    for (std::size_t i = 1; i < bucket.size(); ++i) {
      if (bucket[i].first == bucket[i - 1].first) {
        throw IntegrityError(fmt::format("signature {} appears in two epochs", bucket[i].first));
      }
    }
    std::string data;
    json blocks = json::array();
    for (std::size_t i = 0; i < bucket.size(); ++i) {
      if (i % block_records == 0) blocks.push_back({bucket[i].first, data.size()});
      data += bucket[i].second + "\n";
    }
    total += bucket.size();
    files.push_back(shard_file_name(s, "jsonl"));
    io::write_file(staging / files.back(), data);
    files.push_back(shard_file_name(s, "idx"));
    io::write_file(staging / files.back(),
                   json{{"bytes", data.size()}, {"records", bucket.size()}, {"blocks", blocks}}.dump() + "\n");
  }
  json eps = json::array();
  for (const auto& e : epochs) eps.push_back(e.str());
  write_manifest(staging, {{"kind", "visual-join"}, {"join_shards", join_shards}, {"epochs", eps}, {"records", total}},
                 files);
  const fs::path old = layout.root / ".join-old";
  fs::remove_all(old);
  if (fs::exists(layout.join())) fs::rename(layout.join(), old);
  fs::rename(staging, layout.join());
  fs::remove_all(old);
  return total;
}

// ---------------------------------------------------------------------------
// Orchestration

struct RunOptions {
  unsigned workers = 1;
  ChunkHook before_commit;
};

struct RunStats {
  std::vector<EpochId> epochs_sealed;
  std::vector<Job> jobs_planned;
  std::size_t chunks_planned = 0;
  std::size_t chunks_executed = 0;
  std::size_t chunks_reused = 0;
  std::size_t chunks_failed = 0;
  std::size_t jobs_completed = 0;
  std::vector<EpochId> epochs_merged;
  std::size_t join_records = 0;
  bool join_rebuilt = false;
};

inline json to_json(const RunStats& s) {
  json planned = json::array();
  for (const auto& j : s.jobs_planned) planned.push_back({j.feature, j.version, j.epoch.str()});
  json sealed = json::array();
  for (const auto& e : s.epochs_sealed) sealed.push_back(e.str());
  json merged = json::array();
  for (const auto& e : s.epochs_merged) merged.push_back(e.str());
  return {{"epochs_sealed", sealed},       {"jobs_planned", planned},
          {"chunks_planned", s.chunks_planned}, {"chunks_executed", s.chunks_executed},
          {"chunks_reused", s.chunks_reused},   {"chunks_failed", s.chunks_failed},
          {"jobs_completed", s.jobs_completed}, {"epochs_merged", merged},
          {"join_records", s.join_records},     {"join_rebuilt", s.join_rebuilt}};
}

class Pipeline {
 public:
  explicit Pipeline(fs::path root) : layout_{std::move(root)} {}

  const Layout& layout() const { return layout_; }
  PipelineConfig config() const { return load_config(layout_); }

  /// Job 1 followed by job 2.
  std::vector<Job> plan(std::vector<EpochId>* sealed = nullptr) const {
    const PipelineConfig cfg = config();
    auto newly = compile_epochs(layout_, load_catalog(layout_), cfg.target_shard_size);
    if (sealed) *sealed = std::move(newly);
    std::vector<FeatureStore> stores;
    for (const auto& f : cfg.features) stores.push_back(discover_store(layout_, f));
    return plan_missing(stores, known_epochs(layout_));
  }

  /// Jobs 1-3: executes every planned chunk on `workers` threads. Chunks
  /// already committed by an earlier, interrupted run are reused.
  RunStats run(const RunOptions& opts = {}) {
    io::LockFile lock(layout_.lock());
    return run_locked(opts);
  }

  /// Job 4 for every epoch whose merged fingerprints are missing or stale.
  RunStats merge() {
    io::LockFile lock(layout_.lock());
    RunStats stats;
    merge_locked(stats);
    return stats;
  }

  /// Job 5.
  RunStats join() {
    io::LockFile lock(layout_.lock());
    RunStats stats;
    join_locked(stats);
    return stats;
  }

  /// All five jobs. The join is re-materialized only when something upstream
  /// changed or it is missing.
  RunStats run_all(const RunOptions& opts = {}) {
    io::LockFile lock(layout_.lock());
    RunStats stats = run_locked(opts);
    if (stats.chunks_failed > 0) return stats;
    merge_locked(stats);
    if (!stats.epochs_merged.empty() || !fs::exists(layout_.join() / kManifest)) join_locked(stats);
    return stats;
  }

  VisualJoin open_join() const { return VisualJoin::open(layout_.join()); }

 private:
  RunStats run_locked(const RunOptions& opts) {
    RunStats stats;
    const PipelineConfig cfg = config();
    stats.jobs_planned = plan(&stats.epochs_sealed);
    if (stats.jobs_planned.empty()) return stats;

    const Catalog catalog = load_catalog(layout_);
    const CatalogImageSource images(layout_, catalog);
    std::map<std::string, Extractor> extractors;
    for (const auto& f : cfg.features) {
      extractors.emplace(f.name, Extractor(layout_.resolve(f.extractor)));
    }

    struct PlannedJob {
      Job job;
      std::vector<std::vector<WorkChunk>> chunks_by_shard;
    };
    std::vector<PlannedJob> jobs;
    std::vector<const WorkChunk*> pending;
    for (const auto& job : stats.jobs_planned) {
      PlannedJob pj{job, {}};
      const auto shards = read_epoch_shards(layout_, job.epoch);
      for (std::size_t s = 0; s < shards.size(); ++s) {
        pj.chunks_by_shard.push_back(chunk_shard(job, s, shards[s], cfg.chunk_members));
      }
      jobs.push_back(std::move(pj));
    }
    for (const auto& pj : jobs) {
      for (const auto& shard : pj.chunks_by_shard) {
        for (const auto& c : shard) {
          ++stats.chunks_planned;
          if (fs::exists(chunk_output_path(layout_, c))) {
            ++stats.chunks_reused;
          } else {
            pending.push_back(&c);
          }
        }
      }
    }

    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> executed{0};
    std::mutex failures_mu;
    std::set<std::string> failed;
    auto worker = [&] {
      for (std::size_t i = next++; i < pending.size(); i = next++) {
        const WorkChunk& c = *pending[i];
        try {
          run_chunk(c, extractors.at(c.feature), images, chunk_output_path(layout_, c), opts.before_commit);
          ++executed;
        } catch (const std::exception& ex) {
          spdlog::error("chunk {} ({} v{} {} shard {}) failed: {}", c.chunk_id, c.feature, c.version, c.epoch.str(),
                        c.shard_index, ex.what());
          std::lock_guard lock(failures_mu);
          failed.insert(c.chunk_id);
        }
      }
    };
    const unsigned workers = std::max(1U, opts.workers);
    if (workers == 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    stats.chunks_executed = executed;
    stats.chunks_failed = failed.size();

    for (const auto& pj : jobs) {
      const bool complete = std::all_of(pj.chunks_by_shard.begin(), pj.chunks_by_shard.end(), [&](const auto& shard) {
        return std::none_of(shard.begin(), shard.end(), [&](const WorkChunk& c) { return failed.contains(c.chunk_id); });
      });
      if (!complete) continue;
      recombine(layout_, pj.job, pj.chunks_by_shard);
      ++stats.jobs_completed;
    }
    return stats;
  }

  void merge_locked(RunStats& stats) {
    const PipelineConfig cfg = config();
    for (const auto& e : known_epochs(layout_)) {
      if (epoch_merged(layout_, e, cfg.features)) continue;
      merge_epoch(layout_, e, cfg.features);
      stats.epochs_merged.push_back(e);
    }
  }

  void join_locked(RunStats& stats) {
    const PipelineConfig cfg = config();
    stats.join_records = materialize_join(layout_, known_epochs(layout_), load_catalog(layout_), cfg.join_shards,
                                          cfg.join_block_records);
    stats.join_rebuilt = true;
  }

  Layout layout_;
};

}  // namespace vdisc::pipeline
