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

// Offline retrieval evaluation: Precision@K under same-label relevance,
// raw-vs-binary comparison runs, and a synthetic labeled corpus.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vdisc/core.hpp"
#include "vdisc/errors.hpp"
#include "vdisc/features.hpp"
#include "vdisc/index.hpp"
#include "vdisc/serialization.hpp"

namespace vdisc::eval {

inline constexpr const char* kNoiseLabel = "__noise";

struct EvalDataset {
  std::vector<ImageDocument> corpus;
  std::vector<Signature> queries;
};

enum class Metric { kL1, kL2, kHamming };
enum class Representation { kRaw, kBinary };

struct Variant {
  Metric metric = Metric::kHamming;
  Representation representation = Representation::kBinary;
};

inline std::string to_string(Metric m) {
  switch (m) {
    case Metric::kL1:
      return "L1";
    case Metric::kL2:
      return "L2";
    case Metric::kHamming:
      return "H.";
  }
  return "?";
}

inline std::string to_string(Representation r) { return r == Representation::kRaw ? "raw" : "binary"; }

inline Metric parse_metric(std::string_view s) {
  if (s == "l1" || s == "L1") return Metric::kL1;
  if (s == "l2" || s == "L2") return Metric::kL2;
  if (s == "hamming" || s == "H." || s == "h") return Metric::kHamming;
  throw InputError(fmt::format("unknown metric '{}'", s));
}

inline Representation parse_representation(std::string_view s) {
  if (s == "raw") return Representation::kRaw;
  if (s == "binary") return Representation::kBinary;
  throw InputError(fmt::format("unknown representation '{}'", s));
}

/// Hits among the first min(K, len) labels, over K.
inline double precision_at_k(std::span<const std::string> result_labels,
                             const std::string& query_label, std::size_t k) {
  if (k == 0) throw InputError("precision@K needs K >= 1");
  const std::size_t n = std::min(k, result_labels.size());
  const auto hits = std::count(result_labels.begin(), result_labels.begin() + static_cast<std::ptrdiff_t>(n),
                               query_label);
  return static_cast<double>(hits) / static_cast<double>(k);
}

inline void validate(const EvalDataset& ds) {
  std::unordered_set<Signature> sigs;
  std::size_t dim = ds.corpus.empty() ? 0 : ds.corpus.front().embedding.dim();
  for (const auto& d : ds.corpus) {
    if (!d.class_label) throw InputError(fmt::format("document {} has no class label", d.signature.hex()));
    if (d.embedding.dim() != dim) throw DimensionError("dataset embeddings disagree on dim");
    if (!sigs.insert(d.signature).second) {
      throw InputError(fmt::format("duplicate document {}", d.signature.hex()));
    }
  }
  for (const auto& q : ds.queries) {
    if (!sigs.contains(q)) throw InputError(fmt::format("query {} not in corpus", q.hex()));
  }
}

/// Ranks the indexed part of the dataset for one query document.
class Ranker {
 public:
  Ranker(const EvalDataset& ds, Variant variant) : variant_(variant) {
    if ((variant.representation == Representation::kBinary) != (variant.metric == Metric::kHamming)) {
      throw InputError("binary fingerprints use Hamming; raw embeddings use L1 or L2");
    }
    const std::unordered_set<Signature> queries(ds.queries.begin(), ds.queries.end());
    for (const auto& d : ds.corpus) {
      if (!queries.contains(d.signature)) {
        indexed_.push_back(&d);
        by_sig_.emplace(d.signature, &d);
      }
    }
    if (variant.representation == Representation::kBinary) {
      std::vector<LeafDoc> docs;
      for (std::size_t i = 0; i < indexed_.size(); ++i) {
        docs.push_back({indexed_[i]->signature, indexed_[i]->fingerprint, static_cast<std::uint32_t>(i)});
      }
      const std::size_t dim = indexed_.empty() ? 0 : indexed_.front()->fingerprint.dim();
      index_ = LeafIndex::build(std::move(docs), dim == 0 ? 1 : default_block_count(dim), true);
    }
  }

  /// Up to k nearest indexed documents, the query itself excluded.
  std::vector<const ImageDocument*> rank(const ImageDocument& query, std::size_t k) const {
    std::vector<const ImageDocument*> out;
    if (variant_.representation == Representation::kBinary) {
      for (const auto& r : index_.knn(query.fingerprint, k + 1)) {
        const ImageDocument* d = by_sig_.at(r.signature);
        if (d->signature != query.signature) out.push_back(d);
      }
    } else {
      std::vector<std::pair<double, const ImageDocument*>> scored;
      scored.reserve(indexed_.size());
      for (const ImageDocument* d : indexed_) {
        if (d->signature == query.signature) continue;
        const double dist = variant_.metric == Metric::kL1 ? l1(query.embedding, d->embedding)
                                                           : l2(query.embedding, d->embedding);
        scored.emplace_back(dist, d);
      }
      const std::size_t keep = std::min(k, scored.size());
      std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep), scored.end(),
                        [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first < b.first;
                          return a.second->signature < b.second->signature;
                        });
      for (std::size_t i = 0; i < keep; ++i) out.push_back(scored[i].second);
    }
    if (out.size() > k) out.resize(k);
    return out;
  }

 private:
  Variant variant_;
  std::vector<const ImageDocument*> indexed_;
  std::unordered_map<Signature, const ImageDocument*> by_sig_;
  LeafIndex index_;
};

struct EvalRow {
  Variant variant;
  std::vector<std::size_t> ks;
  std::vector<double> mean_precision;  // parallel to ks
  std::size_t queries = 0;
};

/// Mean per-query P@K. Queries fan out over `threads` workers and are
/// reduced in query order, so the result does not depend on scheduling.
inline EvalRow run_eval(const EvalDataset& ds, Variant variant, std::vector<std::size_t> ks = {1, 5, 10},
                        unsigned threads = 0) {
  validate(ds);
  if (ks.empty()) throw InputError("need at least one K");
  for (std::size_t k : ks) {
    if (k == 0) throw InputError("precision@K needs K >= 1");
  }
  const std::size_t max_k = *std::max_element(ks.begin(), ks.end());
  const Ranker ranker(ds, variant);
  std::unordered_map<Signature, const ImageDocument*> by_sig;
  for (const auto& d : ds.corpus) by_sig.emplace(d.signature, &d);

  std::vector<std::vector<double>> per_query(ds.queries.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t qi = begin; qi < ds.queries.size(); qi += stride) {
      const ImageDocument& q = *by_sig.at(ds.queries[qi]);
      std::vector<std::string> labels;
      for (const ImageDocument* d : ranker.rank(q, max_k)) labels.push_back(*d->class_label);
      for (std::size_t k : ks) per_query[qi].push_back(precision_at_k(labels, *q.class_label, k));
    }
  };
  if (threads == 0) threads = std::max(1U, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(1, ds.queries.size())));
  if (threads <= 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
  }

  EvalRow row{variant, ks, std::vector<double>(ks.size(), 0.0), ds.queries.size()};
  for (const auto& p : per_query) {
    for (std::size_t i = 0; i < ks.size(); ++i) row.mean_precision[i] += p[i];
  }
  if (!ds.queries.empty()) {
    for (auto& m : row.mean_precision) m /= static_cast<double>(ds.queries.size());
  }
  return row;
}

inline constexpr const char* kReportCaveat =
    "Protocol reproduction only: precision values come from the supplied dataset and are not "
    "comparable to figures measured with trained convnet features on production corpora.";

inline nlohmann::json report_json(std::span<const EvalRow> rows) {
  nlohmann::json out = {{"caveat", kReportCaveat}, {"rows", nlohmann::json::array()}};
  for (const auto& r : rows) {
    nlohmann::json row = {{"model", "synthetic"},
                          {"layer", "n/a"},
                          {"type", to_string(r.variant.representation)},
                          {"dist", to_string(r.variant.metric)},
                          {"queries", r.queries}};
    for (std::size_t i = 0; i < r.ks.size(); ++i) row[fmt::format("P@{}", r.ks[i])] = r.mean_precision[i];
    out["rows"].push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthParams {
  std::size_t num_classes = 10;
  std::size_t per_class = 20;
  std::size_t dim = 64;
  double cluster_tightness = 0.3;
  std::size_t noise_docs = 0;
  std::size_t queries_per_class = 2;
  std::uint64_t seed = 1;
};

/// Gaussian class centers, members perturbed uniformly within
/// +/- tightness per coordinate, and Cauchy-distributed noise documents.
inline EvalDataset synth_dataset(const SynthParams& p) {
  if (p.dim == 0) throw InputError("synthetic dim must be positive");
  std::mt19937_64 rng(p.seed);
  std::normal_distribution<double> center_dist(0.0, 1.0);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  std::cauchy_distribution<double> heavy(0.0, 1.0);

  const Timestamp base = parse_timestamp("2015-09-14T08:00:00Z");
  EvalDataset ds;
  std::size_t serial = 0;
  auto make_doc = [&](std::vector<float> values, const std::string& label, const std::string& key) {
    ImageDocument d;
    d.signature = compute_signature(fmt::format("synth:{}:{}", p.seed, key));
    d.upload_time = base + std::chrono::hours{24 * static_cast<int>(serial % 3)} +
                    std::chrono::seconds{static_cast<int>(serial)};
    ++serial;
    d.width = 256;
    d.height = 256;
    d.embedding.values = std::move(values);
    d.fingerprint = binarize(d.embedding);
    d.class_label = label;
    return d;
  };

  for (std::size_t c = 0; c < p.num_classes; ++c) {
    std::vector<double> center(p.dim);
    for (auto& v : center) v = center_dist(rng);
    const std::string label = fmt::format("class_{}", c);
    for (std::size_t i = 0; i < p.per_class; ++i) {
      std::vector<float> values(p.dim);
      for (std::size_t j = 0; j < p.dim; ++j) {
        values[j] = static_cast<float>(center[j] + p.cluster_tightness * jitter(rng));
      }
      ds.corpus.push_back(make_doc(std::move(values), label, fmt::format("{}:{}", c, i)));
      if (i < p.queries_per_class) ds.queries.push_back(ds.corpus.back().signature);
    }
  }
  for (std::size_t i = 0; i < p.noise_docs; ++i) {
    std::vector<float> values(p.dim);
    for (auto& v : values) v = static_cast<float>(std::clamp(heavy(rng), -1e6, 1e6));
    ds.corpus.push_back(make_doc(std::move(values), kNoiseLabel, fmt::format("noise:{}", i)));
  }
  return ds;
}

/// JSON-lines: one document per line, with "query": true on query rows.
inline void save_dataset(const EvalDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(fmt::format("cannot write '{}'", path));
  const std::unordered_set<Signature> queries(ds.queries.begin(), ds.queries.end());
  for (const auto& d : ds.corpus) {
    nlohmann::json j = d;
    if (queries.contains(d.signature)) j["query"] = true;
    out << j.dump() << '\n';
  }
}

inline EvalDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError(fmt::format("dataset '{}' not found", path));
  EvalDataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ds.corpus.push_back(j.get<ImageDocument>());
      if (j.value("query", false)) ds.queries.push_back(ds.corpus.back().signature);
    } catch (const nlohmann::json::exception& ex) {
      throw InputError(fmt::format("{}:{}: {}", path, lineno, ex.what()));
    }
  }
  validate(ds);
  return ds;
}

}  // namespace vdisc::eval
