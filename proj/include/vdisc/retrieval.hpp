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

// Root ranking and post-retrieval processing: fan-out/merge over leaves,
// linear re-ranking with category cross features and visual-weight gating,
// tf-idf annotation aggregation, category conformity, and dot suppression.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "vdisc/core.hpp"
#include "vdisc/errors.hpp"
#include "vdisc/index.hpp"

namespace vdisc {

// ---------------------------------------------------------------------------
// Root ranker

/// A leaf as seen by the root: answers (query, k) with its local top-k.
/// Queries issued under a deadline may outlive the call, so a LeafQuery must
/// own (or share ownership of) everything it touches.
using LeafQuery = std::function<std::vector<ScoredResult>(const BinaryFingerprint&, std::size_t)>;

struct RootOptions {
  bool partial_ok = false;
  /// Zero means wait for every leaf.
  std::chrono::milliseconds deadline{0};
};

struct RootResult {
  std::vector<ScoredResult> results;
  bool partial = false;
  std::vector<int> failed_leaves;
};

class PartialResultError : public Error {
 public:
  PartialResultError(std::vector<int> failed)
      : Error(fmt::format("leaf fan-out incomplete; failed leaves: {}", fmt::join(failed, ","))),
        failed_(std::move(failed)) {}

  const std::vector<int>& failed_leaves() const { return failed_; }

 private:
  std::vector<int> failed_;
};

inline RootResult root_knn(std::span<const LeafQuery> leaves, const BinaryFingerprint& q,
                           std::size_t k, const RootOptions& opts = {}) {
  using Results = std::vector<ScoredResult>;
  std::vector<std::optional<Results>> answers(leaves.size());

  if (opts.deadline.count() == 0) {
    std::vector<std::future<Results>> futures;
    futures.reserve(leaves.size());
    for (const LeafQuery& leaf : leaves) {
      futures.push_back(std::async(std::launch::async, [&leaf, &q, k] { return leaf(q, k); }));
    }
    for (std::size_t i = 0; i < futures.size(); ++i) {
      try {
        answers[i] = futures[i].get();
      } catch (const std::exception& ex) {
        spdlog::warn("leaf {} failed: {}", i, ex.what());
      }
    }
  } else {
    const auto until = std::chrono::steady_clock::now() + opts.deadline;
    std::vector<std::future<Results>> futures;
    futures.reserve(leaves.size());
    for (const LeafQuery& leaf : leaves) {
      auto promise = std::make_shared<std::promise<Results>>();
      futures.push_back(promise->get_future());
      std::thread([promise, leaf, q, k] {
        try {
          promise->set_value(leaf(q, k));
        } catch (...) {
          promise->set_exception(std::current_exception());
        }
      }).detach();
    }
    for (std::size_t i = 0; i < futures.size(); ++i) {
      if (futures[i].wait_until(until) != std::future_status::ready) {
        spdlog::warn("leaf {} missed the deadline", i);
        continue;
      }
      try {
        answers[i] = futures[i].get();
      } catch (const std::exception& ex) {
        spdlog::warn("leaf {} failed: {}", i, ex.what());
      }
    }
  }

  RootResult out;
  for (std::size_t i = 0; i < answers.size(); ++i) {
    if (!answers[i]) {
      out.failed_leaves.push_back(static_cast<int>(i));
      continue;
    }
    out.results.insert(out.results.end(), answers[i]->begin(), answers[i]->end());
  }
  if (!out.failed_leaves.empty()) {
    if (!opts.partial_ok) throw PartialResultError(out.failed_leaves);
    out.partial = true;
  }
  const std::size_t keep = std::min(k, out.results.size());
  std::partial_sort(out.results.begin(), out.results.begin() + static_cast<std::ptrdiff_t>(keep),
                    out.results.end(), nearer);
  out.results.resize(keep);
  return out;
}

inline RootResult root_knn(std::span<const LeafIndex> leaves, const BinaryFingerprint& q,
                           std::size_t k, const RootOptions& opts = {}) {
  if (!leaves.empty()) {
    const std::size_t dim = leaves.front().dim();
    for (const LeafIndex& leaf : leaves) {
      if (!leaf.empty() && dim != 0 && leaf.dim() != dim) {
        throw DimensionError("leaves disagree on fingerprint dim");
      }
    }
  }
  std::vector<LeafQuery> queries;
  queries.reserve(leaves.size());
  for (const LeafIndex& leaf : leaves) {
    queries.emplace_back(
        [&leaf](const BinaryFingerprint& fp, std::size_t kk) { return leaf.knn(fp, kk); });
  }
  // Borrowed leaves: never let a query outlive this call.
  RootOptions borrowed = opts;
  borrowed.deadline = std::chrono::milliseconds{0};
  return root_knn(std::span<const LeafQuery>(queries), q, k, borrowed);
}

// ---------------------------------------------------------------------------
// Linear re-ranking

using FeatureRow = std::map<std::string, double>;

inline constexpr double kDefaultVisualGain = 5.0;

inline std::string cross_feature_name(int category) { return fmt::format("cat_cross_{}", category); }

/// One feature per category present in the query: weight times similarity.
inline FeatureRow cross_features(const CategoryVector& query_category, double similarity) {
  if (!(similarity >= 0.0 && similarity <= 1.0)) {
    throw InputError(fmt::format("similarity {} outside [0, 1]", similarity));
  }
  FeatureRow row;
  for (const auto& [i, w] : query_category.entries) row[cross_feature_name(i)] = w * similarity;
  return row;
}

struct RankingModel {
  std::map<std::string, double> weights;
  std::set<std::string> visual_features;

  void validate() const {
    for (const auto& name : visual_features) {
      if (!weights.contains(name)) {
        throw InputError(fmt::format("visual feature '{}' has no weight", name));
      }
    }
    for (const auto& [name, w] : weights) {
      if (!std::isfinite(w)) throw InputError(fmt::format("weight of '{}' is not finite", name));
    }
  }

  static RankingModel from_json(const nlohmann::json& j) {
    RankingModel m;
    m.weights = j.at("weights").get<std::map<std::string, double>>();
    m.visual_features = j.value("visual_features", std::set<std::string>{});
    m.validate();
    return m;
  }

  nlohmann::json to_json() const {
    return {{"weights", weights}, {"visual_features", visual_features}};
  }
};

inline double score(const RankingModel& model, const FeatureRow& row, bool gated,
                    double gamma = kDefaultVisualGain) {
  if (!(gamma > 0.0)) throw InputError("visual gain must be positive");
  double s = 0.0;
  for (const auto& [name, value] : row) {
    const auto it = model.weights.find(name);
    if (it == model.weights.end()) {
      spdlog::debug("feature '{}' not in model; ignored", name);
      continue;
    }
    double w = it->second;
    if (gated && model.visual_features.contains(name)) w *= gamma;
    s += w * value;
  }
  return s;
}

struct QueryContext {
  CategoryVector category;
  bool dominant_present = false;
};

/// Extra per-candidate features (popularity, category overlap, ...).
using MetadataFeatures = std::function<FeatureRow(const ScoredResult&)>;

inline FeatureRow make_feature_row(const ScoredResult& r, const QueryContext& ctx,
                                   const MetadataFeatures& extra = {}) {
  FeatureRow row = extra ? extra(r) : FeatureRow{};
  row["vis_sim"] = r.similarity;
  row["vis_sim_indicator"] = 1.0;
  for (auto& [name, value] : cross_features(ctx.category, r.similarity)) row[name] = value;
  return row;
}

/// Scores every result, gating visual weights when the query has a dominant
/// object, and orders by score descending then signature ascending.
inline std::vector<ScoredResult> rerank(std::vector<ScoredResult> results, const RankingModel& model,
                                        const QueryContext& ctx, double gamma = kDefaultVisualGain,
                                        const MetadataFeatures& extra = {}) {
  for (auto& r : results) {
    r.rerank_score = score(model, make_feature_row(r, ctx, extra), ctx.dominant_present, gamma);
  }
  std::stable_sort(results.begin(), results.end(), [](const ScoredResult& a, const ScoredResult& b) {
    if (a.rerank_score != b.rerank_score) return a.rerank_score > b.rerank_score;
    return a.signature < b.signature;
  });
  return results;
}

// ---------------------------------------------------------------------------
// Annotations, conformity, suppression

struct CorpusStats {
  std::size_t documents = 0;
  std::unordered_map<std::string, std::size_t> document_frequency;

  std::size_t df(const std::string& term) const {
    const auto it = document_frequency.find(term);
    return it == document_frequency.end() ? 0 : it->second;
  }

  /// Smoothed idf, strictly positive.
  double idf(const std::string& term) const {
    return std::log((1.0 + static_cast<double>(documents)) / (1.0 + static_cast<double>(df(term)))) +
           1.0;
  }

  template <typename Docs>
  static CorpusStats from_documents(const Docs& docs) {
    CorpusStats stats;
    for (const auto& d : docs) {
      ++stats.documents;
      std::set<std::string> terms;
      for (const auto& a : d.annotations) terms.insert(a.term);
      for (const auto& t : terms) ++stats.document_frequency[t];
    }
    return stats;
  }
};

using AnnotationLookup = std::function<std::vector<Annotation>(const Signature&)>;

/// Sum of idf over the top-N results carrying each term; weight desc, term asc.
inline std::vector<Annotation> aggregate_annotations(std::span<const ScoredResult> results,
                                                     const AnnotationLookup& annotations_of,
                                                     const CorpusStats& stats, std::size_t top_n) {
  if (top_n == 0) throw InputError("annotation aggregation needs N >= 1");
  std::map<std::string, double> weight;
  for (std::size_t i = 0; i < std::min(top_n, results.size()); ++i) {
    std::set<std::string> terms;
    for (const auto& a : annotations_of(results[i].signature)) terms.insert(a.term);
    for (const auto& t : terms) weight[t] += stats.idf(t);
  }
  std::vector<Annotation> out;
  out.reserve(weight.size());
  for (const auto& [term, w] : weight) out.push_back({term, w});
  std::stable_sort(out.begin(), out.end(),
                   [](const Annotation& a, const Annotation& b) { return a.weight > b.weight; });
  return out;
}

using CategoryLookup = std::function<std::optional<std::string>(const ScoredResult&)>;

/// Largest share of results carrying one category label.
inline double category_conformity(std::span<const ScoredResult> results,
                                  const CategoryLookup& category_of) {
  if (results.empty()) throw InputError("category conformity is undefined for no results");
  std::map<std::string, std::size_t> counts;
  for (const auto& r : results) {
    if (auto label = category_of(r)) ++counts[*label];
  }
  std::size_t best = 0;
  for (const auto& [label, n] : counts) best = std::max(best, n);
  return static_cast<double>(best) / static_cast<double>(results.size());
}

struct SuppressionSignals {
  double top_similarity = 0.0;
  double top_annotation_score = 0.0;
  double category_conformity = 0.0;
};

struct SuppressionThresholds {
  double visual = 0.0;
  double annotation = 0.0;
  double conformity = 0.0;
};

/// The best-performing production row: (1.0, 1000, 0.8). Its annotation
/// scale does not match the idf sums produced here; kept for reference.
inline constexpr SuppressionThresholds kPublishedThresholds{1.0, 1000.0, 0.8};

/// True means the dot is shown. Every threshold is an inclusive minimum.
inline bool suppress_dot(const SuppressionSignals& s, const SuppressionThresholds& t) {
  return s.top_similarity >= t.visual && s.top_annotation_score >= t.annotation &&
         s.category_conformity >= t.conformity;
}

}  // namespace vdisc
