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

// Multi-source result blending with query-understanding gates.

#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <unordered_set>
#include <vector>

#include <fmt/format.h>

#include "vdisc/core.hpp"
#include "vdisc/errors.hpp"

namespace vdisc {

struct SourceResult {
  Source source = Source::kVisual;
  std::vector<ScoredResult> results;
};

struct QueryUnderstanding {
  std::vector<Annotation> annotations;
  std::optional<DetectedObject> dominant;
  double annotation_confidence = 0.0;
};

/// Confidence is the strongest annotation weight over `norm`, capped at 1.
inline QueryUnderstanding understand_query(std::vector<Annotation> annotations,
                                           std::optional<DetectedObject> dominant, double norm) {
  if (!(norm > 0.0)) throw InputError("annotation confidence norm must be positive");
  double top = 0.0;
  for (const auto& a : annotations) top = std::max(top, a.weight);
  return {std::move(annotations), std::move(dominant), std::min(1.0, top / norm)};
}

/// `primary` items then `secondary` items, repeated.
struct InterleaveRatio {
  std::size_t primary = 3;
  std::size_t secondary = 1;
};

/// How a lower-priority source is folded into the list built so far.
struct BlendStep {
  InterleaveRatio ratio;
  bool incoming_is_primary = false;
};

struct BlendConfig {
  double min_annotation_confidence = 0.2;
  double annotation_norm = 10.0;
  std::vector<Source> priority{Source::kVisual, Source::kObjectSearch, Source::kTextual};
  std::map<Source, BlendStep> steps{
      // three non-visual results for every visually similar one
      {Source::kTextual, {{3, 1}, true}},
      {Source::kObjectSearch, {{1, 1}, false}},
  };

  BlendStep step_for(Source s) const {
    const auto it = steps.find(s);
    return it == steps.end() ? BlendStep{{1, 1}, false} : it->second;
  }
};

inline std::set<Source> gate_sources(const QueryUnderstanding& qu, const BlendConfig& cfg) {
  std::set<Source> on{Source::kVisual};
  if (qu.annotation_confidence >= cfg.min_annotation_confidence) on.insert(Source::kTextual);
  if (qu.dominant) on.insert(Source::kObjectSearch);
  return on;
}

namespace detail {

inline void dedupe_by_signature(std::vector<ScoredResult>& items) {
  std::unordered_set<Signature> seen;
  std::erase_if(items, [&](const ScoredResult& r) { return !seen.insert(r.signature).second; });
}

}  // namespace detail

/// Repeats the pattern (ratio.primary from `primary`, ratio.secondary from
/// `secondary`); once either side runs dry the other follows in order.
/// Later duplicates of a signature are dropped.
inline std::vector<ScoredResult> interleave(std::span<const ScoredResult> primary,
                                            std::span<const ScoredResult> secondary,
                                            InterleaveRatio ratio = {}) {
  if (ratio.primary == 0 && ratio.secondary == 0) {
    throw InputError("interleave ratio must not be 0:0");
  }
  std::vector<ScoredResult> out;
  out.reserve(primary.size() + secondary.size());
  std::size_t p = 0;
  std::size_t s = 0;
  while (p < primary.size() && s < secondary.size()) {
    for (std::size_t i = 0; i < ratio.primary && p < primary.size(); ++i) out.push_back(primary[p++]);
    for (std::size_t i = 0; i < ratio.secondary && s < secondary.size(); ++i) {
      out.push_back(secondary[s++]);
    }
  }
  out.insert(out.end(), primary.begin() + static_cast<std::ptrdiff_t>(p), primary.end());
  out.insert(out.end(), secondary.begin() + static_cast<std::ptrdiff_t>(s), secondary.end());
  detail::dedupe_by_signature(out);
  return out;
}

inline std::vector<ScoredResult> blend(std::span<const SourceResult> sources,
                                       const QueryUnderstanding& qu, const BlendConfig& cfg) {
  std::set<Source> names;
  for (const auto& s : sources) {
    if (!names.insert(s.source).second) {
      throw InputError(fmt::format("source '{}' supplied twice", to_string(s.source)));
    }
  }
  const std::set<Source> gated = gate_sources(qu, cfg);
  auto rank = [&](Source s) {
    const auto it = std::find(cfg.priority.begin(), cfg.priority.end(), s);
    return it - cfg.priority.begin();
  };
  std::vector<const SourceResult*> active;
  for (const auto& s : sources) {
    if (gated.contains(s.source)) active.push_back(&s);
  }
  std::stable_sort(active.begin(), active.end(),
                   [&](const SourceResult* a, const SourceResult* b) {
                     return rank(a->source) < rank(b->source);
                   });
  std::vector<ScoredResult> acc;
  for (const SourceResult* s : active) {
    std::vector<ScoredResult> incoming = s->results;
    for (auto& r : incoming) r.source = s->source;
    if (acc.empty()) {
      acc = std::move(incoming);
      detail::dedupe_by_signature(acc);
      continue;
    }
    const BlendStep step = cfg.step_for(s->source);
    acc = step.incoming_is_primary ? interleave(incoming, acc, step.ratio)
                                   : interleave(acc, incoming, step.ratio);
  }
  return acc;
}

}  // namespace vdisc
