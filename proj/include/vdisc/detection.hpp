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

// Post-processing over externally supplied detections, plus the object
// corpus used for object search.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <fmt/format.h>

#include "vdisc/core.hpp"
#include "vdisc/errors.hpp"
#include "vdisc/features.hpp"
#include "vdisc/index.hpp"

namespace vdisc {

inline constexpr double kDominantAreaFraction = 0.25;
inline constexpr double kDominantConfidence = 0.9;
inline constexpr double kDefaultDetectionThreshold = 0.7;
inline constexpr double kDefaultNmsThreshold = 0.7;

inline double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw InputError("iou: boxes need positive width and height");
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  if (inter <= 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

/// Confidence descending, then box ascending.
inline bool more_confident(const DetectedObject& a, const DetectedObject& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  return a.box < b.box;
}

/// Greedy per-category non-maximum suppression. A detection survives when
/// its IoU with every kept detection of its category is below the threshold;
/// boxes that do not overlap at all never suppress each other, so a zero
/// threshold keeps one box per overlapping cluster. Output is in greedy
/// (confidence) order.
inline std::vector<DetectedObject> nms(std::vector<DetectedObject> dets, double iou_threshold) {
  if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0)) {
    throw InputError("nms threshold must lie in [0, 1]");
  }
  std::stable_sort(dets.begin(), dets.end(), more_confident);
  std::vector<DetectedObject> kept;
  for (auto& d : dets) {
    const bool clear = std::all_of(kept.begin(), kept.end(), [&](const DetectedObject& k) {
      if (k.category != d.category) return true;
      const double o = iou(k.box, d.box);
      return o == 0.0 || o < iou_threshold;
    });
    if (clear) kept.push_back(std::move(d));
  }
  return kept;
}

inline std::vector<DetectedObject> filter_detections(std::span<const DetectedObject> dets,
                                                     double min_confidence) {
  std::vector<DetectedObject> out;
  std::copy_if(dets.begin(), dets.end(), std::back_inserter(out),
               [&](const DetectedObject& d) { return d.confidence >= min_confidence; });
  return out;
}

/// The largest detection, if it covers at least a quarter of the image or
/// is itself confident enough. Smaller boxes never qualify.
inline std::optional<DetectedObject> dominant_object(std::span<const DetectedObject> dets,
                                                     double image_width, double image_height) {
  if (dets.empty()) return std::nullopt;
  const auto largest = std::min_element(dets.begin(), dets.end(), [](const auto& a, const auto& b) {
    if (a.box.area() != b.box.area()) return a.box.area() > b.box.area();
    return more_confident(a, b);
  });
  const double image_area = image_width * image_height;
  const bool big = image_area > 0 && largest->box.area() / image_area >= kDominantAreaFraction;
  if (big || largest->confidence >= kDominantConfidence) return *largest;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Crops

/// Derives region fingerprints. There are no pixels here, so a crop is
/// described by its scene signature and box and hashed through the seeded
/// extractor; a crop spanning the whole image reuses the scene's fingerprint.
struct CropExtractor {
  std::uint64_t seed = 0;
  std::size_t dim = 64;
  double padding = 0.0;  // fraction of box size added on each side

  Box pad(const Box& box, int width, int height) const {
    if (padding <= 0.0) return box;
    const double x0 = std::max(0.0, box.x - padding * box.w);
    const double y0 = std::max(0.0, box.y - padding * box.h);
    const double x1 = std::min(static_cast<double>(width), box.x + box.w + padding * box.w);
    const double y1 = std::min(static_cast<double>(height), box.y + box.h + padding * box.h);
    return Box{x0, y0, x1 - x0, y1 - y0};
  }

  BinaryFingerprint fingerprint(const ImageDocument& scene, const Box& box) const {
    if (!box.valid() || !box.within(scene.width, scene.height)) {
      throw InputError(fmt::format("crop [{}, {}, {}, {}] outside {}x{} image", box.x, box.y,
                                   box.w, box.h, scene.width, scene.height));
    }
    const Box region = pad(box, scene.width, scene.height);
    if (region == Box{0, 0, static_cast<double>(scene.width), static_cast<double>(scene.height)}) {
      return scene.fingerprint;
    }
    const std::string descriptor = fmt::format("{}:crop:{},{},{},{}", scene.signature.hex(),
                                               region.x, region.y, region.w, region.h);
    return binarize(extract_seeded_hash(descriptor, seed, dim));
  }
};

// ---------------------------------------------------------------------------
// Object corpus

struct ObjectEntry {
  Signature object_id;
  Signature scene;
  Box box;
  std::string category;
  double confidence = 0.0;
  BinaryFingerprint fingerprint;
};

inline Signature object_id_for(const Signature& scene, const Box& box) {
  return compute_signature(
      fmt::format("{}:{},{},{},{}", scene.hex(), box.x, box.y, box.w, box.h));
}

inline std::vector<ObjectEntry> extract_objects(const ImageDocument& doc, const CropExtractor& crops,
                                                double nms_threshold = kDefaultNmsThreshold) {
  for (const auto& d : doc.detections) {
    if (!d.box.valid() || !d.box.within(doc.width, doc.height)) {
      throw InputError(fmt::format("detection outside image bounds in {}", doc.signature.hex()));
    }
  }
  std::vector<ObjectEntry> out;
  for (const auto& d : nms(doc.detections, nms_threshold)) {
    out.push_back({object_id_for(doc.signature, d.box), doc.signature, d.box, d.category,
                   d.confidence, crops.fingerprint(doc, d.box)});
  }
  return out;
}

class ObjectIndex {
 public:
  ObjectIndex() = default;

  static ObjectIndex build(std::vector<ObjectEntry> entries, std::size_t m,
                           bool exhaustive_fallback = true) {
    ObjectIndex idx;
    std::vector<LeafDoc> docs;
    docs.reserve(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!idx.by_id_.emplace(entries[i].object_id, i).second) {
        throw InputError(fmt::format("duplicate object id {}", entries[i].object_id.hex()));
      }
      docs.push_back({entries[i].object_id, entries[i].fingerprint, static_cast<std::uint32_t>(i)});
    }
    idx.index_ = LeafIndex::build(std::move(docs), m, exhaustive_fallback);
    idx.entries_ = std::move(entries);
    return idx;
  }

  const LeafIndex& index() const { return index_; }
  std::span<const ObjectEntry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const ObjectEntry* find(const Signature& object_id) const {
    const auto it = by_id_.find(object_id);
    return it == by_id_.end() ? nullptr : &entries_[it->second];
  }

  const ObjectEntry& entry_for(const ScoredResult& r) const { return entries_[by_id_.at(r.signature)]; }

 private:
  LeafIndex index_;
  std::vector<ObjectEntry> entries_;
  std::unordered_map<Signature, std::size_t> by_id_;
};

struct SceneHit {
  Signature scene;
  int distance = 0;
  Signature best_object;

  bool operator==(const SceneHit&) const = default;
};

/// Nearest objects mapped back to their scenes, one hit per scene at its
/// closest object, ranked by (distance, scene signature).
///
/// The object window grows until k scenes are settled: a scene is settled
/// once its distance is strictly below the farthest fetched object, since
/// no unfetched object can then tie or beat it.
inline std::vector<SceneHit> object_search(const ObjectIndex& objects, const BinaryFingerprint& q,
                                           std::size_t k) {
  const LeafIndex& idx = objects.index();
  if (!idx.empty() && q.dim() != idx.dim()) {
    throw DimensionError(fmt::format("query dim {} does not match object index dim {}", q.dim(),
                                     idx.dim()));
  }
  if (k == 0 || idx.empty()) return {};
  std::size_t window = k;
  std::vector<SceneHit> hits;
  while (true) {
    const auto nearest = idx.knn(q, window);
    std::unordered_map<Signature, std::size_t> pos;
    hits.clear();
    for (const auto& r : nearest) {
      const ObjectEntry& e = objects.entry_for(r);
      if (pos.emplace(e.scene, hits.size()).second) {
        hits.push_back({e.scene, r.hamming_distance, e.object_id});
      }
    }
    const bool exhausted = nearest.size() < window || window >= idx.size();
    const int horizon = nearest.empty() ? 0 : nearest.back().hamming_distance;
    const auto settled = std::count_if(hits.begin(), hits.end(),
                                       [&](const SceneHit& h) { return h.distance < horizon; });
    if (exhausted || static_cast<std::size_t>(settled) >= k) break;
    window = std::min(window * 2, idx.size());
  }
  std::sort(hits.begin(), hits.end(), [](const SceneHit& a, const SceneHit& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.scene < b.scene;
  });
  if (hits.size() > k) hits.resize(k);
  return hits;
}

}  // namespace vdisc
