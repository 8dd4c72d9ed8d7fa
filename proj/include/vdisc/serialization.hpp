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

// JSON wire forms for the core types. Binary payloads travel as base64:
// embeddings as little-endian float32, fingerprints as MSB-first packed bits.

#pragma once

#include <string>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "vdisc/codec.hpp"
#include "vdisc/core.hpp"
#include "vdisc/features.hpp"

namespace vdisc {

inline void to_json(nlohmann::json& j, const Signature& s) { j = s.hex(); }
inline void from_json(const nlohmann::json& j, Signature& s) {
  s = Signature::from_hex(j.get<std::string>());
}

inline void to_json(nlohmann::json& j, const Box& b) { j = {b.x, b.y, b.w, b.h}; }
inline void from_json(const nlohmann::json& j, Box& b) {
  if (!j.is_array() || j.size() != 4) throw InputError("box must be [x, y, w, h]");
  b = Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline void to_json(nlohmann::json& j, const DetectedObject& d) {
  j = {{"box", d.box}, {"category", d.category}, {"confidence", d.confidence}};
}
inline void from_json(const nlohmann::json& j, DetectedObject& d) {
  d.box = j.at("box").get<Box>();
  d.category = j.at("category").get<std::string>();
  d.confidence = j.at("confidence").get<double>();
  if (!d.box.valid()) throw InputError("detection box must have w > 0 and h > 0");
  if (!(d.confidence >= 0.0 && d.confidence <= 1.0)) {
    throw InputError("detection confidence must lie in [0, 1]");
  }
}

inline void to_json(nlohmann::json& j, const Annotation& a) {
  j = {{"term", a.term}, {"weight", a.weight}};
}
inline void from_json(const nlohmann::json& j, Annotation& a) {
  a.term = j.at("term").get<std::string>();
  a.weight = j.value("weight", 1.0);
  if (a.term.empty()) throw InputError("annotation term must be non-empty");
  if (!std::isfinite(a.weight) || a.weight < 0) {
    throw InputError("annotation weight must be finite and non-negative");
  }
}

inline void to_json(nlohmann::json& j, const CategoryVector& c) {
  j = nlohmann::json::object();
  for (const auto& [i, w] : c.entries) j[std::to_string(i)] = w;
}
inline void from_json(const nlohmann::json& j, CategoryVector& c) {
  c.entries.clear();
  for (const auto& [key, value] : j.items()) {
    const int i = std::stoi(key);
    const double w = value.get<double>();
    if (i < 0 || i >= kNumCategories) throw InputError(fmt::format("category index {} out of range", i));
    if (!(w > 0.0 && w <= 1.0)) throw InputError(fmt::format("category weight {} outside (0, 1]", w));
    c.entries[i] = w;
  }
}

inline nlohmann::json embedding_to_json(const Embedding& e) {
  return codec::base64_encode(e.to_bytes());
}

inline Embedding embedding_from_json(const nlohmann::json& j) {
  return Embedding::from_bytes(codec::base64_decode(j.get<std::string>()));
}

inline nlohmann::json fingerprint_to_json(const BinaryFingerprint& fp) {
  return {{"dim", fp.dim()}, {"bits", codec::base64_encode(fp.to_bytes())}};
}

inline BinaryFingerprint fingerprint_from_json(const nlohmann::json& j) {
  return BinaryFingerprint::from_bytes(codec::base64_decode(j.at("bits").get<std::string>()),
                                       j.at("dim").get<std::size_t>());
}

/// Everything but the embedding and fingerprint.
inline nlohmann::json metadata_to_json(const ImageDocument& d) {
  nlohmann::json j = {{"signature", d.signature},
                      {"upload_time", format_timestamp(d.upload_time)},
                      {"width", d.width},
                      {"height", d.height},
                      {"annotations", d.annotations},
                      {"category", d.category},
                      {"detections", d.detections}};
  if (d.class_label) j["class_label"] = *d.class_label;
  return j;
}

inline void metadata_from_json(const nlohmann::json& j, ImageDocument& d) {
  d.signature = j.at("signature").get<Signature>();
  d.upload_time = parse_timestamp(j.value("upload_time", std::string("1970-01-01T00:00:00Z")));
  d.width = j.value("width", 0);
  d.height = j.value("height", 0);
  d.annotations = j.value("annotations", std::vector<Annotation>{});
  d.category = j.value("category", CategoryVector{});
  if (j.contains("class_label") && !j["class_label"].is_null()) {
    d.class_label = j["class_label"].get<std::string>();
  } else {
    d.class_label.reset();
  }
  d.detections = j.value("detections", std::vector<DetectedObject>{});
  if (d.width < 0 || d.height < 0) throw InputError("image dimensions must be non-negative");
  for (const auto& det : d.detections) {
    if (!det.box.within(d.width, d.height)) {
      throw InputError(fmt::format("detection outside image bounds for {}", d.signature.hex()));
    }
  }
}

inline void to_json(nlohmann::json& j, const ImageDocument& d) {
  j = metadata_to_json(d);
  j["embedding"] = embedding_to_json(d.embedding);
  j["fingerprint"] = fingerprint_to_json(d.fingerprint);
}

/// The fingerprint may be omitted on input; it is always re-derived from the
/// embedding and a supplied one must agree with it.
inline void from_json(const nlohmann::json& j, ImageDocument& d) {
  metadata_from_json(j, d);
  d.embedding = embedding_from_json(j.at("embedding"));
  d.fingerprint = binarize(d.embedding);
  if (j.contains("fingerprint") && fingerprint_from_json(j["fingerprint"]) != d.fingerprint) {
    throw InputError(fmt::format("fingerprint of {} does not match its embedding", d.signature.hex()));
  }
}

inline nlohmann::json to_json_value(const ScoredResult& r) {
  return {{"signature", r.signature},
          {"hamming_distance", r.hamming_distance},
          {"similarity", r.similarity},
          {"rerank_score", r.rerank_score},
          {"leaf_id", r.leaf_id},
          {"source", std::string(to_string(r.source))}};
}

inline void to_json(nlohmann::json& j, const ScoredResult& r) { j = to_json_value(r); }

}  // namespace vdisc
