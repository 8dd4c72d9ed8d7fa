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

// The serving engine behind the /v1 JSON API: whole-image, crop and
// embedding search with re-ranking, annotations and dots; object search;
// and Lens-style blended results. raw_embedding is either base64 float32
// or a plain number array.
//
// Request handling reads one immutable State snapshot; reload() builds a
// new snapshot and swaps it in, so in-flight requests finish on the old one.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "vdisc/blend.hpp"
#include "vdisc/core.hpp"
#include "vdisc/detection.hpp"
#include "vdisc/errors.hpp"
#include "vdisc/features.hpp"
#include "vdisc/index.hpp"
#include "vdisc/index_store.hpp"
#include "vdisc/retrieval.hpp"
#include "vdisc/serialization.hpp"

namespace vdisc::service {

using nlohmann::json;

class HttpError : public Error {
 public:
  HttpError(int status, const std::string& message) : Error(message), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

/// Maps engine errors onto HTTP statuses.
inline int http_status_for(const std::exception& ex) {
  if (const auto* h = dynamic_cast<const HttpError*>(&ex)) return h->status();
  if (dynamic_cast<const NotFoundError*>(&ex)) return 404;
  if (dynamic_cast<const PartialResultError*>(&ex)) return 503;
  if (dynamic_cast<const InputError*>(&ex) || dynamic_cast<const DimensionError*>(&ex)) return 400;
  if (dynamic_cast<const json::exception*>(&ex)) return 400;
  return 500;
}

struct ServiceConfig {
  std::string root;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t default_k = 25;
  std::size_t max_k = 1000;
  bool partial_ok = true;
  std::chrono::milliseconds leaf_deadline{0};

  RankingModel model{{{"vis_sim", 1.0}, {"vis_sim_indicator", 0.0}, {"cat_sim", 0.25}}, {"vis_sim"}};
  double visual_gain = kDefaultVisualGain;

  std::string threshold_profile = "artifact";
  SuppressionThresholds artifact_thresholds{0.75, 2.0, 0.5};
  SuppressionThresholds published_thresholds = kPublishedThresholds;

  std::size_t annotation_top_n = 10;
  std::size_t annotation_top_m = 5;
  std::size_t text_query_terms = 3;

  double min_detection_confidence = kDefaultDetectionThreshold;
  double nms_iou = kDefaultNmsThreshold;
  CropExtractor crops{};

  BlendConfig blend;

  SuppressionThresholds thresholds() const {
    return threshold_profile == "published" ? published_thresholds : artifact_thresholds;
  }

  static SuppressionThresholds thresholds_from_json(const json& j, SuppressionThresholds t) {
    t.visual = j.value("visual", t.visual);
    t.annotation = j.value("annotation", t.annotation);
    t.conformity = j.value("conformity", t.conformity);
    return t;
  }

  static ServiceConfig from_json(const json& j) {
    ServiceConfig c;
    c.root = j.value("root", c.root);
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.default_k = j.value("default_k", c.default_k);
    c.max_k = j.value("max_k", c.max_k);
    c.partial_ok = j.value("partial_ok", c.partial_ok);
    c.leaf_deadline = std::chrono::milliseconds{j.value("leaf_deadline_ms", 0)};
    if (j.contains("rerank")) {
      const auto& r = j["rerank"];
      if (r.contains("model")) c.model = RankingModel::from_json(r["model"]);
      c.visual_gain = r.value("gamma", c.visual_gain);
    }
    if (j.contains("thresholds")) {
      const auto& t = j["thresholds"];
      c.threshold_profile = t.value("profile", c.threshold_profile);
      if (t.contains("artifact")) c.artifact_thresholds = thresholds_from_json(t["artifact"], c.artifact_thresholds);
      if (t.contains("published")) c.published_thresholds = thresholds_from_json(t["published"], c.published_thresholds);
    }
    if (j.contains("annotations")) {
      c.annotation_top_n = j["annotations"].value("top_n", c.annotation_top_n);
      c.annotation_top_m = j["annotations"].value("top_m", c.annotation_top_m);
      c.text_query_terms = j["annotations"].value("text_query_terms", c.text_query_terms);
    }
    if (j.contains("detection")) {
      const auto& d = j["detection"];
      c.min_detection_confidence = d.value("min_confidence", c.min_detection_confidence);
      c.nms_iou = d.value("nms_iou", c.nms_iou);
      c.crops.padding = d.value("crop_padding", c.crops.padding);
      c.crops.seed = d.value("crop_seed", c.crops.seed);
    }
    if (j.contains("blend")) {
      const auto& b = j["blend"];
      c.blend.min_annotation_confidence = b.value("min_annotation_confidence", c.blend.min_annotation_confidence);
      c.blend.annotation_norm = b.value("annotation_norm", c.blend.annotation_norm);
      if (b.contains("priority")) {
        c.blend.priority.clear();
        for (const auto& s : b["priority"]) c.blend.priority.push_back(source_from_string(s.get<std::string>()));
      }
      if (b.contains("steps")) {
        for (const auto& [name, s] : b["steps"].items()) {
          c.blend.steps[source_from_string(name)] = {
              {s.value("primary", std::size_t{1}), s.value("secondary", std::size_t{1})},
              s.value("incoming_is_primary", false)};
        }
      }
    }
    if (const char* port = std::getenv("VDISC_PORT"); port != nullptr && *port != '\0') c.port = std::atoi(port);
    if (c.threshold_profile != "artifact" && c.threshold_profile != "published") {
      throw InputError(fmt::format("unknown threshold profile '{}'", c.threshold_profile));
    }
    if (!(c.visual_gain > 0.0)) throw InputError("rerank gamma must be positive");
    if (c.annotation_top_n == 0 || c.annotation_top_m == 0) throw InputError("annotation counts must be positive");
    return c;
  }
};

/// Immutable serving snapshot.
struct State {
  std::string generation;
  Corpus corpus;
  ObjectIndex objects;
  CorpusStats stats;
  std::unordered_map<std::string, std::vector<std::size_t>> documents_by_term;

  std::size_t dim() const {
    return corpus.docs.empty() ? 0 : corpus.docs.front().fingerprint.dim();
  }
};

class Engine {
 public:
  explicit Engine(ServiceConfig cfg) : cfg_(std::move(cfg)) {}

  const ServiceConfig& config() const { return cfg_; }

  /// Builds a snapshot (object corpus, term statistics) and publishes it.
  void load(Corpus corpus, std::string generation = "in-memory") {
    auto next = std::make_shared<State>();
    next->generation = std::move(generation);
    next->corpus = std::move(corpus);
    next->stats = CorpusStats::from_documents(next->corpus.docs);
    std::vector<ObjectEntry> objects;
    CropExtractor crops = cfg_.crops;
    crops.dim = next->dim() == 0 ? crops.dim : next->dim();
    for (std::size_t i = 0; i < next->corpus.docs.size(); ++i) {
      ImageDocument doc = next->corpus.docs[i];
      doc.detections = filter_detections(doc.detections, cfg_.min_detection_confidence);
      for (auto& e : extract_objects(doc, crops, cfg_.nms_iou)) objects.push_back(std::move(e));
      std::set<std::string> terms;
      for (const auto& a : doc.annotations) terms.insert(a.term);
      for (const auto& t : terms) next->documents_by_term[t].push_back(i);
    }
    next->objects = ObjectIndex::build(std::move(objects), crops.dim == 0 ? 1 : default_block_count(crops.dim));
    std::lock_guard lock(mu_);
    state_ = std::move(next);
  }

  /// Loads whatever generation CURRENT names.
  std::string reload() {
    if (cfg_.root.empty()) throw PreconditionError("service has no root configured");
    const std::string gen = current_generation(cfg_.root);
    load(load_corpus(indices_dir(cfg_.root) / gen), gen);
    spdlog::info("serving index generation {}", gen);
    return gen;
  }

  std::shared_ptr<const State> snapshot() const {
    std::lock_guard lock(mu_);
    if (!state_) throw HttpError(503, "no index loaded");
    return state_;
  }

  json health() const {
    std::lock_guard lock(mu_);
    if (!state_) return {{"status", "empty"}};
    return {{"status", "ok"},
            {"generation", state_->generation},
            {"documents", state_->corpus.docs.size()},
            {"objects", state_->objects.size()},
            {"leaves", state_->corpus.leaves.size()},
            {"dim", state_->dim()}};
  }

  json document(const std::string& hex) const {
    const auto st = snapshot();
    const ImageDocument* d = st->corpus.find(Signature::from_hex(hex));
    if (!d) throw NotFoundError(fmt::format("unknown signature {}", hex));
    json j = metadata_to_json(*d);
    j.erase("class_label");
    j["leaf"] = leaf_for(d->signature, st->corpus.leaves.size());
    j["fingerprint"] = fingerprint_to_json(d->fingerprint);
    return j;
  }

  // -------------------------------------------------------------------------

  json search(const json& req) const {
    const auto st = snapshot();
    const Query q = resolve_query(*st, req, true);
    const std::size_t k = requested_k(req);
    const bool enable_rerank = req.value("enable_rerank", true);
    const auto filters = req.value("filters", std::vector<std::string>{});

    std::size_t fetch = filters.empty() ? k : st->corpus.docs.size();
    RootResult found = visual(st, q.fingerprint, std::max<std::size_t>(fetch, 1));
    if (!filters.empty()) {
      std::erase_if(found.results, [&](const ScoredResult& r) { return !has_terms(*st, r.signature, filters); });
      if (found.results.size() > k) found.results.resize(k);
    }
    std::vector<ScoredResult> results = std::move(found.results);
    const auto dominant = q.doc ? dominant_of(*q.doc) : std::nullopt;
    if (enable_rerank) results = rerank_results(*st, std::move(results), q, dominant.has_value());

    const auto annotations = annotate(*st, results);
    const double conformity = results.empty() ? 0.0 : category_conformity(results, category_label_fn(*st));

    json dots = json::array();
    bool partial = found.partial;
    if (q.doc) {
      for (const auto& det : detections_of(*q.doc)) {
        dots.push_back(dot_for(st, *q.doc, det, k, partial));
      }
    }

    json out = {{"query", {{"form", q.form}, {"dominant_object", dominant.has_value()}}},
                {"results", results_json(results)},
                {"annotations", json(std::vector<Annotation>(
                                    annotations.begin(),
                                    annotations.begin() + static_cast<std::ptrdiff_t>(
                                                              std::min(annotations.size(), cfg_.annotation_top_m))))},
                {"conformity", conformity},
                {"dots", dots},
                {"partial", partial}};
    if (!filters.empty()) out["query"]["filters"] = filters;
    return out;
  }

  json object_search(const json& req) const {
    const auto st = snapshot();
    if (!req.contains("signature")) throw HttpError(400, "object search needs a signature");
    const ImageDocument& doc = require_doc(*st, req["signature"].get<std::string>());
    const std::size_t k = requested_k(req);
    BinaryFingerprint fp;
    json echo = {{"signature", doc.signature}};
    if (req.contains("object_id")) {
      const ObjectEntry* e = st->objects.find(Signature::from_hex(req["object_id"].get<std::string>()));
      if (!e || e->scene != doc.signature) {
        throw NotFoundError(fmt::format("unknown object {}", req["object_id"].get<std::string>()));
      }
      fp = e->fingerprint;
      echo["object_id"] = e->object_id;
    } else if (req.contains("box")) {
      fp = crop_fingerprint(*st, doc, req["box"].get<Box>());
      echo["box"] = req["box"];
    } else {
      throw HttpError(400, "object search needs object_id or box");
    }
    json scenes = json::array();
    for (const auto& hit : vdisc::object_search(st->objects, fp, k)) {
      scenes.push_back({{"scene", hit.scene},
                        {"distance", hit.distance},
                        {"similarity", similarity_from_distance(static_cast<std::size_t>(hit.distance), fp.dim())},
                        {"best_object", hit.best_object}});
    }
    return {{"query", echo}, {"scenes", scenes}};
  }

  json lens(const json& req) const {
    const auto st = snapshot();
    if (req.contains("crop_box")) throw HttpError(400, "lens takes a signature or raw_embedding, not a crop");
    const Query q = resolve_query(*st, req, false);
    const std::size_t k = requested_k(req);

    RootResult found = visual(st, q.fingerprint, k);
    const auto dominant = q.doc ? dominant_of(*q.doc) : std::nullopt;
    std::vector<ScoredResult> visual_results = rerank_results(*st, std::move(found.results), q, dominant.has_value());
    auto annotations = annotate(*st, visual_results);
    if (annotations.size() > cfg_.annotation_top_m) annotations.resize(cfg_.annotation_top_m);
    const QueryUnderstanding qu = understand_query(annotations, dominant, cfg_.blend.annotation_norm);
    const std::set<Source> gated = gate_sources(qu, cfg_.blend);

    std::vector<SourceResult> sources{{Source::kVisual, visual_results}};
    if (gated.contains(Source::kTextual)) sources.push_back({Source::kTextual, text_search(*st, qu, q, k)});
    if (gated.contains(Source::kObjectSearch)) {
      const BinaryFingerprint fp = crop_fingerprint(*st, *q.doc, dominant->box);
      std::vector<ScoredResult> scenes;
      for (const auto& hit : vdisc::object_search(st->objects, fp, k)) {
        ScoredResult r;
        r.signature = hit.scene;
        r.hamming_distance = hit.distance;
        r.similarity = similarity_from_distance(static_cast<std::size_t>(hit.distance), fp.dim());
        r.leaf_id = static_cast<int>(leaf_for(hit.scene, st->corpus.leaves.size()));
        r.source = Source::kObjectSearch;
        scenes.push_back(r);
      }
      sources.push_back({Source::kObjectSearch, std::move(scenes)});
    }
    std::vector<ScoredResult> blended = blend(sources, qu, cfg_.blend);
    if (blended.size() > k) blended.resize(k);

    json gated_names = json::array();
    for (Source s : cfg_.blend.priority) {
      if (gated.contains(s)) gated_names.push_back(std::string(to_string(s)));
    }
    return {{"query", {{"form", q.form}}},
            {"query_understanding",
             {{"annotations", qu.annotations},
              {"dominant", qu.dominant ? json(*qu.dominant) : json(nullptr)},
              {"annotation_confidence", qu.annotation_confidence},
              {"sources", gated_names}}},
            {"results", results_json(blended)},
            {"partial", found.partial}};
  }

 private:
  struct Query {
    std::string form;
    const ImageDocument* doc = nullptr;
    BinaryFingerprint fingerprint;
  };

  std::size_t requested_k(const json& req) const {
    if (!req.contains("k")) return cfg_.default_k;
    if (!req["k"].is_number_integer()) throw HttpError(400, "k must be an integer");
    const auto k = req["k"].get<long long>();
    if (k < 1) throw HttpError(400, "k must be >= 1");
    if (static_cast<std::size_t>(k) > cfg_.max_k) throw HttpError(400, fmt::format("k must be <= {}", cfg_.max_k));
    return static_cast<std::size_t>(k);
  }

  static const ImageDocument& require_doc(const State& st, const std::string& hex) {
    const ImageDocument* d = st.corpus.find(Signature::from_hex(hex));
    if (!d) throw NotFoundError(fmt::format("unknown signature {}", hex));
    return *d;
  }

  BinaryFingerprint crop_fingerprint(const State& st, const ImageDocument& doc, const Box& box) const {
    CropExtractor crops = cfg_.crops;
    crops.dim = doc.fingerprint.dim();
    (void)st;
    return crops.fingerprint(doc, box);
  }

  Query resolve_query(const State& st, const json& req, bool allow_crop) const {
    const bool by_sig = req.contains("signature");
    const bool by_raw = req.contains("raw_embedding");
    const bool by_crop = req.contains("crop_box");
    if (by_sig == by_raw) throw HttpError(400, "give exactly one of signature or raw_embedding");
    if (by_crop && (!by_sig || !allow_crop)) throw HttpError(400, "crop_box requires a signature");
    Query q;
    if (by_raw) {
      const json& raw = req["raw_embedding"];
      Embedding e;
      if (raw.is_array()) {
        e.values = raw.get<std::vector<float>>();
      } else {
        e = embedding_from_json(raw);
      }
      if (e.dim() == 0 || !e.finite()) throw HttpError(400, "raw_embedding must be a non-empty finite vector");
      if (st.dim() != 0 && e.dim() != st.dim()) {
        throw HttpError(400, fmt::format("embedding dim {} does not match index dim {}", e.dim(), st.dim()));
      }
      q.form = "embedding";
      q.fingerprint = binarize(e);
      return q;
    }
    q.doc = &require_doc(st, req["signature"].get<std::string>());
    if (by_crop) {
      q.form = "crop";
      q.fingerprint = crop_fingerprint(st, *q.doc, req["crop_box"].get<Box>());
    } else {
      q.form = "signature";
      q.fingerprint = q.doc->fingerprint;
    }
    return q;
  }

  RootResult visual(const std::shared_ptr<const State>& st, const BinaryFingerprint& fp, std::size_t k) const {
    std::vector<LeafQuery> leaves;
    for (std::size_t l = 0; l < st->corpus.leaves.size(); ++l) {
      leaves.emplace_back([st, l](const BinaryFingerprint& q, std::size_t kk) { return st->corpus.leaves[l].knn(q, kk); });
    }
    return root_knn(std::span<const LeafQuery>(leaves), fp, k, {cfg_.partial_ok, cfg_.leaf_deadline});
  }

  std::vector<DetectedObject> detections_of(const ImageDocument& doc) const {
    return nms(filter_detections(doc.detections, cfg_.min_detection_confidence), cfg_.nms_iou);
  }

  std::optional<DetectedObject> dominant_of(const ImageDocument& doc) const {
    return dominant_object(detections_of(doc), doc.width, doc.height);
  }

  std::vector<ScoredResult> rerank_results(const State& st, std::vector<ScoredResult> results, const Query& q,
                                           bool dominant) const {
    const CategoryVector query_category = q.doc ? q.doc->category : CategoryVector{};
    const MetadataFeatures extra = [&st, &query_category](const ScoredResult& r) {
      double dot = 0.0;
      if (const ImageDocument* d = st.corpus.find(r.signature)) {
        for (const auto& [i, w] : query_category.entries) {
          if (const auto it = d->category.entries.find(i); it != d->category.entries.end()) dot += w * it->second;
        }
      }
      return FeatureRow{{"cat_sim", dot}};
    };
    return rerank(std::move(results), cfg_.model, {query_category, dominant}, cfg_.visual_gain, extra);
  }

  std::vector<Annotation> annotate(const State& st, std::span<const ScoredResult> results) const {
    return aggregate_annotations(
        results,
        [&st](const Signature& s) {
          const ImageDocument* d = st.corpus.find(s);
          return d ? d->annotations : std::vector<Annotation>{};
        },
        st.stats, cfg_.annotation_top_n);
  }

  static CategoryLookup category_label_fn(const State& st) {
    return [&st](const ScoredResult& r) -> std::optional<std::string> {
      const ImageDocument* d = st.corpus.find(r.signature);
      if (!d) return std::nullopt;
      const auto top = d->category.top();
      if (!top) return std::nullopt;
      return fmt::format("cat_{}", *top);
    };
  }

  static bool has_terms(const State& st, const Signature& s, const std::vector<std::string>& terms) {
    const ImageDocument* d = st.corpus.find(s);
    if (!d) return false;
    return std::all_of(terms.begin(), terms.end(), [&](const std::string& t) {
      return std::any_of(d->annotations.begin(), d->annotations.end(), [&](const Annotation& a) { return a.term == t; });
    });
  }

  /// Runs the object-scoped visual search behind a dot and decides whether
  /// to show it.
  json dot_for(const std::shared_ptr<const State>& st, const ImageDocument& doc, const DetectedObject& det, std::size_t k,
               bool& partial) const {
    const BinaryFingerprint fp = crop_fingerprint(*st, doc, det.box);
    RootResult found = visual(st, fp, k);
    partial = partial || found.partial;
    const auto annotations = annotate(*st, found.results);
    SuppressionSignals signals;
    signals.top_similarity = found.results.empty() ? 0.0 : found.results.front().similarity;
    signals.top_annotation_score = annotations.empty() ? 0.0 : annotations.front().weight;
    signals.category_conformity =
        found.results.empty() ? 0.0 : category_conformity(found.results, category_label_fn(*st));
    return {{"box", det.box},
            {"category", det.category},
            {"confidence", det.confidence},
            {"object_id", object_id_for(doc.signature, det.box)},
            {"signals",
             {{"top_similarity", signals.top_similarity},
              {"top_annotation_score", signals.top_annotation_score},
              {"category_conformity", signals.category_conformity}}},
            {"show", suppress_dot(signals, cfg_.thresholds())}};
  }

  /// Documents sharing the query's strongest annotation terms, scored by
  /// summed idf.
  std::vector<ScoredResult> text_search(const State& st, const QueryUnderstanding& qu, const Query& q,
                                        std::size_t k) const {
    std::map<std::size_t, double> score;
    for (std::size_t i = 0; i < std::min(cfg_.text_query_terms, qu.annotations.size()); ++i) {
      const auto it = st.documents_by_term.find(qu.annotations[i].term);
      if (it == st.documents_by_term.end()) continue;
      const double idf = st.stats.idf(qu.annotations[i].term);
      for (std::size_t d : it->second) score[d] += idf;
    }
    std::vector<ScoredResult> out;
    for (const auto& [i, s] : score) {
      const ImageDocument& d = st.corpus.docs[i];
      ScoredResult r;
      r.signature = d.signature;
      r.hamming_distance = static_cast<int>(hamming(q.fingerprint, d.fingerprint));
      r.similarity = similarity_from_distance(static_cast<std::size_t>(r.hamming_distance), d.fingerprint.dim());
      r.rerank_score = s;
      r.leaf_id = static_cast<int>(leaf_for(d.signature, st.corpus.leaves.size()));
      r.source = Source::kTextual;
      out.push_back(r);
    }
    std::sort(out.begin(), out.end(), [](const ScoredResult& a, const ScoredResult& b) {
      if (a.rerank_score != b.rerank_score) return a.rerank_score > b.rerank_score;
      return a.signature < b.signature;
    });
    if (out.size() > k) out.resize(k);
    return out;
  }

  static json results_json(std::span<const ScoredResult> results) {
    json out = json::array();
    for (const auto& r : results) out.push_back(to_json_value(r));
    return out;
  }

  ServiceConfig cfg_;
  mutable std::mutex mu_;
  std::shared_ptr<const State> state_;
};

}  // namespace vdisc::service
