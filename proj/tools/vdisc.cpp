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

// vdisc: command-line driver for ingest, the fingerprint pipeline, index
// generations, the HTTP service and offline evaluation.
//
// Exit status: 0 on success, 1 on invalid input or usage, 2 when stored
// data fails an integrity check.

#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "vdisc/engine.hpp"
#include "vdisc/eval.hpp"
#include "vdisc/http.hpp"
#include "vdisc/index_store.hpp"
#include "vdisc/ingest.hpp"
#include "vdisc/pipeline.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;
namespace pl = vdisc::pipeline;

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

std::vector<std::size_t> parse_ks(const std::string& s) {
  std::vector<std::size_t> ks;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t comma = std::min(s.find(',', pos), s.size());
    const std::string item = s.substr(pos, comma - pos);
    std::size_t used = 0;
    long long v = -1;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception&) {
    }
    if (used != item.size() || v < 1) throw vdisc::InputError(fmt::format("bad K '{}'", item));
    ks.push_back(static_cast<std::size_t>(v));
    pos = comma + 1;
  }
  return ks;
}

vdisc::service::HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vdisc visual discovery engine"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "debug logging");

  // ingest -----------------------------------------------------------------
  std::string root;
  auto* ingest = app.add_subcommand("ingest", "add documents or image files to the catalog");
  std::string docs_file, detections_file, upload_time;
  std::vector<std::string> images;
  double min_confidence = vdisc::kDefaultDetectionThreshold;
  std::size_t image_dim = 64;
  std::uint64_t image_seed = 0;
  pl::ImageFileMeta image_meta;
  ingest->add_option("--root", root, "pipeline root")->required();
  auto* docs_opt = ingest->add_option("--docs", docs_file, "JSON-lines documents with embeddings");
  auto* images_opt = ingest->add_option("--images", images, "raw image files")->excludes(docs_opt);
  ingest->add_option("--detections", detections_file, "JSON-lines detections per signature");
  ingest->add_option("--min-confidence", min_confidence, "detection confidence filter");
  ingest->add_option("--upload-time", upload_time, "upload time for --images (YYYY-MM-DDTHH:MM:SSZ, default now)");
  ingest->add_option("--width", image_meta.width, "width for --images");
  ingest->add_option("--height", image_meta.height, "height for --images");
  ingest->add_option("--dim", image_dim, "fingerprint dimension for --images");
  ingest->add_option("--seed", image_seed, "extractor seed for --images");
  (void)images_opt;

  // fp ---------------------------------------------------------------------
  auto* fp = app.add_subcommand("fp", "fingerprint pipeline");
  fp->require_subcommand(1);
  fp->add_option("--root", root, "pipeline root")->required();
  auto* fp_register = fp->add_subcommand("register", "register a feature extractor version");
  std::string feature_name, kind = "seeded-hash", table_path;
  int feature_version = 1;
  std::size_t feature_dim = 64;
  std::uint64_t feature_seed = 0;
  bool index_feature = false;
  fp_register->add_option("--feature", feature_name, "feature name")->required();
  fp_register->add_option("--version", feature_version, "extractor version");
  fp_register->add_option("--kind", kind, "seeded-hash or file-ingest");
  fp_register->add_option("--dim", feature_dim, "dimension");
  fp_register->add_option("--seed", feature_seed, "seed (seeded-hash)");
  fp_register->add_option("--path", table_path, "embedding table (file-ingest)");
  fp_register->add_flag("--index", index_feature, "serve this feature");
  auto* fp_plan = fp->add_subcommand("plan", "seal epochs and list missing jobs");
  auto* fp_run = fp->add_subcommand("run", "execute planned chunks");
  unsigned workers = 1;
  fp_run->add_option("--workers", workers, "worker threads");
  auto* fp_merge = fp->add_subcommand("merge", "merge per-feature outputs per epoch");
  auto* fp_join = fp->add_subcommand("join", "materialize the visual join");
  auto* fp_all = fp->add_subcommand("all", "run, merge and join");
  fp_all->add_option("--workers", workers, "worker threads");
  auto* fp_lookup = fp->add_subcommand("lookup", "print the joined record for a signature");
  std::string lookup_sig;
  fp_lookup->add_option("signature", lookup_sig, "image signature")->required();

  // index ------------------------------------------------------------------
  auto* index = app.add_subcommand("index", "index generations");
  index->require_subcommand(1);
  index->add_option("--root", root, "pipeline root")->required();
  vdisc::service::IndexBuildOptions build_opts;
  auto* index_build = index->add_subcommand("build", "build a new generation from the join");
  index_build->add_option("--shards", build_opts.shards, "leaf count");
  index_build->add_option("--m", build_opts.m, "token blocks per fingerprint (0 = default)");
  auto* index_swap = index->add_subcommand("swap", "publish a generation");
  std::string generation;
  index_swap->add_option("--generation", generation, "generation name (default: newest)");
  auto* index_list = index->add_subcommand("list", "list generations");

  // serve ------------------------------------------------------------------
  auto* serve = app.add_subcommand("serve", "run the HTTP API");
  std::string config_path, host;
  int port = -1;
  serve->add_option("--config", config_path, "service config JSON");
  serve->add_option("--root", root, "pipeline root (overrides config)");
  serve->add_option("--port", port, "port (overrides config and VDISC_PORT; 0 = any)");
  serve->add_option("--host", host, "bind address");

  // eval -------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "offline precision@K evaluation");
  eval->require_subcommand(1);
  auto* eval_run = eval->add_subcommand("run", "evaluate one variant");
  std::string dataset, metric = "hamming", repr = "binary", ks_text = "1,5,10", report_path;
  unsigned threads = 0;
  eval_run->add_option("--dataset", dataset, "JSON-lines dataset")->required();
  eval_run->add_option("--metric", metric, "l1, l2 or hamming");
  eval_run->add_option("--repr", repr, "raw or binary");
  eval_run->add_option("--k", ks_text, "comma-separated K values");
  eval_run->add_option("--threads", threads, "worker threads (0 = hardware)");
  eval_run->add_option("--report", report_path, "write the JSON report here");
  auto* eval_synth = eval->add_subcommand("synth", "write a synthetic labelled dataset");
  vdisc::eval::SynthParams synth;
  std::string synth_out;
  eval_synth->add_option("--out", synth_out, "output path")->required();
  eval_synth->add_option("--classes", synth.num_classes, "class count");
  eval_synth->add_option("--per-class", synth.per_class, "documents per class");
  eval_synth->add_option("--dim", synth.dim, "embedding dimension");
  eval_synth->add_option("--tightness", synth.cluster_tightness, "per-coordinate jitter");
  eval_synth->add_option("--noise", synth.noise_docs, "noise documents");
  eval_synth->add_option("--queries-per-class", synth.queries_per_class, "queries per class");
  eval_synth->add_option("--seed", synth.seed, "random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  spdlog::set_default_logger(spdlog::stderr_color_mt("vdisc"));

  try {
    const pl::Layout layout{root};
    if (*ingest) {
      pl::IngestOptions opts;
      opts.detection_threshold = min_confidence;
      json out = json::object();
      if (!docs_file.empty()) {
        const auto s = pl::ingest_documents_file(layout, docs_file, opts);
        out["added"] = s.added;
        out["unchanged"] = s.unchanged;
      } else if (!images.empty()) {
        image_meta.upload_time = upload_time.empty()
                                     ? std::chrono::floor<std::chrono::seconds>(std::chrono::system_clock::now())
                                     : vdisc::parse_timestamp(upload_time);
        std::vector<fs::path> files(images.begin(), images.end());
        const auto s = pl::ingest_image_files(layout, files, image_meta, image_dim, image_seed);
        out["added"] = s.added;
        out["unchanged"] = s.unchanged;
      } else if (detections_file.empty()) {
        throw vdisc::InputError("ingest needs --docs, --images or --detections");
      }
      if (!detections_file.empty()) out["detections_updated"] = pl::ingest_detections_file(layout, detections_file, opts);
      print(out);
    } else if (*fp) {
      pl::Pipeline p(root);
      if (*fp_register) {
        pl::PipelineConfig cfg = fs::exists(layout.config()) ? pl::load_config(layout) : pl::PipelineConfig{};
        pl::FeatureSpec spec{feature_name, feature_version,
                             pl::extractor_from_json({{"kind", kind}, {"dim", feature_dim}, {"seed", feature_seed},
                                                      {"path", table_path}})};
        spec.extractor.validate();
        std::erase_if(cfg.features, [&](const pl::FeatureSpec& f) { return f.name == feature_name; });
        cfg.features.push_back(spec);
        if (index_feature || cfg.index_feature.empty()) cfg.index_feature = feature_name;
        pl::save_config(layout, cfg);
        print({{"registered", feature_name}, {"version", feature_version}, {"index_feature", cfg.index_feature}});
      } else if (*fp_plan) {
        std::vector<pl::EpochId> sealed;
        pl::RunStats s;
        s.jobs_planned = p.plan(&sealed);
        s.epochs_sealed = std::move(sealed);
        print(pl::to_json(s));
      } else if (*fp_run) {
        print(pl::to_json(p.run({workers, {}})));
      } else if (*fp_merge) {
        print(pl::to_json(p.merge()));
      } else if (*fp_join) {
        print(pl::to_json(p.join()));
      } else if (*fp_all) {
        print(pl::to_json(p.run_all({workers, {}})));
      } else if (*fp_lookup) {
        const auto rec = p.open_join().lookup(vdisc::Signature::from_hex(lookup_sig));
        if (!rec) throw vdisc::NotFoundError(fmt::format("{} is not in the join", lookup_sig));
        std::cout << pl::fingerprint_line(*rec, true) << "\n";
      }
    } else if (*index) {
      if (*index_build) {
        print({{"generation", vdisc::service::build_generation(root, build_opts)}});
      } else if (*index_swap) {
        print({{"current", vdisc::service::swap_generation(root, generation)}});
      } else if (*index_list) {
        print({{"generations", vdisc::service::list_generations(root)}});
      }
    } else if (*serve) {
      json cfg_json = json::object();
      if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw vdisc::NotFoundError(fmt::format("cannot open '{}'", config_path));
        cfg_json = json::parse(in);
      }
      auto cfg = vdisc::service::ServiceConfig::from_json(cfg_json);
      if (!root.empty()) cfg.root = root;
      if (port >= 0) cfg.port = port;
      if (!host.empty()) cfg.host = host;
      vdisc::service::Engine engine(cfg);
      engine.reload();
      vdisc::service::HttpServer server(engine);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      spdlog::info("listening on {}:{}", cfg.host, cfg.port);
      if (!server.listen(cfg.host, cfg.port)) {
        throw vdisc::PreconditionError(fmt::format("cannot bind {}:{}", cfg.host, cfg.port));
      }
    } else if (*eval) {
      if (*eval_synth) {
        const auto ds = vdisc::eval::synth_dataset(synth);
        vdisc::eval::save_dataset(ds, synth_out);
        print({{"documents", ds.corpus.size()}, {"queries", ds.queries.size()}, {"path", synth_out}});
      } else if (*eval_run) {
        const auto ds = vdisc::eval::load_dataset(dataset);
        const vdisc::eval::Variant v{vdisc::eval::parse_metric(metric), vdisc::eval::parse_representation(repr)};
        const std::vector<vdisc::eval::EvalRow> rows{vdisc::eval::run_eval(ds, v, parse_ks(ks_text), threads)};
        const json report = vdisc::eval::report_json(rows);
        if (!report_path.empty()) vdisc::io::atomic_write(report_path, report.dump(2) + "\n");
        print(report);
      }
    }
  } catch (const vdisc::Error& e) {
    spdlog::error("{}", e.what());
    return e.exit_code();
  } catch (const json::exception& e) {
    spdlog::error("invalid JSON: {}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
