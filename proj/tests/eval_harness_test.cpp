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

#include <random>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "vdisc/eval.hpp"

namespace vdisc::eval {
namespace {

ImageDocument labelled(const std::string& name, std::vector<float> values, const std::string& label) {
  ImageDocument d;
  d.signature = compute_signature(name);
  d.embedding.values = std::move(values);
  d.fingerprint = binarize(d.embedding);
  d.class_label = label;
  return d;
}

// Points on a line; q1 at 0 and q2 at 10 are the queries (both label A).
//   q1 ranking: d1 B, d2 B, d3 A, d4 B, d5 B, d6 B, d7 A, d8 A
//   q2 ranking: d8 A, d7 A, d6 B, d5 B, d4 B, d3 A, d2 B, d1 B
EvalDataset raw_fixture() {
  EvalDataset ds;
  const std::vector<std::tuple<std::string, float, std::string>> rows{
      {"q1", 0.f, "A"}, {"q2", 10.f, "A"}, {"d1", 1.f, "B"}, {"d2", 2.f, "B"}, {"d3", 3.f, "A"},
      {"d4", 4.f, "B"}, {"d5", 5.f, "B"},  {"d6", 6.f, "B"}, {"d7", 8.f, "A"}, {"d8", 9.f, "A"}};
  for (const auto& [name, x, label] : rows) ds.corpus.push_back(labelled(name, {x, 0.f}, label));
  ds.queries = {compute_signature("q1"), compute_signature("q2")};
  return ds;
}

// Four-bit codes. Distances from q1=0000 / q2=1111:
//   d8 0/4 B, d1 1/3 B, d4 1/3 A, d2 2/2 A, d5 2/2 B, d3 3/1 B, d6 3/1 A, d7 4/0 A
EvalDataset binary_fixture() {
  EvalDataset ds;
  const std::vector<std::tuple<std::string, std::string, std::string>> rows{
      {"q1", "0000", "A"}, {"q2", "1111", "A"}, {"d1", "0001", "B"}, {"d2", "0011", "A"}, {"d3", "0111", "B"},
      {"d4", "1000", "A"}, {"d5", "1100", "B"}, {"d6", "1110", "A"}, {"d7", "1111", "A"}, {"d8", "0000", "B"}};
  for (const auto& [name, bits, label] : rows) {
    std::vector<float> v;
    for (char c : bits) v.push_back(c == '1' ? 1.f : -1.f);
    ds.corpus.push_back(labelled(name, v, label));
  }
  ds.queries = {compute_signature("q1"), compute_signature("q2")};
  return ds;
}

TEST(PrecisionAtK, Examples) {
  const std::vector<std::string> labels{"A", "B", "A"};
  EXPECT_EQ(precision_at_k(labels, "A", 1), 1.0);
  EXPECT_DOUBLE_EQ(precision_at_k(labels, "A", 3), 2.0 / 3.0);
  EXPECT_EQ(precision_at_k({}, "A", 5), 0.0);
  EXPECT_EQ(precision_at_k(std::vector<std::string>(7, "A"), "A", 5), 1.0);
  EXPECT_THROW(precision_at_k(labels, "A", 0), InputError);
}

TEST(PrecisionAtK, PrefixConsistency) {
  std::mt19937_64 rng(51);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::string> labels;
    for (std::size_t i = 0, n = rng() % 15; i < n; ++i) labels.push_back(rng() % 2 ? "A" : "B");
    const std::size_t k = 1 + rng() % 12;
    const std::vector<std::string> prefix(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(std::min(k, labels.size())));
    const double p = precision_at_k(labels, "A", k);
    EXPECT_EQ(p, precision_at_k(prefix, "A", k));
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
  }
}

TEST(RunEval, RawHandFixture) {
  for (Metric m : {Metric::kL1, Metric::kL2}) {
    const auto row = run_eval(raw_fixture(), {m, Representation::kRaw}, {1, 5, 10});
    EXPECT_EQ(row.queries, 2u);
    EXPECT_DOUBLE_EQ(row.mean_precision[0], 0.5);
    EXPECT_DOUBLE_EQ(row.mean_precision[1], 0.3);
    EXPECT_DOUBLE_EQ(row.mean_precision[2], 0.3);
  }
}

TEST(RunEval, BinaryHandFixture) {
  const auto row = run_eval(binary_fixture(), {Metric::kHamming, Representation::kBinary}, {1, 5});
  EXPECT_DOUBLE_EQ(row.mean_precision[0], 0.5);
  EXPECT_DOUBLE_EQ(row.mean_precision[1], 0.5);
}

TEST(RunEval, MismatchedVariantRejected) {
  EXPECT_THROW(run_eval(raw_fixture(), {Metric::kHamming, Representation::kRaw}), InputError);
  EXPECT_THROW(run_eval(raw_fixture(), {Metric::kL1, Representation::kBinary}), InputError);
}

TEST(RunEval, UnlabelledDocumentRejected) {
  auto ds = raw_fixture();
  ds.corpus[3].class_label.reset();
  EXPECT_THROW(run_eval(ds, {Metric::kL1, Representation::kRaw}), InputError);
}

TEST(RunEval, TwoClusterSeparation) {
  EvalDataset ds;
  for (int i = 0; i < 12; ++i) {
    const float j = 0.01f * static_cast<float>(i);
    ds.corpus.push_back(labelled("a" + std::to_string(i), {1.f + j, 1.f, 1.f, 1.f}, "A"));
    ds.corpus.push_back(labelled("b" + std::to_string(i), {-1.f - j, -1.f, -1.f, -1.f}, "B"));
  }
  ds.queries = {compute_signature("a0"), compute_signature("b0")};
  for (Variant v : {Variant{Metric::kL1, Representation::kRaw}, Variant{Metric::kL2, Representation::kRaw},
                    Variant{Metric::kHamming, Representation::kBinary}}) {
    const auto row = run_eval(ds, v, {1, 5, 10});
    for (double p : row.mean_precision) EXPECT_EQ(p, 1.0);
  }
}

TEST(Ranker, BinaryMatchesOracleAndExcludesQuery) {
  SynthParams p;
  p.num_classes = 5;
  p.per_class = 40;
  p.noise_docs = 50;
  p.queries_per_class = 4;
  const auto ds = synth_dataset(p);
  const Ranker ranker(ds, {Metric::kHamming, Representation::kBinary});
  std::vector<std::pair<Signature, BinaryFingerprint>> indexed;
  const std::set<Signature> queries(ds.queries.begin(), ds.queries.end());
  for (const auto& d : ds.corpus) {
    if (!queries.contains(d.signature)) indexed.push_back({d.signature, d.fingerprint});
  }
  for (const auto& d : ds.corpus) {
    if (!queries.contains(d.signature)) continue;
    const auto ranked = ranker.rank(d, 10);
    const auto expected = testing::oracle_knn(indexed, d.fingerprint, 10);
    ASSERT_EQ(ranked.size(), expected.size());
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      EXPECT_EQ(ranked[i]->signature.hex(), expected[i].hex);
      EXPECT_NE(ranked[i]->signature, d.signature);
    }
  }
}

TEST(Synth, DeterministicAndShaped) {
  SynthParams p;
  p.num_classes = 3;
  p.per_class = 5;
  p.noise_docs = 4;
  const auto a = synth_dataset(p);
  const auto b = synth_dataset(p);
  EXPECT_EQ(a.corpus, b.corpus);
  EXPECT_EQ(a.queries, b.queries);
  EXPECT_EQ(a.corpus.size(), 19u);
  EXPECT_EQ(a.corpus.back().class_label, kNoiseLabel);

  p.per_class = 0;
  const auto noise_only = synth_dataset(p);
  EXPECT_EQ(noise_only.corpus.size(), 4u);
  for (const auto& d : noise_only.corpus) EXPECT_EQ(d.class_label, kNoiseLabel);
}

TEST(Synth, ZeroTightnessGivesPerfectPrecision) {
  SynthParams p;
  p.num_classes = 6;
  p.per_class = 15;
  p.cluster_tightness = 0.0;
  p.noise_docs = 30;
  const auto ds = synth_dataset(p);
  for (Variant v : {Variant{Metric::kL1, Representation::kRaw}, Variant{Metric::kL2, Representation::kRaw},
                    Variant{Metric::kHamming, Representation::kBinary}}) {
    const auto row = run_eval(ds, v, {1, 5, 10}, 2);
    for (double prec : row.mean_precision) EXPECT_EQ(prec, 1.0);
  }
}

TEST(RunEval, ThreadCountDoesNotChangeResult) {
  SynthParams p;
  p.noise_docs = 40;
  const auto ds = synth_dataset(p);
  const auto one = run_eval(ds, {Metric::kL2, Representation::kRaw}, {1, 5, 10}, 1);
  const auto four = run_eval(ds, {Metric::kL2, Representation::kRaw}, {1, 5, 10}, 4);
  EXPECT_EQ(one.mean_precision, four.mean_precision);
}

TEST(Dataset, SaveLoadRoundTrip) {
  testing::TempDir dir;
  SynthParams p;
  p.num_classes = 2;
  p.per_class = 4;
  p.noise_docs = 2;
  const auto ds = synth_dataset(p);
  save_dataset(ds, (dir.path() / "d.jsonl").string());
  const auto back = load_dataset((dir.path() / "d.jsonl").string());
  EXPECT_EQ(back.corpus, ds.corpus);
  EXPECT_EQ(back.queries, ds.queries);
  EXPECT_THROW(load_dataset((dir.path() / "missing.jsonl").string()), NotFoundError);
}

TEST(Report, ColumnsAndCaveat) {
  const auto row = run_eval(raw_fixture(), {Metric::kL1, Representation::kRaw}, {1, 5});
  const auto j = report_json(std::vector<EvalRow>{row});
  EXPECT_EQ(j["caveat"], kReportCaveat);
  EXPECT_EQ(j["rows"][0]["type"], "raw");
  EXPECT_EQ(j["rows"][0]["dist"], "L1");
  EXPECT_EQ(j["rows"][0]["model"], "synthetic");
  EXPECT_DOUBLE_EQ(j["rows"][0]["P@1"].get<double>(), 0.5);
  EXPECT_DOUBLE_EQ(j["rows"][0]["P@5"].get<double>(), 0.3);
}

}  // namespace
}  // namespace vdisc::eval
