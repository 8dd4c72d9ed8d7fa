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

#include <chrono>
#include <cmath>
#include <random>
#include <thread>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "vdisc/codec.hpp"
#include "vdisc/index.hpp"
#include "vdisc/retrieval.hpp"

namespace vdisc {
namespace {

using testing::as_hits;
using testing::oracle_knn;
using testing::random_fp;
using testing::sig_of;

using Corpus = std::vector<std::pair<Signature, BinaryFingerprint>>;

std::vector<LeafIndex> split_leaves(const Corpus& c, std::size_t leaves, std::size_t m) {
  std::vector<std::vector<LeafDoc>> parts(leaves);
  for (std::size_t i = 0; i < c.size(); ++i) {
    parts[i % leaves].push_back({c[i].first, c[i].second, static_cast<std::uint32_t>(i)});
  }
  std::vector<LeafIndex> out;
  for (std::size_t l = 0; l < leaves; ++l) out.push_back(LeafIndex::build(std::move(parts[l]), m, true, static_cast<int>(l)));
  return out;
}

ScoredResult candidate(const std::string& name, double sim) {
  ScoredResult r;
  r.signature = compute_signature(name);
  r.similarity = sim;
  return r;
}

TEST(RootKnn, MatchesUnionOracle) {
  std::mt19937_64 rng(21);
  Corpus c;
  const auto base = random_fp(rng, 64);
  for (std::size_t i = 0; i < 900; ++i) {
    c.push_back({sig_of(i), i % 2 ? random_fp(rng, 64) : testing::perturb(rng, base, rng() % 12)});
  }
  const auto leaves = split_leaves(c, 3, 16);
  for (int t = 0; t < 30; ++t) {
    const auto q = t % 2 ? random_fp(rng, 64) : testing::perturb(rng, base, rng() % 6);
    for (std::size_t k : {1u, 10u, 25u}) {
      EXPECT_EQ(as_hits(root_knn(std::span<const LeafIndex>(leaves), q, k).results), oracle_knn(c, q, k));
    }
  }
}

TEST(RootKnn, TieGoesToSmallerSignature) {
  const auto fp = BinaryFingerprint::from_string(std::string(64, '1'));
  const Signature a = compute_signature("a"), b = compute_signature("b");
  std::vector<LeafIndex> leaves;
  leaves.push_back(LeafIndex::build(std::vector<LeafDoc>{{a, fp, 0}}, 16, true, 0));
  leaves.push_back(LeafIndex::build(std::vector<LeafDoc>{{b, fp, 0}}, 16, true, 1));
  const auto r = root_knn(std::span<const LeafIndex>(leaves), fp, 1).results;
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].signature, std::min(a, b));
}

TEST(RootKnn, AllLeavesEmpty) {
  std::vector<LeafIndex> leaves(3);
  for (auto& l : leaves) l = LeafIndex::build(std::vector<LeafDoc>{}, 16);
  EXPECT_TRUE(root_knn(std::span<const LeafIndex>(leaves), BinaryFingerprint(64), 5).results.empty());
}

TEST(RootKnn, FailedLeafIsPartialOrError) {
  const auto fp = BinaryFingerprint::from_string("1111");
  std::vector<LeafQuery> leaves{
      [&](const BinaryFingerprint&, std::size_t) {
        ScoredResult r;
        r.signature = compute_signature("ok");
        return std::vector<ScoredResult>{r};
      },
      [](const BinaryFingerprint&, std::size_t) -> std::vector<ScoredResult> { throw Error("leaf down"); }};
  try {
    root_knn(std::span<const LeafQuery>(leaves), fp, 3);
    FAIL() << "expected PartialResultError";
  } catch (const PartialResultError& e) {
    EXPECT_EQ(e.failed_leaves(), std::vector<int>{1});
  }
  const auto r = root_knn(std::span<const LeafQuery>(leaves), fp, 3, {true, {}});
  EXPECT_TRUE(r.partial);
  EXPECT_EQ(r.failed_leaves, std::vector<int>{1});
  EXPECT_EQ(r.results.size(), 1u);
}

TEST(RootKnn, DeadlineDropsSlowLeaf) {
  const auto fp = BinaryFingerprint::from_string("1111");
  std::vector<LeafQuery> leaves{
      [](const BinaryFingerprint&, std::size_t) { return std::vector<ScoredResult>{}; },
      [](const BinaryFingerprint&, std::size_t) {
        std::this_thread::sleep_for(std::chrono::milliseconds(500));
        return std::vector<ScoredResult>{};
      }};
  const auto r = root_knn(std::span<const LeafQuery>(leaves), fp, 3, {true, std::chrono::milliseconds(50)});
  EXPECT_TRUE(r.partial);
  EXPECT_EQ(r.failed_leaves, std::vector<int>{1});
}

TEST(CrossFeatures, Examples) {
  EXPECT_EQ(cross_features(CategoryVector{{{7, 1.0}}}, 0.6), (FeatureRow{{"cat_cross_7", 0.6}}));
  EXPECT_TRUE(cross_features(CategoryVector{}, 0.6).empty());
  const auto row = cross_features(CategoryVector{{{2, 0.5}, {9, 0.25}}}, 0.8);
  ASSERT_EQ(row.size(), 2u);
  EXPECT_DOUBLE_EQ(row.at("cat_cross_2"), 0.4);
  EXPECT_DOUBLE_EQ(row.at("cat_cross_9"), 0.2);
  EXPECT_THROW(cross_features(CategoryVector{}, 1.5), InputError);
}

TEST(CrossFeatures, CountMatchesEntries) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 500; ++t) {
    CategoryVector c;
    for (int i = 0; i < kNumCategories; ++i) {
      if (rng() % 3 == 0) c.entries[i] = 0.01 + 0.99 * u(rng);
    }
    const auto row = cross_features(c, 0.01 + 0.99 * u(rng));
    EXPECT_EQ(row.size(), c.entries.size());
    EXPECT_LE(row.size(), 32u);
    for (const auto& [name, v] : row) EXPECT_NE(v, 0.0) << name;
  }
}

TEST(Score, HandFixtures) {
  const RankingModel m{{{"vis_sim", 1.0}, {"pop", 2.0}}, {"vis_sim"}};
  const FeatureRow row{{"vis_sim", 0.5}, {"pop", 0.1}};
  EXPECT_DOUBLE_EQ(score(m, row, false, 5.0), 0.7);
  EXPECT_DOUBLE_EQ(score(m, row, true, 5.0), 2.7);
  EXPECT_DOUBLE_EQ(score(m, {{"vis_sim", 0.5}, {"unknown", 100.0}}, false), 0.5);
  EXPECT_THROW(score(m, row, true, 0.0), InputError);
}

TEST(Score, GatingMonotonicity) {
  const RankingModel m{{{"vis_sim", 0.7}, {"pop", 1.3}}, {"vis_sim"}};
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 500; ++t) {
    const double pop = u(rng), s1 = u(rng), s2 = u(rng);
    const double ungated = score(m, {{"vis_sim", s1}, {"pop", pop}}, false) - score(m, {{"vis_sim", s2}, {"pop", pop}}, false);
    const double gated = score(m, {{"vis_sim", s1}, {"pop", pop}}, true) - score(m, {{"vis_sim", s2}, {"pop", pop}}, true);
    EXPECT_EQ(gated > 0, s1 > s2);
    EXPECT_NEAR(gated, 5.0 * ungated, 1e-9);
  }
}

TEST(Rerank, ThreeCandidateFixture) {
  // scores: a 0.9+2*0.1, b 0.5+2*0.5, c 0.7+2*0.3 ungated;
  //         a 4.5+0.2,   b 2.5+1.0,   c 3.5+0.6 gated.
  const RankingModel m{{{"vis_sim", 1.0}, {"pop", 2.0}}, {"vis_sim"}};
  const std::map<std::string, double> pop{{compute_signature("a").hex(), 0.1},
                                          {compute_signature("b").hex(), 0.5},
                                          {compute_signature("c").hex(), 0.3}};
  const MetadataFeatures extra = [&](const ScoredResult& r) { return FeatureRow{{"pop", pop.at(r.signature.hex())}}; };
  const std::vector<ScoredResult> in{candidate("a", 0.9), candidate("b", 0.5), candidate("c", 0.7)};

  const auto plain = rerank(in, m, {{}, false}, 5.0, extra);
  ASSERT_EQ(plain.size(), 3u);
  EXPECT_EQ(plain[0].signature, compute_signature("b"));
  EXPECT_EQ(plain[1].signature, compute_signature("c"));
  EXPECT_EQ(plain[2].signature, compute_signature("a"));
  EXPECT_DOUBLE_EQ(plain[0].rerank_score, 1.5);
  EXPECT_DOUBLE_EQ(plain[1].rerank_score, 1.3);
  EXPECT_DOUBLE_EQ(plain[2].rerank_score, 1.1);

  const auto gated = rerank(in, m, {{}, true}, 5.0, extra);
  EXPECT_EQ(gated[0].signature, compute_signature("a"));
  EXPECT_EQ(gated[1].signature, compute_signature("c"));
  EXPECT_EQ(gated[2].signature, compute_signature("b"));
  EXPECT_DOUBLE_EQ(gated[0].rerank_score, 4.7);
  EXPECT_DOUBLE_EQ(gated[1].rerank_score, 4.1);
  EXPECT_DOUBLE_EQ(gated[2].rerank_score, 3.5);
}

TEST(Rerank, SingleVisualFeatureFollowsSimilarity) {
  std::vector<ScoredResult> in{candidate("a", 0.2), candidate("b", 0.9), candidate("c", 0.5)};
  const auto out = rerank(in, {{{"vis_sim", 1.0}}, {"vis_sim"}}, {});
  EXPECT_EQ(out[0].signature, compute_signature("b"));
  EXPECT_EQ(out[1].signature, compute_signature("c"));
  EXPECT_EQ(out[2].signature, compute_signature("a"));
}

TEST(Rerank, TiesBySignature) {
  std::vector<ScoredResult> in{candidate("x", 0.5), candidate("y", 0.5), candidate("z", 0.5)};
  const auto out = rerank(in, {{{"vis_sim", 1.0}}, {}}, {});
  EXPECT_TRUE(std::is_sorted(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.signature < b.signature; }));
}

TEST(Rerank, CrossFeaturesEnterScore) {
  const RankingModel m{{{"cat_cross_3", 2.0}}, {}};
  const auto out = rerank({candidate("a", 0.25)}, m, {CategoryVector{{{3, 0.5}}}, false});
  EXPECT_DOUBLE_EQ(out[0].rerank_score, 0.25);
}

TEST(RankingModel, JsonRoundTripAndValidation) {
  const RankingModel m{{{"vis_sim", 1.0}, {"pop", 2.0}}, {"vis_sim"}};
  const auto back = RankingModel::from_json(m.to_json());
  EXPECT_EQ(back.weights, m.weights);
  EXPECT_EQ(back.visual_features, m.visual_features);
  EXPECT_THROW(RankingModel::from_json({{"weights", {{"pop", 1.0}}}, {"visual_features", {"vis_sim"}}}), InputError);
}

TEST(Annotations, IdfFixture) {
  CorpusStats stats{10, {{"a", 1}, {"b", 9}}};
  const std::vector<ScoredResult> results{candidate("r1", 1.0), candidate("r2", 1.0)};
  const AnnotationLookup lookup = [](const Signature& s) {
    if (s == compute_signature("r1")) return std::vector<Annotation>{{"a", 1.0}};
    return std::vector<Annotation>{{"b", 1.0}};
  };
  const auto out = aggregate_annotations(results, lookup, stats, 10);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].term, "a");
  EXPECT_NEAR(out[0].weight, std::log(11.0 / 2.0) + 1.0, 1e-12);
  EXPECT_NEAR(out[0].weight, 2.7047, 1e-4);
  EXPECT_EQ(out[1].term, "b");
  EXPECT_NEAR(out[1].weight, 1.0953, 1e-4);
}

TEST(Annotations, SymmetryAdditivityAndTopN) {
  CorpusStats stats{50, {{"a", 5}, {"b", 5}, {"c", 5}}};
  const std::vector<ScoredResult> results{candidate("r1", 1.0), candidate("r2", 1.0), candidate("r3", 1.0)};
  const AnnotationLookup lookup = [](const Signature& s) {
    if (s == compute_signature("r1")) return std::vector<Annotation>{{"b", 1.0}, {"a", 1.0}, {"c", 1.0}};
    return std::vector<Annotation>{{"a", 1.0}};
  };
  const auto out = aggregate_annotations(results, lookup, stats, 3);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].term, "a");
  EXPECT_DOUBLE_EQ(out[0].weight, 3.0 * out[1].weight);
  EXPECT_EQ(out[1].term, "b");
  EXPECT_EQ(out[2].term, "c");
  EXPECT_DOUBLE_EQ(out[1].weight, out[2].weight);
  const auto top1 = aggregate_annotations(results, lookup, stats, 1);
  EXPECT_DOUBLE_EQ(top1[0].weight, stats.idf("a"));
  EXPECT_THROW(aggregate_annotations(results, lookup, stats, 0), InputError);
}

TEST(Annotations, CorpusStatsFromDocuments) {
  std::vector<ImageDocument> docs(3);
  docs[0].annotations = {{"a", 1}, {"a", 1}, {"b", 1}};
  docs[1].annotations = {{"a", 1}};
  const auto s = CorpusStats::from_documents(docs);
  EXPECT_EQ(s.documents, 3u);
  EXPECT_EQ(s.df("a"), 2u);
  EXPECT_EQ(s.df("b"), 1u);
  EXPECT_EQ(s.df("z"), 0u);
}

double conformity_of(const std::vector<std::optional<std::string>>& labels) {
  std::vector<ScoredResult> results;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto r = candidate(std::to_string(i), 1.0);
    r.leaf_id = static_cast<int>(i);
    results.push_back(r);
  }
  return category_conformity(results, [&](const ScoredResult& r) { return labels[static_cast<std::size_t>(r.leaf_id)]; });
}

TEST(Conformity, Examples) {
  EXPECT_DOUBLE_EQ(conformity_of({"A", "A", "B"}), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(conformity_of({"A", "A", "A"}), 1.0);
  EXPECT_DOUBLE_EQ(conformity_of({"A", "A", "A", "B", "C"}), 0.6);
  EXPECT_DOUBLE_EQ(conformity_of({"A", std::nullopt, std::nullopt, std::nullopt}), 0.25);
  EXPECT_THROW(conformity_of({}), InputError);
}

TEST(Conformity, LowerBound) {
  std::mt19937_64 rng(24);
  for (int t = 0; t < 300; ++t) {
    std::vector<std::optional<std::string>> labels;
    std::set<std::string> distinct;
    for (std::size_t i = 0, n = 1 + rng() % 20; i < n; ++i) {
      labels.push_back(std::string(1, static_cast<char>('A' + rng() % 5)));
      distinct.insert(*labels.back());
    }
    EXPECT_GE(conformity_of(labels), 1.0 / static_cast<double>(distinct.size()));
  }
}

TEST(Suppression, Examples) {
  EXPECT_TRUE(suppress_dot({0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}));
  EXPECT_FALSE(suppress_dot({0.9, 1200, 0.85}, kPublishedThresholds));
  EXPECT_TRUE(suppress_dot({1.0, 1000, 0.8}, kPublishedThresholds));
  EXPECT_FALSE(suppress_dot({1.0, 999.9, 0.8}, kPublishedThresholds));
  EXPECT_FALSE(suppress_dot({1.0, 1000, 0.79}, kPublishedThresholds));
}

}  // namespace
}  // namespace vdisc
