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

#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "vdisc/index.hpp"

namespace vdisc {
namespace {

using testing::as_hits;
using testing::oracle_distance;
using testing::oracle_knn;
using testing::random_fp;
using testing::sig_of;

using Corpus = std::vector<std::pair<Signature, BinaryFingerprint>>;

LeafIndex build(const Corpus& corpus, std::size_t m, bool exhaustive = true) {
  std::vector<LeafDoc> docs;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    docs.push_back({corpus[i].first, corpus[i].second, static_cast<std::uint32_t>(i)});
  }
  return LeafIndex::build(std::move(docs), m, exhaustive);
}

TEST(Tokenize, Examples) {
  const auto t = tokenize(BinaryFingerprint::from_string("10110001"), 2);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t[0], (Token{0, 11}));
  EXPECT_EQ(t[1], (Token{1, 1}));
  const auto whole = tokenize(BinaryFingerprint::from_string("10110001"), 1);
  ASSERT_EQ(whole.size(), 1u);
  EXPECT_EQ(whole[0].value, 0b10110001u);
  EXPECT_THROW(tokenize(BinaryFingerprint::from_string("101"), 2), DimensionError);
}

TEST(Tokenize, EqualFingerprintsEqualTokens) {
  std::mt19937_64 rng(1);
  const auto fp = random_fp(rng, 128);
  EXPECT_EQ(tokenize(fp, 4), tokenize(BinaryFingerprint::from_string(fp.to_string()), 4));
}

TEST(DefaultBlocks, Rule) {
  EXPECT_EQ(default_block_count(64), 1u);
  EXPECT_EQ(default_block_count(256), 4u);
  EXPECT_EQ(default_block_count(32), 8u);
  EXPECT_EQ(default_block_count(4), 1u);
}

TEST(Build, PostingsComplete) {
  std::mt19937_64 rng(2);
  Corpus c;
  for (std::size_t i = 0; i < 3; ++i) c.push_back({sig_of(i), random_fp(rng, 8)});
  EXPECT_EQ(build(c, 2).total_postings(), 6u);

  c.clear();
  for (std::size_t i = 0; i < 500; ++i) c.push_back({sig_of(i), random_fp(rng, 64)});
  EXPECT_EQ(build(c, 16).total_postings(), 16u * 500u);
}

TEST(Build, MixedDimsRejected) {
  Corpus c{{sig_of(0), BinaryFingerprint::from_string("1010")}, {sig_of(1), BinaryFingerprint::from_string("10")}};
  EXPECT_THROW(build(c, 1), DimensionError);
}

TEST(Knn, DuplicatesBothRetrievable) {
  const auto fp = BinaryFingerprint::from_string("10110001");
  const auto idx = build({{sig_of(0), fp}, {sig_of(1), fp}, {sig_of(2), BinaryFingerprint::from_string("01001110")}}, 2);
  const auto r = idx.knn(fp, 2);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].hamming_distance, 0);
  EXPECT_EQ(r[1].hamming_distance, 0);
  EXPECT_LT(r[0].signature, r[1].signature);
}

TEST(Knn, EmptyIndexReturnsNothing) {
  const auto idx = build({}, 4);
  EXPECT_TRUE(idx.knn(BinaryFingerprint::from_string("10110001"), 5).empty());
}

TEST(Knn, SelfAtRankOne) {
  std::mt19937_64 rng(4);
  Corpus c;
  for (std::size_t i = 0; i < 200; ++i) c.push_back({sig_of(i), random_fp(rng, 64)});
  const auto idx = build(c, 16);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto r = idx.knn(c[i].second, 3);
    ASSERT_FALSE(r.empty());
    EXPECT_EQ(r[0].signature, c[i].first);
    EXPECT_EQ(r[0].hamming_distance, 0);
    EXPECT_EQ(r[0].similarity, 1.0);
  }
}

TEST(Knn, KLargerThanCorpusReturnsAllRanked) {
  std::mt19937_64 rng(6);
  Corpus c;
  for (std::size_t i = 0; i < 7; ++i) c.push_back({sig_of(i), random_fp(rng, 32)});
  const auto q = random_fp(rng, 32);
  EXPECT_EQ(as_hits(build(c, 8).knn(q, 50)), oracle_knn(c, q, 50));
}

TEST(Knn, ExhaustiveMatchesOracleWithTies) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Corpus c;
    const auto base = random_fp(rng, 64);
    for (std::size_t i = 0; i < 300; ++i) {
      c.push_back({sig_of(trial * 1000 + i), i % 3 == 0 ? random_fp(rng, 64) : testing::perturb(rng, base, rng() % 20)});
    }
    const auto idx = build(c, 16);
    for (int qn = 0; qn < 10; ++qn) {
      const auto q = qn % 2 ? testing::perturb(rng, base, rng() % 10) : random_fp(rng, 64);
      for (std::size_t k : {1u, 5u, 10u, 40u}) ASSERT_EQ(as_hits(idx.knn(q, k)), oracle_knn(c, q, k));
    }
  }
}

TEST(Knn, CandidateModeWhenAllWithinRadius) {
  std::mt19937_64 rng(8);
  const auto base = random_fp(rng, 64);
  Corpus c;
  for (std::size_t i = 0; i < 100; ++i) c.push_back({sig_of(i), testing::perturb(rng, base, rng() % 8)});
  const auto idx = build(c, 16, false);
  const auto q = testing::perturb(rng, base, 3);
  EXPECT_EQ(idx.candidates(q).size(), c.size());
  EXPECT_EQ(as_hits(idx.knn(q, 10)), oracle_knn(c, q, 10));
}

TEST(Knn, RecallWithinRadius) {
  std::mt19937_64 rng(10);
  Corpus c;
  const auto q = random_fp(rng, 64);
  for (std::size_t i = 0; i < 300; ++i) c.push_back({sig_of(i), testing::perturb(rng, q, rng() % 16)});
  for (std::size_t i = 300; i < 600; ++i) c.push_back({sig_of(i), random_fp(rng, 64)});
  const auto idx = build(c, 16, false);
  const auto cand = idx.candidates(q);
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (oracle_distance(q, c[i].second) <= 15) {
      EXPECT_TRUE(std::binary_search(cand.begin(), cand.end(), static_cast<std::uint32_t>(i))) << i;
    }
  }
}

TEST(Knn, QueryDimMismatch) {
  std::mt19937_64 rng(12);
  const auto idx = build({{sig_of(0), random_fp(rng, 64)}}, 16);
  EXPECT_THROW(idx.knn(random_fp(rng, 32), 1), DimensionError);
}

TEST(Persistence, RoundTripPreservesAnswers) {
  testing::TempDir dir;
  std::mt19937_64 rng(13);
  Corpus c;
  for (std::size_t i = 0; i < 400; ++i) c.push_back({sig_of(i), random_fp(rng, 128)});
  std::vector<LeafDoc> docs;
  for (std::size_t i = 0; i < c.size(); ++i) docs.push_back({c[i].first, c[i].second, static_cast<std::uint32_t>(i)});
  const auto idx = LeafIndex::build(std::move(docs), 8, true, 2);
  idx.save(dir.path() / "leaf");
  const auto back = LeafIndex::load(dir.path() / "leaf");
  EXPECT_EQ(back.dim(), 128u);
  EXPECT_EQ(back.block_count(), 8u);
  EXPECT_EQ(back.leaf_id(), 2);
  EXPECT_EQ(back.total_postings(), idx.total_postings());
  for (int t = 0; t < 20; ++t) {
    const auto q = random_fp(rng, 128);
    EXPECT_EQ(back.knn(q, 10), idx.knn(q, 10));
  }
}

TEST(Persistence, CorruptionIsIntegrityError) {
  testing::TempDir dir;
  std::mt19937_64 rng(14);
  Corpus c;
  for (std::size_t i = 0; i < 50; ++i) c.push_back({sig_of(i), random_fp(rng, 64)});
  build(c, 4).save(dir.path() / "leaf");
  const auto postings = dir.path() / "leaf.postings";
  const auto docs = dir.path() / "leaf.docs.jsonl";
  const std::string good_postings = detail::read_file(postings);
  const std::string good_docs = detail::read_file(docs);
  auto put = [](const std::filesystem::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; };

  put(postings, "XXXXXXXX" + good_postings.substr(8));
  EXPECT_THROW(LeafIndex::load(dir.path() / "leaf"), IntegrityError);
  put(postings, good_postings.substr(0, good_postings.size() - 3));
  EXPECT_THROW(LeafIndex::load(dir.path() / "leaf"), IntegrityError);
  put(postings, good_postings);
  put(docs, good_docs.substr(0, good_docs.size() / 2));
  EXPECT_THROW(LeafIndex::load(dir.path() / "leaf"), IntegrityError);
  put(docs, good_docs);
  EXPECT_NO_THROW(LeafIndex::load(dir.path() / "leaf"));
}

}  // namespace
}  // namespace vdisc
