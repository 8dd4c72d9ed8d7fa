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

#include <array>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "test_support.hpp"
#include "vdisc/codec.hpp"
#include "vdisc/io.hpp"
#include "vdisc/core.hpp"
#include "vdisc/serialization.hpp"

namespace vdisc {
namespace {

using nlohmann::json;

TEST(Signature, Md5ReferenceDigests) {
  EXPECT_EQ(compute_signature("").hex(), "d41d8cd98f00b204e9800998ecf8427e");
  EXPECT_EQ(compute_signature("abc").hex(), "900150983cd24fb0d6963f7d28e17f72");
  EXPECT_EQ(compute_signature("The quick brown fox jumps over the lazy dog").hex(),
            "9e107d9d372bb6826bd81d3542a419d6");
}

TEST(Signature, DeterministicAndDistinct) {
  EXPECT_EQ(compute_signature("abc"), compute_signature("abc"));
  EXPECT_NE(compute_signature(""), compute_signature("abc"));
}

TEST(Signature, HexRoundTripAndPrefix) {
  const Signature s = compute_signature("abc");
  EXPECT_EQ(Signature::from_hex(s.hex()), s);
  EXPECT_EQ(Signature::from_hex("900150983CD24FB0D6963F7D28E17F72"), s);
  EXPECT_EQ(s.prefix32(), 0x90015098u);
  EXPECT_THROW(Signature::from_hex("abc"), InputError);
  EXPECT_THROW(Signature::from_hex(std::string(32, 'g')), InputError);
}

TEST(Codec, Base64Rfc4648Vectors) {
  const std::array<std::pair<const char*, const char*>, 7> cases{{{"", ""},
                                                                  {"f", "Zg=="},
                                                                  {"fo", "Zm8="},
                                                                  {"foo", "Zm9v"},
                                                                  {"foob", "Zm9vYg=="},
                                                                  {"fooba", "Zm9vYmE="},
                                                                  {"foobar", "Zm9vYmFy"}}};
  for (const auto& [plain, encoded] : cases) {
    const std::string p(plain);
    const std::vector<std::uint8_t> bytes(p.begin(), p.end());
    EXPECT_EQ(codec::base64_encode(bytes), encoded);
    EXPECT_EQ(codec::base64_decode(encoded), bytes);
  }
  EXPECT_THROW(codec::base64_decode("Zm9"), InputError);
  EXPECT_THROW(codec::base64_decode("Zm9v!!=="), InputError);
}

TEST(Embedding, LittleEndianFloat32Bytes) {
  const Embedding e{{1.0f, -2.0f}};
  const std::vector<std::uint8_t> expected{0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
  EXPECT_EQ(e.to_bytes(), expected);
  EXPECT_EQ(Embedding::from_bytes(expected), e);
  EXPECT_EQ(embedding_to_json(Embedding{{1.0f}}).get<std::string>(), "AACAPw==");
  EXPECT_THROW(Embedding::from_bytes(std::vector<std::uint8_t>{1, 2, 3}), InputError);
}

TEST(BinaryFingerprint, MsbFirstPacking) {
  const auto fp = BinaryFingerprint::from_string("10110001" "1");
  EXPECT_EQ(fp.dim(), 9u);
  const std::vector<std::uint8_t> expected{0xB1, 0x80};
  EXPECT_EQ(fp.to_bytes(), expected);
  EXPECT_EQ(BinaryFingerprint::from_bytes(expected, 9), fp);
  EXPECT_EQ(fp.bits(0, 4), 0b1011u);
  EXPECT_EQ(fp.bits(4, 5), 0b00011u);
  EXPECT_THROW(BinaryFingerprint::from_bytes(std::vector<std::uint8_t>{0xB1, 0xC0}, 9), InputError);
  EXPECT_THROW(BinaryFingerprint::from_bytes(std::vector<std::uint8_t>{0xB1}, 9), InputError);
}

TEST(BinaryFingerprint, BitsAcrossWordBoundary) {
  std::string s(128, '0');
  s[62] = s[63] = s[64] = '1';
  const auto fp = BinaryFingerprint::from_string(s);
  EXPECT_EQ(fp.bits(60, 8), 0b00111000u);
  EXPECT_EQ(fp.bits(64, 64), std::uint64_t{1} << 63);
  EXPECT_EQ(fp.to_string(), s);
}

TEST(Category, ThresholdExamples) {
  std::vector<double> raw(32, 0.0);
  EXPECT_TRUE(threshold_category(raw, 0.1).empty());
  std::fill(raw.begin(), raw.end(), 0.01);
  raw[3] = 0.9;
  const auto c = threshold_category(raw, 0.1);
  ASSERT_EQ(c.entries.size(), 1u);
  EXPECT_EQ(c.entries.at(3), 0.9);
  raw[5] = 0.1;
  EXPECT_EQ(threshold_category(raw, 0.1).entries.count(5), 0u);
  EXPECT_THROW(threshold_category(std::vector<double>(31, 0.0), 0.1), DimensionError);
}

TEST(Category, TopPicksHeaviestThenLowestIndex) {
  CategoryVector c{{{4, 0.5}, {2, 0.5}, {9, 0.1}}};
  EXPECT_EQ(c.top(), 2);
  EXPECT_EQ(CategoryVector{}.top(), std::nullopt);
}

TEST(Timestamp, RoundTrip) {
  const auto t = parse_timestamp("2015-09-14T13:00:00Z");
  EXPECT_EQ(t.time_since_epoch().count(), 1442235600);
  EXPECT_EQ(format_timestamp(t), "2015-09-14T13:00:00Z");
  EXPECT_THROW(parse_timestamp("2015-02-30T00:00:00Z"), InputError);
  EXPECT_THROW(parse_timestamp("2015-09-14 13:00:00"), InputError);
}

TEST(Serialization, DocumentRoundTrip) {
  ImageDocument d;
  d.signature = compute_signature("img");
  d.upload_time = parse_timestamp("2015-09-14T13:00:00Z");
  d.width = 640;
  d.height = 480;
  d.embedding = Embedding{{0.5f, -0.2f, 0.0f, 3.0f}};
  d.fingerprint = BinaryFingerprint::from_string("1001");
  d.annotations = {{"chair", 1.0}, {"wood", 0.5}};
  d.category.entries = {{3, 0.9}};
  d.class_label = "furniture";
  d.detections = {{{10, 10, 100, 100}, "chair", 0.95}};

  const json j = d;
  EXPECT_EQ(j["signature"], d.signature.hex());
  EXPECT_EQ(j["detections"][0]["box"], json({10.0, 10.0, 100.0, 100.0}));
  EXPECT_EQ(j["fingerprint"]["bits"], "kA==");
  EXPECT_EQ(j.get<ImageDocument>(), d);

  json bad = j;
  bad["fingerprint"]["bits"] = "AA==";
  EXPECT_THROW(bad.get<ImageDocument>(), InputError);
  bad = j;
  bad["detections"][0]["box"] = {600, 10, 100, 100};
  EXPECT_THROW(bad.get<ImageDocument>(), InputError);
  bad = j;
  bad["category"] = {{"3", 1.5}};
  EXPECT_THROW(bad.get<ImageDocument>(), InputError);
}

TEST(Serialization, FingerprintDerivedWhenAbsent) {
  json j = {{"signature", compute_signature("x").hex()}, {"embedding", embedding_to_json(Embedding{{1.f, -1.f}})}};
  const auto d = j.get<ImageDocument>();
  EXPECT_EQ(d.fingerprint.to_string(), "10");
}

TEST(Box, ValidityAndOrder) {
  EXPECT_TRUE((Box{0, 0, 1, 1}.valid()));
  EXPECT_FALSE((Box{0, 0, 0, 1}.valid()));
  EXPECT_TRUE((Box{0, 0, 10, 10}.within(10, 10)));
  EXPECT_FALSE((Box{1, 0, 10, 10}.within(10, 10)));
  EXPECT_LT((Box{0, 0, 5, 5}), (Box{0, 1, 1, 1}));
}

TEST(Source, NamesRoundTrip) {
  for (Source s : {Source::kVisual, Source::kTextual, Source::kObjectSearch}) {
    EXPECT_EQ(source_from_string(to_string(s)), s);
  }
  EXPECT_EQ(to_string(Source::kObjectSearch), "objectSearch");
  EXPECT_THROW(source_from_string("images"), InputError);
}

TEST(Errors, ExitCodes) {
  EXPECT_EQ(InputError("x").exit_code(), 1);
  EXPECT_EQ(DimensionError("x").exit_code(), 1);
  EXPECT_EQ(IntegrityError("x").exit_code(), 2);
}

TEST(Io, AtomicWriteCreatesParentsAndAcceptsBareNames) {
  const testing::TempDir dir;
  io::atomic_write(dir.path() / "a" / "b" / "f.txt", "one");
  EXPECT_EQ(io::read_file(dir.path() / "a" / "b" / "f.txt"), "one");

  const auto cwd = std::filesystem::current_path();
  std::filesystem::current_path(dir.path());
  io::atomic_write("bare.txt", "two");
  io::atomic_write("bare.txt", "three");
  std::filesystem::current_path(cwd);
  EXPECT_EQ(io::read_file(dir.path() / "bare.txt"), "three");
}

}  // namespace
}  // namespace vdisc
