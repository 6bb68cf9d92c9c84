/*
 * Copyright 2026 The gasmil Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>

#include "gasmil/bagio.hpp"
#include "support.hpp"

namespace gasmil {
namespace {

using testing::random_matrix;

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("gasmil_test_bagio_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.same_shape(b) && std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

TEST(BagCodec, SingleZeroValueRoundTrips) {
  const FeatureBag bag{"x", Matrix{{0.0}}, 0};
  const FeatureBag back = decode_bag(encode_bag(bag));
  EXPECT_EQ(back.bag_id, "x");
  EXPECT_EQ(back.label, 0);
  EXPECT_TRUE(bit_equal(back.features, bag.features));
}

TEST(BagCodec, LargeRandomBagRoundTripsBitExactly) {
  RngStream rng(42);
  FeatureBag bag{"slide-017", random_matrix(200, 1792, rng, 3.0), 4};
  bag.features(0, 0) = -0.0;
  bag.features(1, 1) = 5e-324;
  bag.features(2, 2) = 1.7976931348623157e308;
  const auto bytes = encode_bag(bag);
  const FeatureBag back = decode_bag(bytes);
  EXPECT_TRUE(bit_equal(back.features, bag.features));
  EXPECT_EQ(encode_bag(back), bytes);
}

TEST(BagCodec, HeaderLayoutIsLittleEndian) {
  const FeatureBag bag{"ab", Matrix{{1.0, 2.0}}, -3};
  const auto b = encode_bag(bag);
  ASSERT_EQ(b.size(), 4u + 4 + 4 + 4 + 4 + 2 + 2 + 16);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "GMBG");
  EXPECT_EQ(b[4], 1);  // version
  EXPECT_EQ(b[8], 1);  // n
  EXPECT_EQ(b[12], 2);  // m
  EXPECT_EQ(b[16], 0xFD);  // -3 in two's complement
  EXPECT_EQ(b[19], 0xFF);
  EXPECT_EQ(b[20], 2);  // id length
  EXPECT_EQ(b[22], 'a');
  // 1.0 = 0x3FF0000000000000, least significant byte first.
  EXPECT_EQ(b[24 + 7], 0x3F);
  EXPECT_EQ(b[24 + 6], 0xF0);
  EXPECT_EQ(decode_bag(b).label, -3);
}

TEST(BagCodec, CorruptedMagicIsFormatErrorAtOffsetZero) {
  auto bytes = encode_bag({"x", Matrix{{1.0}}, 0});
  bytes[1] = 'X';
  try {
    decode_bag(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(BagCodec, TruncationAnywhereIsFormatError) {
  RngStream rng(1);
  const auto bytes = encode_bag({"bag", random_matrix(3, 4, rng), 1});
  for (std::size_t cut = 0; cut < bytes.size(); ++cut) {
    const std::vector<std::uint8_t> prefix(bytes.begin(), bytes.begin() + cut);
    EXPECT_THROW(decode_bag(prefix), FormatError) << "cut at " << cut;
  }
}

TEST(BagCodec, TruncatedPayloadReportsPayloadOffset) {
  const auto bytes = encode_bag({"id", Matrix(2, 2, 1.0), 0});
  const std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 3);
  try {
    decode_bag(cut);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 24u);
  }
}

TEST(BagCodec, DimensionOverflowIsFormatError) {
  auto bytes = encode_bag({"id", Matrix(1, 1, 1.0), 0});
  // n = m = 0xFFFFFFFF claims ~1.5e20 bytes of payload.
  for (int i = 8; i < 16; ++i) bytes[i] = 0xFF;
  EXPECT_THROW(decode_bag(bytes), FormatError);
}

TEST(BagCodec, RejectsTrailingBytesVersionAndNonFinite) {
  auto bytes = encode_bag({"id", Matrix(1, 1, 1.0), 0});
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(decode_bag(longer), FormatError);
  auto versioned = bytes;
  versioned[4] = 2;
  EXPECT_THROW(decode_bag(versioned), FormatError);
  auto nan_payload = bytes;
  const double nan = std::nan("");
  std::memcpy(nan_payload.data() + nan_payload.size() - 8, &nan, 8);
  EXPECT_THROW(decode_bag(nan_payload), FormatError);
  EXPECT_THROW(encode_bag({"id", Matrix{{std::nan("")}}, 0}), NumericError);
}

TEST(BagCodec, FileRoundTrip) {
  const auto dir = scratch_dir("file");
  RngStream rng(2);
  const FeatureBag bag{"f", random_matrix(7, 5, rng), 2};
  write_bag_file(dir / "sub" / "f.gmbg", bag);
  const FeatureBag back = read_bag_file(dir / "sub" / "f.gmbg");
  EXPECT_TRUE(bit_equal(back.features, bag.features));
  EXPECT_THROW(read_bag_file(dir / "missing.gmbg"), Error);
}

FeatureBag numbered_bag(std::size_t n, std::size_t m) {
  FeatureBag bag{"b", Matrix(n, m), 1};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) bag.features(i, j) = static_cast<double>(i + 1) + 0.001 * static_cast<double>(j);
  return bag;
}

TEST(SampleOrPad, IdentityWhenSizesMatch) {
  RngStream rng(1);
  const FeatureBag bag = numbered_bag(200, 3);
  EXPECT_EQ(sample_or_pad(bag, 200, rng).features, bag.features);
}

TEST(SampleOrPad, PadsWithZeroRowsAfterOriginals) {
  RngStream rng(1);
  const FeatureBag bag = numbered_bag(150, 4);
  const FeatureBag out = sample_or_pad(bag, 200, rng);
  ASSERT_EQ(out.features.rows(), 200u);
  ASSERT_EQ(out.features.cols(), 4u);
  for (std::size_t i = 0; i < 150; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out.features(i, j), bag.features(i, j));
  for (std::size_t i = 150; i < 200; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(out.features(i, j), 0.0);
}

TEST(SampleOrPad, SubsamplesDistinctRowsUniformly) {
  const FeatureBag bag = numbered_bag(300, 1);
  std::vector<int> hits(300, 0);
  const int trials = 10000;
  for (int seed = 0; seed < trials; ++seed) {
    RngStream rng(static_cast<std::uint64_t>(seed));
    const FeatureBag out = sample_or_pad(bag, 200, rng);
    ASSERT_EQ(out.features.rows(), 200u);
    std::set<double> distinct;
    double previous = 0.0;
    for (std::size_t i = 0; i < 200; ++i) {
      const double v = out.features(i, 0);
      EXPECT_GT(v, previous);  // original order kept
      previous = v;
      distinct.insert(v);
      ++hits[static_cast<std::size_t>(v) - 1];
    }
    ASSERT_EQ(distinct.size(), 200u);
  }
  for (int h : hits) EXPECT_NEAR(static_cast<double>(h) / trials, 200.0 / 300.0, 0.02);
}

TEST(SampleOrPad, AlwaysExactRowCount) {
  RngStream rng(8);
  for (std::size_t n : {1u, 5u, 50u, 199u, 200u, 201u, 500u})
    for (std::size_t target : {1u, 20u, 200u}) {
      const FeatureBag out = sample_or_pad(numbered_bag(n, 3), target, rng);
      EXPECT_EQ(out.features.rows(), target);
      EXPECT_EQ(out.features.cols(), 3u);
    }
  EXPECT_THROW(sample_or_pad(numbered_bag(3, 3), 0, rng), ParameterError);
}

Manifest labeled_manifest(const std::vector<std::size_t>& per_class) {
  Manifest m;
  m.layout = {{"g"}, {1}};
  m.num_classes = per_class.size();
  std::size_t next = 0;
  for (std::size_t c = 0; c < per_class.size(); ++c)
    for (std::size_t i = 0; i < per_class[c]; ++i) {
      const std::string id = "s" + std::to_string(next++);
      m.entries.push_back({id, id + ".gmbg", static_cast<int>(c), SplitTag::kUnassigned});
    }
  return m;
}

std::map<int, std::array<std::size_t, 4>> split_counts(const Manifest& m) {
  std::map<int, std::array<std::size_t, 4>> counts;
  for (const auto& e : m.entries) ++counts[e.label][static_cast<int>(e.split)];
  return counts;
}

TEST(StratifiedSplit, SingleClassOfTen) {
  const Manifest out = stratified_split(labeled_manifest({10}), {0.8, 0.1, 0.1, 0});
  const auto c = split_counts(out).at(0);
  EXPECT_EQ(c[1], 8u);
  EXPECT_EQ(c[2], 1u);
  EXPECT_EQ(c[3], 1u);
  EXPECT_EQ(c[0], 0u);
}

TEST(StratifiedSplit, PandaSizedManifest) {
  // Six ISUP grades with a PANDA-like imbalance, 9128 slides in total.
  const std::vector<std::size_t> per_class{2486, 2298, 1159, 1073, 1076, 1036};
  const double total = 9128.0;
  const SplitSpec spec{5392 / total, 1933 / total, 1803 / total, 3};
  const Manifest out = stratified_split(labeled_manifest(per_class), spec);
  std::array<long, 4> sizes{};
  for (const auto& e : out.entries) ++sizes[static_cast<int>(e.split)];
  const long k = static_cast<long>(per_class.size());
  EXPECT_LE(std::abs(sizes[1] - 5392), k);
  EXPECT_LE(std::abs(sizes[2] - 1933), k);
  EXPECT_LE(std::abs(sizes[3] - 1803), k);
  EXPECT_EQ(sizes[0], 0);
}

TEST(StratifiedSplit, PerClassCountsFollowFractions) {
  RngStream rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::size_t> per_class(1 + rng.below(5));
    for (auto& n : per_class) n = 1 + rng.below(60);
    double a = rng.uniform(), b = rng.uniform() * (1 - a);
    const SplitSpec spec{a, b, 1.0 - a - b, rng.next_u64()};
    const Manifest m = labeled_manifest(per_class);
    const Manifest out = stratified_split(m, spec);
    ASSERT_EQ(out.entries.size(), m.entries.size());
    for (const auto& [label, c] : split_counts(out)) {
      const double n = static_cast<double>(per_class[static_cast<std::size_t>(label)]);
      EXPECT_EQ(c[0], 0u);
      EXPECT_EQ(c[1] + c[2] + c[3], per_class[static_cast<std::size_t>(label)]);
      EXPECT_LE(std::abs(static_cast<double>(c[1]) - spec.train * n), 1.0 + 1e-9);
      EXPECT_LE(std::abs(static_cast<double>(c[2]) - spec.val * n), 1.0 + 1e-9);
      EXPECT_LE(std::abs(static_cast<double>(c[3]) - spec.test * n), 1.0 + 1e-9);
      EXPECT_LE(std::abs(static_cast<double>(c[1]) / n - spec.train), 1.0 / n + 1e-9);
    }
    EXPECT_EQ(stratified_split(m, spec), out);  // deterministic
    for (std::size_t i = 0; i < m.entries.size(); ++i) EXPECT_EQ(out.entries[i].id, m.entries[i].id);
  }
}

TEST(StratifiedSplit, SeedChangesAssignmentNotCounts) {
  const Manifest m = labeled_manifest({40, 40});
  const Manifest a = stratified_split(m, {0.5, 0.25, 0.25, 1});
  const Manifest b = stratified_split(m, {0.5, 0.25, 0.25, 2});
  EXPECT_NE(a, b);
  EXPECT_EQ(split_counts(a), split_counts(b));
}

TEST(StratifiedSplit, Errors) {
  EXPECT_THROW(stratified_split(labeled_manifest({}), {}), ParameterError);
  EXPECT_THROW(stratified_split(labeled_manifest({4}), {0.5, 0.5, 0.5, 0}), ParameterError);
  EXPECT_THROW(stratified_split(labeled_manifest({4}), {1.2, -0.1, -0.1, 0}), ParameterError);
}

TEST(Apportion, LargestRemainder) {
  const std::array<double, 3> f{0.7, 0.15, 0.15};
  EXPECT_EQ(apportion(10, f), (std::vector<std::size_t>{7, 2, 1}));
  EXPECT_EQ(apportion(1, f), (std::vector<std::size_t>{1, 0, 0}));
  EXPECT_EQ(apportion(0, f), (std::vector<std::size_t>{0, 0, 0}));
}

TEST(Manifest, JsonRoundTripAndValidation) {
  const auto dir = scratch_dir("manifest");
  Manifest m = stratified_split(labeled_manifest({3, 2}), {});
  m.layout = {{"uni", "conch"}, {4, 2}};
  save_manifest(dir / "m.json", m);
  EXPECT_EQ(load_manifest(dir / "m.json"), m);

  const auto j = nlohmann::json::parse(std::ifstream(dir / "m.json"));
  EXPECT_EQ(j.at("layout").at("names")[1], "conch");
  EXPECT_EQ(j.at("entries")[0].at("split").get<std::string>().empty(), false);

  Manifest dup = m;
  dup.entries[1].id = dup.entries[0].id;
  EXPECT_THROW(dup.validate(), ConfigError);
  Manifest bad_label = m;
  bad_label.entries[0].label = 2;
  EXPECT_THROW(bad_label.validate(), ConfigError);
  EXPECT_THROW(load_manifest(dir / "absent.json"), ParameterError);
}

TEST(GroupLayout, OffsetsSubsetsAndValidation) {
  const GroupLayout l{{"a", "b", "c"}, {2, 3, 4}};
  EXPECT_EQ(l.total_width(), 9u);
  EXPECT_EQ(l.offset(2), 5u);
  const std::size_t pick[] = {2, 0};
  EXPECT_EQ(l.subset(pick), (GroupLayout{{"c", "a"}, {4, 2}}));
  Matrix f(1, 9);
  for (std::size_t j = 0; j < 9; ++j) f(0, j) = static_cast<double>(j);
  EXPECT_EQ(select_groups(f, l, pick), (Matrix{{5, 6, 7, 8, 0, 1}}));
  EXPECT_THROW((GroupLayout{{}, {}}.validate()), ConfigError);
  EXPECT_THROW((GroupLayout{{"a"}, {0}}.validate()), ConfigError);
  EXPECT_THROW((GroupLayout{{"a", "a"}, {1, 1}}.validate()), ConfigError);
}

TEST(LoadBags, ChecksWidthAndLabel) {
  const auto dir = scratch_dir("load");
  Manifest m = labeled_manifest({1, 1});
  m.layout = {{"g"}, {3}};
  write_bag_file(dir / m.entries[0].path, {m.entries[0].id, Matrix(2, 3), 0});
  write_bag_file(dir / m.entries[1].path, {m.entries[1].id, Matrix(2, 3), 1});
  EXPECT_EQ(load_bags(m, m.entries, dir).size(), 2u);
  m.layout = {{"g"}, {4}};
  EXPECT_THROW(load_bags(m, m.entries, dir), ConfigError);
  m.layout = {{"g"}, {3}};
  m.entries[1].label = 0;
  EXPECT_THROW(load_bags(m, m.entries, dir), ConfigError);
}

struct BlockStats {
  double mean = 0.0;
  double standard_error = 0.0;
};

// Mean over bags of each bag's average over a column range, with its standard error.
BlockStats block_mean(const SynthDataset& ds, int label, std::size_t begin, std::size_t end) {
  std::vector<double> per_bag;
  for (const auto& bag : ds.bags) {
    if (bag.label != label) continue;
    double s = 0.0;
    for (std::size_t i = 0; i < bag.features.rows(); ++i)
      for (std::size_t j = begin; j < end; ++j) s += bag.features(i, j);
    per_bag.push_back(s / static_cast<double>(bag.features.rows() * (end - begin)));
  }
  double mean = 0.0, var = 0.0;
  for (double v : per_bag) mean += v;
  mean /= static_cast<double>(per_bag.size());
  for (double v : per_bag) var += (v - mean) * (v - mean);
  var /= static_cast<double>(per_bag.size() - 1);
  return {mean, std::sqrt(var / static_cast<double>(per_bag.size()))};
}

TEST(Synth, ElevatedBlockMeanMatchesShiftTimesSignalFraction) {
  const GroupLayout layout{{"g1", "g2"}, {16, 24}};
  RngStream rng(2024);
  const SynthDataset ds = synth_generate(layout, 900, 50, 3, {{0, 1}, {2}}, rng);
  // Signal fraction is uniform on [0.1, 0.3]: expected block mean 2.0 * 0.2.
  const BlockStats informative = block_mean(ds, 2, 16, 40);
  EXPECT_NEAR(informative.mean, 0.4, 3 * informative.standard_error);
  for (int y : {0, 1}) {
    const BlockStats quiet = block_mean(ds, y, 16, 40);
    EXPECT_NEAR(quiet.mean, 0.0, 3 * quiet.standard_error);
  }
  // Group 1 is shared by classes 0 and 1: each shifts its own half.
  const BlockStats own = block_mean(ds, 0, 0, 8), other = block_mean(ds, 0, 8, 16);
  EXPECT_NEAR(own.mean, 0.4, 3 * own.standard_error);
  EXPECT_NEAR(other.mean, 0.0, 3 * other.standard_error);
}

TEST(Synth, LabelsBalancedAndManifestConsistent) {
  RngStream rng(5);
  const SynthDataset ds = synth_generate({{"a", "b"}, {3, 4}}, 31, 10, 3, round_robin_plan(2, 3), rng);
  ASSERT_EQ(ds.bags.size(), 31u);
  std::array<int, 3> counts{};
  for (std::size_t i = 0; i < ds.bags.size(); ++i) {
    ++counts[static_cast<std::size_t>(ds.bags[i].label)];
    EXPECT_EQ(ds.manifest.entries[i].label, ds.bags[i].label);
    EXPECT_EQ(ds.manifest.entries[i].id, ds.bags[i].bag_id);
    EXPECT_EQ(ds.bags[i].features.rows(), 10u);
    EXPECT_EQ(ds.bags[i].features.cols(), 7u);
  }
  EXPECT_EQ(counts, (std::array<int, 3>{11, 10, 10}));
  ds.manifest.validate();
}

TEST(Synth, SingleClassIsDegenerateButValid) {
  RngStream rng(5);
  const SynthDataset ds = synth_generate({{"a"}, {2}}, 5, 4, 1, {{}}, rng);
  for (const auto& b : ds.bags) {
    EXPECT_EQ(b.label, 0);
    EXPECT_TRUE(b.features.all_finite());
  }
}

TEST(Synth, UncoveredClassIsParameterError) {
  RngStream rng(5);
  EXPECT_THROW(synth_generate({{"a", "b"}, {2, 2}}, 5, 4, 3, {{0}, {1}}, rng), ParameterError);
  EXPECT_THROW(synth_generate({{"a"}, {2}}, 5, 4, 2, {{0, 1}, {1}}, rng), ParameterError);
}

TEST(Synth, SameSeedGivesIdenticalFiles) {
  const GroupLayout layout{{"a", "b"}, {4, 5}};
  RngStream r1(9), r2(9);
  const auto d1 = scratch_dir("synth1"), d2 = scratch_dir("synth2");
  write_dataset(d1, synth_generate(layout, 12, 8, 2, round_robin_plan(2, 2), r1));
  write_dataset(d2, synth_generate(layout, 12, 8, 2, round_robin_plan(2, 2), r2));
  for (const auto& entry : std::filesystem::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), d1);
    EXPECT_EQ(detail::read_file_bytes(entry.path()), detail::read_file_bytes(d2 / rel)) << rel;
  }
}

TEST(Synth, OrdinalModeScalesShiftWithGrade) {
  const GroupLayout layout{{"a"}, {10}};
  RngStream rng(31);
  SynthOptions opt;
  opt.ordinal = true;
  const SynthDataset ds = synth_generate(layout, 1200, 40, 6, {{0, 1, 2, 3, 4, 5}}, rng, opt);
  for (int g = 0; g < 6; ++g) {
    const BlockStats s = block_mean(ds, g, 0, 10);
    EXPECT_NEAR(s.mean, 0.2 * 2.0 * g / 5.0, 3 * s.standard_error + 1e-12) << "grade " << g;
  }
}

}  // namespace
}  // namespace gasmil
