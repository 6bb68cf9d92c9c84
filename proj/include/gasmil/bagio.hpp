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

// Feature bags: the binary bag codec, manifests, instance sampling, stratified
// splits and the synthetic multi-group generator.
//
// Bag file layout (little-endian):
//   "GMBG" | u32 version=1 | u32 n | u32 m | i32 label |
//   u16 id_len | id bytes (UTF-8) | n*m f64 row-major

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "gasmil/errors.hpp"
#include "gasmil/numerics.hpp"
#include "json.hpp"

namespace gasmil {

static_assert(std::endian::native == std::endian::little, "bag codec assumes a little-endian host");

struct GroupLayout {
  std::vector<std::string> names;
  std::vector<std::size_t> dims;

  std::size_t num_groups() const noexcept { return dims.size(); }
  std::size_t total_width() const noexcept { return std::accumulate(dims.begin(), dims.end(), std::size_t{0}); }
  std::size_t offset(std::size_t group) const {
    return std::accumulate(dims.begin(), dims.begin() + static_cast<std::ptrdiff_t>(group), std::size_t{0});
  }

  void validate() const {
    if (dims.empty()) throw ConfigError("group layout needs at least one group");
    if (names.size() != dims.size()) throw ConfigError("group layout: names and dims differ in length");
    for (std::size_t k = 0; k < dims.size(); ++k)
      if (dims[k] == 0) throw ConfigError("group layout: group '" + names[k] + "' has zero width");
    std::set<std::string> unique(names.begin(), names.end());
    if (unique.size() != names.size()) throw ConfigError("group layout: duplicate group names");
  }

  /// Layout made of the listed groups, in the order given.
  GroupLayout subset(std::span<const std::size_t> groups) const {
    GroupLayout out;
    for (std::size_t g : groups) {
      out.names.push_back(names.at(g));
      out.dims.push_back(dims.at(g));
    }
    return out;
  }

  friend bool operator==(const GroupLayout&, const GroupLayout&) = default;
};

inline void to_json(nlohmann::json& j, const GroupLayout& l) { j = {{"names", l.names}, {"dims", l.dims}}; }
inline void from_json(const nlohmann::json& j, GroupLayout& l) {
  j.at("names").get_to(l.names);
  j.at("dims").get_to(l.dims);
}

/// One slide: n instances by m features, all groups concatenated column-wise.
struct FeatureBag {
  std::string bag_id;
  Matrix features;
  int label = 0;
};

/// Selects the listed groups' columns from a bag laid out as `layout`.
inline Matrix select_groups(const Matrix& features, const GroupLayout& layout, std::span<const std::size_t> groups) {
  std::size_t width = 0;
  for (std::size_t g : groups) width += layout.dims.at(g);
  Matrix out(features.rows(), width);
  for (std::size_t i = 0; i < features.rows(); ++i) {
    std::size_t col = 0;
    for (std::size_t g : groups) {
      const std::size_t off = layout.offset(g);
      for (std::size_t j = 0; j < layout.dims[g]; ++j) out(i, col++) = features(i, off + j);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bag codec

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

inline void put_bytes(std::vector<std::uint8_t>& out, const std::string& s) { out.insert(out.end(), s.begin(), s.end()); }

/// Bounds-checked little-endian reader over a byte buffer.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  void need(std::size_t count, const char* what) const {
    if (remaining() < count) throw FormatError(std::string("truncated file while reading ") + what, pos_);
  }

  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  std::string bytes(std::size_t count, const char* what) {
    need(count, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), count);
    pos_ += count;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParameterError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParameterError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ParameterError("short write to " + path.string());
}

}  // namespace detail

inline constexpr std::array<char, 4> kBagMagic{'G', 'M', 'B', 'G'};
inline constexpr std::uint32_t kBagVersion = 1;

inline std::vector<std::uint8_t> encode_bag(const FeatureBag& bag) {
  const Matrix& f = bag.features;
  if (f.rows() > UINT32_MAX || f.cols() > UINT32_MAX) throw ParameterError("bag too large for the u32 header");
  if (bag.bag_id.size() > UINT16_MAX) throw ParameterError("bag id longer than 65535 bytes");
  if (!f.all_finite()) throw NumericError("bag '" + bag.bag_id + "' contains non-finite values");
  std::vector<std::uint8_t> out;
  out.reserve(22 + bag.bag_id.size() + 8 * f.size());
  out.insert(out.end(), kBagMagic.begin(), kBagMagic.end());
  detail::put_u32(out, kBagVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(f.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(f.cols()));
  detail::put_u32(out, static_cast<std::uint32_t>(bag.label));
  detail::put_u16(out, static_cast<std::uint16_t>(bag.bag_id.size()));
  detail::put_bytes(out, bag.bag_id);
  for (double v : f.data()) detail::put_f64(out, v);
  return out;
}

struct BagHeader {
  std::uint32_t version = 0;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::int32_t label = 0;
  std::string bag_id;
  std::size_t payload_offset = 0;
};

inline BagHeader decode_bag_header(detail::ByteReader& r) {
  const std::string magic = r.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kBagMagic.begin())) throw FormatError("bad bag magic", 0);
  BagHeader h;
  const std::size_t version_at = r.offset();
  h.version = r.u32("version");
  if (h.version != kBagVersion)
    throw FormatError("unsupported bag version " + std::to_string(h.version), version_at);
  h.rows = r.u32("row count");
  h.cols = r.u32("column count");
  h.label = static_cast<std::int32_t>(r.u32("label"));
  const std::uint16_t id_len = r.u16("id length");
  h.bag_id = r.bytes(id_len, "bag id");
  h.payload_offset = r.offset();
  const std::uint64_t cells = static_cast<std::uint64_t>(h.rows) * h.cols;
  if (cells > r.remaining() / 8) throw FormatError("dimensions exceed file size (truncated payload)", r.offset());
  if (cells * 8 != r.remaining()) throw FormatError("trailing bytes after payload", r.offset() + cells * 8);
  return h;
}

inline BagHeader read_bag_header(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  return decode_bag_header(r);
}

inline FeatureBag decode_bag(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const BagHeader h = decode_bag_header(r);
  FeatureBag bag{h.bag_id, Matrix(h.rows, h.cols), h.label};
  for (double& v : bag.features.data()) {
    const std::size_t at = r.offset();
    v = r.f64("feature value");
    if (!std::isfinite(v)) throw FormatError("non-finite feature value", at);
  }
  return bag;
}

inline void write_bag_file(const std::filesystem::path& path, const FeatureBag& bag) {
  detail::write_file_bytes(path, encode_bag(bag));
}

inline FeatureBag read_bag_file(const std::filesystem::path& path) {
  try {
    return decode_bag(detail::read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

// ---------------------------------------------------------------------------
// Manifest

enum class SplitTag { kUnassigned, kTrain, kVal, kTest };

inline std::string to_string(SplitTag t) {
  switch (t) {
    case SplitTag::kTrain: return "train";
    case SplitTag::kVal: return "val";
    case SplitTag::kTest: return "test";
    default: return "unassigned";
  }
}

inline SplitTag parse_split_tag(const std::string& s) {
  if (s == "train") return SplitTag::kTrain;
  if (s == "val") return SplitTag::kVal;
  if (s == "test") return SplitTag::kTest;
  if (s == "unassigned" || s.empty()) return SplitTag::kUnassigned;
  throw ParameterError("unknown split tag '" + s + "'");
}

struct ManifestEntry {
  std::string id;
  std::string path;
  int label = 0;
  SplitTag split = SplitTag::kUnassigned;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  GroupLayout layout;
  std::size_t num_classes = 0;
  std::vector<ManifestEntry> entries;

  void validate() const {
    layout.validate();
    if (num_classes == 0) throw ConfigError("manifest: num_classes must be positive");
    std::set<std::string> ids;
    for (const auto& e : entries) {
      if (!ids.insert(e.id).second) throw ConfigError("manifest: duplicate bag id '" + e.id + "'");
      if (e.label < 0 || static_cast<std::size_t>(e.label) >= num_classes)
        throw ConfigError("manifest: label " + std::to_string(e.label) + " of '" + e.id + "' outside [0, " +
                          std::to_string(num_classes) + ")");
    }
  }

  std::vector<ManifestEntry> split(SplitTag tag) const {
    std::vector<ManifestEntry> out;
    std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
                 [tag](const ManifestEntry& e) { return e.split == tag; });
    return out;
  }

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

inline void to_json(nlohmann::json& j, const Manifest& m) {
  j = nlohmann::json::object();
  j["layout"] = m.layout;
  j["num_classes"] = m.num_classes;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : m.entries)
    j["entries"].push_back({{"id", e.id}, {"path", e.path}, {"label", e.label}, {"split", to_string(e.split)}});
}

inline void from_json(const nlohmann::json& j, Manifest& m) {
  j.at("layout").get_to(m.layout);
  j.at("num_classes").get_to(m.num_classes);
  m.entries.clear();
  for (const auto& e : j.at("entries")) {
    ManifestEntry entry;
    e.at("id").get_to(entry.id);
    e.at("path").get_to(entry.path);
    e.at("label").get_to(entry.label);
    entry.split = parse_split_tag(e.value("split", std::string("unassigned")));
    m.entries.push_back(std::move(entry));
  }
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot open manifest " + path.string());
  Manifest m;
  try {
    m = nlohmann::json::parse(in).get<Manifest>();
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError("malformed manifest " + path.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParameterError("cannot write manifest " + path.string());
  out << nlohmann::json(m).dump(2) << '\n';
}

/// Reads every bag of `entries`, resolving relative paths against `base_dir`,
/// and checks each against the manifest's layout and label.
inline std::vector<FeatureBag> load_bags(const Manifest& manifest, std::span<const ManifestEntry> entries,
                                         const std::filesystem::path& base_dir) {
  std::vector<FeatureBag> bags;
  bags.reserve(entries.size());
  const std::size_t width = manifest.layout.total_width();
  for (const auto& e : entries) {
    std::filesystem::path p(e.path);
    if (p.is_relative()) p = base_dir / p;
    FeatureBag bag = read_bag_file(p);
    if (bag.features.cols() != width)
      throw ConfigError("bag '" + e.id + "' has " + std::to_string(bag.features.cols()) +
                        " features per instance but the layout expects " + std::to_string(width));
    if (bag.features.rows() == 0) throw ConfigError("bag '" + e.id + "' has no instances");
    if (bag.label != e.label)
      throw ConfigError("bag '" + e.id + "' label " + std::to_string(bag.label) + " disagrees with manifest label " +
                        std::to_string(e.label));
    bags.push_back(std::move(bag));
  }
  return bags;
}

// ---------------------------------------------------------------------------
// Instance sampling

/// Fixes the bag to exactly target_n rows: uniform subsampling without
/// replacement (kept rows stay in original order) or zero padding appended
/// after the original rows.
inline FeatureBag sample_or_pad(const FeatureBag& bag, std::size_t target_n, RngStream& rng) {
  if (target_n == 0) throw ParameterError("sample_or_pad: target_n must be at least 1");
  const std::size_t n = bag.features.rows();
  const std::size_t m = bag.features.cols();
  FeatureBag out{bag.bag_id, Matrix(target_n, m), bag.label};
  if (n <= target_n) {
    std::copy(bag.features.data().begin(), bag.features.data().end(), out.features.data().begin());
    return out;
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < target_n; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(target_n);
  std::sort(idx.begin(), idx.end());
  for (std::size_t r = 0; r < target_n; ++r) {
    auto src = bag.features.row(idx[r]);
    std::copy(src.begin(), src.end(), out.features.row(r).begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stratified split

struct SplitSpec {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;
  std::uint64_t seed = 0;

  void validate() const {
    for (double f : {train, val, test})
      if (!(f >= 0.0 && f <= 1.0)) throw ParameterError("split fractions must lie in [0, 1]");
    if (std::abs(train + val + test - 1.0) > 1e-9) throw ParameterError("split fractions must sum to 1");
  }
};

/// Largest-remainder apportionment of `count` items over `fractions`; ties
/// in the remainder go to the earlier slot.
inline std::vector<std::size_t> apportion(std::size_t count, std::span<const double> fractions) {
  std::vector<std::size_t> sizes(fractions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    const double exact = fractions[i] * static_cast<double>(count);
    // Guard against 0.7*10 = 6.9999999 style artifacts.
    double whole = std::floor(exact + 1e-9);
    sizes[i] = static_cast<std::size_t>(whole);
    assigned += sizes[i];
    remainders.emplace_back(exact - whole, i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < count; ++r, ++assigned) ++sizes[remainders[r % remainders.size()].second];
  return sizes;
}

/// Assigns train/val/test tags per class so that every class follows the
/// requested fractions to within one bag. Within a class, bags are ordered by
/// id and then shuffled with the spec's seed.
inline Manifest stratified_split(const Manifest& manifest, const SplitSpec& spec) {
  spec.validate();
  if (manifest.entries.empty()) throw ParameterError("stratified_split: empty manifest");
  Manifest out = manifest;
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < out.entries.size(); ++i) by_class[out.entries[i].label].push_back(i);

  RngStream rng(spec.seed);
  const std::array<double, 3> fractions{spec.train, spec.val, spec.test};
  const std::array<SplitTag, 3> tags{SplitTag::kTrain, SplitTag::kVal, SplitTag::kTest};
  for (auto& [label, members] : by_class) {
    std::sort(members.begin(), members.end(),
              [&](std::size_t a, std::size_t b) { return out.entries[a].id < out.entries[b].id; });
    for (std::size_t i = members.size(); i > 1; --i) std::swap(members[i - 1], members[rng.below(i)]);
    const auto sizes = apportion(members.size(), fractions);
    std::size_t pos = 0;
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t j = 0; j < sizes[s]; ++j) out.entries[members[pos++]].split = tags[s];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

/// For each group, the classes whose bags carry signal in that group's block.
using SignalPlan = std::vector<std::vector<int>>;

struct SynthOptions {
  double shift = 2.0;
  double min_signal_fraction = 0.1;
  double max_signal_fraction = 0.3;
  /// Ordinal mode: grade g shifts every informative block by shift*g/(c-1)
  /// instead of using class-specific sub-blocks.
  bool ordinal = false;
};

struct SynthDataset {
  Manifest manifest;
  std::vector<FeatureBag> bags;
};

/// Default plan: class y is informative in group y mod K.
inline SignalPlan round_robin_plan(std::size_t groups, std::size_t classes) {
  SignalPlan plan(groups);
  for (std::size_t y = 0; y < classes; ++y) plan[y % groups].push_back(static_cast<int>(y));
  return plan;
}

/// Generates N(0,1) bags whose signal instances carry a +shift mean offset.
/// A group informative for classes {y1, ..., yr} splits its block into r
/// contiguous sub-blocks; a class-y bag shifts only sub-block y on a random
/// 10-30% of its instances. Labels cycle through 0..c-1.
inline SynthDataset synth_generate(const GroupLayout& layout, std::size_t num_bags, std::size_t n, std::size_t c,
                                   const SignalPlan& plan, RngStream& rng, const SynthOptions& opt = {}) {
  layout.validate();
  if (c == 0 || n == 0) throw ParameterError("synth_generate: need at least one class and one instance");
  if (plan.size() != layout.num_groups())
    throw ParameterError("synth_generate: signal plan has " + std::to_string(plan.size()) + " groups, layout has " +
                         std::to_string(layout.num_groups()));
  if (!(opt.min_signal_fraction >= 0.0 && opt.min_signal_fraction <= opt.max_signal_fraction &&
        opt.max_signal_fraction <= 1.0))
    throw ParameterError("synth_generate: signal fractions must satisfy 0 <= min <= max <= 1");
  std::vector<bool> covered(c, false);
  for (const auto& classes : plan)
    for (int y : classes) {
      if (y < 0 || static_cast<std::size_t>(y) >= c)
        throw ParameterError("synth_generate: plan names class " + std::to_string(y) + " outside [0, c)");
      covered[static_cast<std::size_t>(y)] = true;
    }
  for (std::size_t y = 0; y < c; ++y)
    if (!covered[y] && !(opt.ordinal && y == 0) && c > 1)
      throw ParameterError("synth_generate: class " + std::to_string(y) + " is not covered by any group");

  SynthDataset ds;
  ds.manifest.layout = layout;
  ds.manifest.num_classes = c;
  const std::size_t m = layout.total_width();
  for (std::size_t b = 0; b < num_bags; ++b) {
    const int label = static_cast<int>(b % c);
    char id[32];
    std::snprintf(id, sizeof id, "bag_%05zu", b);
    FeatureBag bag{id, Matrix(n, m), label};
    for (double& v : bag.features.data()) v = rng.normal();

    const double fraction = rng.uniform(opt.min_signal_fraction, opt.max_signal_fraction);
    const auto signal_count = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))), 1, n);
    std::vector<std::size_t> rows(n);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    for (std::size_t i = 0; i < signal_count; ++i) std::swap(rows[i], rows[i + rng.below(n - i)]);
    rows.resize(signal_count);

    for (std::size_t g = 0; g < layout.num_groups(); ++g) {
      const auto& classes = plan[g];
      auto it = std::find(classes.begin(), classes.end(), label);
      if (it == classes.end()) continue;
      std::size_t begin = layout.offset(g);
      std::size_t end = begin + layout.dims[g];
      double amount = opt.shift;
      if (opt.ordinal) {
        amount = c > 1 ? opt.shift * label / static_cast<double>(c - 1) : 0.0;
      } else {
        const std::size_t slot = static_cast<std::size_t>(it - classes.begin());
        const std::size_t width = layout.dims[g];
        const std::size_t lo = width * slot / classes.size();
        const std::size_t hi = width * (slot + 1) / classes.size();
        end = begin + std::max(hi, lo + 1);
        begin += lo;
      }
      for (std::size_t r : rows)
        for (std::size_t j = begin; j < end; ++j) bag.features(r, j) += amount;
    }
    ds.manifest.entries.push_back({bag.bag_id, "bags/" + bag.bag_id + ".gmbg", label, SplitTag::kUnassigned});
    ds.bags.push_back(std::move(bag));
  }
  return ds;
}

/// Writes the manifest to dir/manifest.json and each bag to its entry path.
inline void write_dataset(const std::filesystem::path& dir, const SynthDataset& ds) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < ds.bags.size(); ++i) write_bag_file(dir / ds.manifest.entries[i].path, ds.bags[i]);
  save_manifest(dir / "manifest.json", ds.manifest);
}

}  // namespace gasmil
