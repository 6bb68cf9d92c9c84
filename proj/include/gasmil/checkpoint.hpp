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

// Architecture registry and the parameter checkpoint format.
//
// Checkpoint layout (little-endian):
//   "GMCK" | u32 version=1 | u32 config_len | config JSON (UTF-8) |
//   then until end of file, per tensor:
//     u16 name_len | name | u32 rows | u32 cols | rows*cols f64 row-major
// Tensors appear in the model's canonical parameter order.

#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "gasmil/bagio.hpp"
#include "gasmil/baselines.hpp"
#include "gasmil/model.hpp"
#include "json.hpp"

namespace gasmil {

using AnyModel = std::variant<GasMilModel, AbMilModel, ChowderModel>;

/// Everything needed to rebuild a model: the architecture, the shared
/// GAS-MIL style settings and the AB-MIL attention width.
struct ModelSpec {
  ArchKind arch = ArchKind::kGasMil;
  GasMilConfig config;
  std::size_t attention_hidden = 128;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = {{"arch", to_string(s.arch)}, {"model", s.config}, {"attention_hidden", s.attention_hidden}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  s.arch = parse_arch_kind(j.at("arch").get<std::string>());
  j.at("model").get_to(s.config);
  j.at("attention_hidden").get_to(s.attention_hidden);
}

inline AnyModel make_model(const ModelSpec& spec, RngStream& init_rng) {
  switch (spec.arch) {
    case ArchKind::kAbMil: return AbMilModel(BaselineConfig{ArchKind::kAbMil, spec.attention_hidden, spec.config}, init_rng);
    case ArchKind::kChowder:
      return ChowderModel(BaselineConfig{ArchKind::kChowder, spec.attention_hidden, spec.config}, init_rng);
    default: return GasMilModel(spec.config, init_rng);
  }
}

inline ModelSpec spec_of(const AnyModel& model) {
  return std::visit(
      [](const auto& m) -> ModelSpec {
        using M = std::remove_cvref_t<decltype(m)>;
        if constexpr (std::is_same_v<M, GasMilModel>)
          return {ArchKind::kGasMil, m.config(), 128};
        else
          return {m.config().kind, m.config().base, m.config().attention_hidden};
      },
      model);
}

inline constexpr std::array<char, 4> kCheckpointMagic{'G', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(AnyModel& model) {
  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  const std::string config = nlohmann::json(spec_of(model)).dump();
  detail::put_u32(out, static_cast<std::uint32_t>(config.size()));
  detail::put_bytes(out, config);
  const auto params = std::visit([](auto& m) { return m.parameters(); }, model);
  for (const auto& [name, p] : params) {
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    detail::put_bytes(out, name);
    detail::put_u32(out, static_cast<std::uint32_t>(p->value.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(p->value.cols()));
    for (double v : p->value.data()) detail::put_f64(out, v);
  }
  return out;
}

struct CheckpointHeader {
  std::uint32_t version = 0;
  ModelSpec spec;
  struct Tensor {
    std::string name;
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
  };
  std::vector<Tensor> tensors;
};

namespace detail {

inline ModelSpec read_checkpoint_spec(ByteReader& r, std::uint32_t& version) {
  const std::string magic = r.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) throw FormatError("bad checkpoint magic", 0);
  const std::size_t version_at = r.offset();
  version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  const std::uint32_t len = r.u32("config length");
  const std::size_t config_at = r.offset();
  const std::string text = r.bytes(len, "config");
  try {
    return nlohmann::json::parse(text).get<ModelSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint config: ") + e.what(), config_at);
  }
}

}  // namespace detail

/// Header plus tensor table, without materializing the weights.
inline CheckpointHeader read_checkpoint_header(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  CheckpointHeader h;
  h.spec = detail::read_checkpoint_spec(r, h.version);
  while (r.remaining() != 0) {
    CheckpointHeader::Tensor t;
    t.name = r.bytes(r.u16("tensor name length"), "tensor name");
    t.rows = r.u32("tensor rows");
    t.cols = r.u32("tensor cols");
    const std::uint64_t cells = static_cast<std::uint64_t>(t.rows) * t.cols;
    if (cells > r.remaining() / 8) throw FormatError("tensor '" + t.name + "' exceeds file size", r.offset());
    r.bytes(cells * 8, "tensor values");
    h.tensors.push_back(std::move(t));
  }
  return h;
}

inline AnyModel decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  std::uint32_t version = 0;
  const ModelSpec spec = detail::read_checkpoint_spec(r, version);
  RngStream unused(0);
  AnyModel model = make_model(spec, unused);
  auto params = std::visit([](auto& m) { return m.parameters(); }, model);
  for (auto& [name, p] : params) {
    const std::size_t at = r.offset();
    if (r.remaining() == 0) throw FormatError("checkpoint ends before tensor '" + name + "'", at);
    const std::string got = r.bytes(r.u16("tensor name length"), "tensor name");
    if (got != name) throw FormatError("expected tensor '" + name + "', found '" + got + "'", at);
    const std::uint32_t rows = r.u32("tensor rows");
    const std::uint32_t cols = r.u32("tensor cols");
    if (rows != p->value.rows() || cols != p->value.cols())
      throw FormatError("tensor '" + name + "' is " + std::to_string(rows) + "x" + std::to_string(cols) +
                        ", expected " + p->value.shape(),
                        at);
    for (double& v : p->value.data()) v = r.f64("tensor value");
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last tensor", r.offset());
  return model;
}

inline void save_checkpoint(const std::filesystem::path& path, AnyModel& model) {
  detail::write_file_bytes(path, encode_checkpoint(model));
}

inline AnyModel load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(detail::read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

}  // namespace gasmil
