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

// The grouped ensemble MIL network.
//
//   features A (n x m) = [A_1 | ... | A_K]      one column block per group
//   B_k = GFEB_k(A_k), B_{K+1} = GFEB_{K+1}(A)  each n x c
//   C_k = MaxMin(B_k)                           2s x c, top-s then bottom-s
//   D   = [C_1; ...; C_{K+1}]^T                 c x 2(K+1)s
//   score_j = head(D[j, :])                     one shared head per class row
//
// Weights are templated on their storage so the same structs hold trainable
// Parameters, plain gradient matrices, or test fixtures.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "gasmil/bagio.hpp"
#include "gasmil/errors.hpp"
#include "gasmil/numerics.hpp"
#include "json.hpp"

namespace gasmil {

enum class GfebKind { kMlp, kAttention };
enum class LossKind { kCrossEntropy, kBceOrdinal };

inline std::string to_string(GfebKind k) { return k == GfebKind::kMlp ? "mlp" : "attention"; }
inline GfebKind parse_gfeb_kind(const std::string& s) {
  if (s == "mlp") return GfebKind::kMlp;
  if (s == "attention") return GfebKind::kAttention;
  throw ParameterError("unknown GFEB kind '" + s + "' (expected mlp or attention)");
}

inline std::string to_string(LossKind k) { return k == LossKind::kCrossEntropy ? "ce" : "bce-ordinal"; }
inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "ce") return LossKind::kCrossEntropy;
  if (s == "bce-ordinal" || s == "bce_ordinal") return LossKind::kBceOrdinal;
  throw ParameterError("unknown loss kind '" + s + "' (expected ce or bce-ordinal)");
}

/// Network width for c classes: c logits for cross-entropy, c-1 cumulative
/// targets for the ordinal loss.
inline std::size_t output_width_for(std::size_t num_classes, LossKind loss) {
  return loss == LossKind::kBceOrdinal ? num_classes - 1 : num_classes;
}

struct GasMilConfig {
  GroupLayout layout;
  std::size_t num_classes = 2;
  LossKind loss = LossKind::kCrossEntropy;
  std::size_t selection_count = 20;
  GfebKind gfeb_kind = GfebKind::kMlp;
  std::size_t mlp_hidden = 192;
  std::size_t attn_feature_dim = 512;
  std::size_t attn_dim = 256;
  std::size_t head_hidden = 96;
  double head_dropout = 0.3;
  /// The extra block over the full concatenation. Off gives the single-group
  /// min-max model when K = 1.
  bool concat_group = true;

  std::size_t output_width() const { return output_width_for(num_classes, loss); }
  std::size_t num_blocks() const { return layout.num_groups() + (concat_group ? 1 : 0); }
  std::size_t block_input_width(std::size_t block) const {
    return block < layout.num_groups() ? layout.dims[block] : layout.total_width();
  }
  /// Width of each row of D: 2s per block.
  std::size_t selected_width() const { return 2 * selection_count * num_blocks(); }

  void validate() const {
    layout.validate();
    if (num_classes < 2) throw ConfigError("GasMilConfig: num_classes must be at least 2");
    if (selection_count < 1) throw ConfigError("GasMilConfig: selection count s must be at least 1");
    if (mlp_hidden < 1 || attn_feature_dim < 1 || attn_dim < 1 || head_hidden < 1)
      throw ConfigError("GasMilConfig: layer widths must be positive");
    if (!(head_dropout >= 0.0 && head_dropout < 1.0)) throw ConfigError("GasMilConfig: head dropout must lie in [0, 1)");
  }

  friend bool operator==(const GasMilConfig&, const GasMilConfig&) = default;
};

inline void to_json(nlohmann::json& j, const GasMilConfig& c) {
  j = {{"layout", c.layout},
       {"num_classes", c.num_classes},
       {"loss", to_string(c.loss)},
       {"s", c.selection_count},
       {"gfeb", to_string(c.gfeb_kind)},
       {"mlp_hidden", c.mlp_hidden},
       {"attn_feature_dim", c.attn_feature_dim},
       {"attn_dim", c.attn_dim},
       {"head_hidden", c.head_hidden},
       {"head_dropout", c.head_dropout},
       {"concat_group", c.concat_group}};
}

inline void from_json(const nlohmann::json& j, GasMilConfig& c) {
  j.at("layout").get_to(c.layout);
  j.at("num_classes").get_to(c.num_classes);
  c.loss = parse_loss_kind(j.at("loss").get<std::string>());
  j.at("s").get_to(c.selection_count);
  c.gfeb_kind = parse_gfeb_kind(j.at("gfeb").get<std::string>());
  j.at("mlp_hidden").get_to(c.mlp_hidden);
  j.at("attn_feature_dim").get_to(c.attn_feature_dim);
  j.at("attn_dim").get_to(c.attn_dim);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("head_dropout").get_to(c.head_dropout);
  j.at("concat_group").get_to(c.concat_group);
}

// ---------------------------------------------------------------------------
// Weight structures

template <class T>
struct AffineT {
  T weight;  // in x out
  T bias;    // 1 x out
};

template <class T>
struct MlpBlockT {
  AffineT<T> hidden;
  AffineT<T> out;
};

template <class T>
struct AttentionBlockT {
  AffineT<T> project;
  AffineT<T> query;
  AffineT<T> key;
  AffineT<T> value;
  AffineT<T> out;
};

template <class T>
using GfebT = std::variant<MlpBlockT<T>, AttentionBlockT<T>>;

/// Two affine layers with a sigmoid and dropout between them.
template <class T>
struct HeadT {
  AffineT<T> hidden;
  AffineT<T> out;
};

template <class T>
struct GasMilWeights {
  std::vector<GfebT<T>> blocks;
  HeadT<T> head;
};

using GasMilParams = GasMilWeights<Parameter>;
using GasMilGrads = GasMilWeights<Matrix>;

inline const Matrix& tensor_of(const Parameter& p) noexcept { return p.value; }
inline const Matrix& tensor_of(const Matrix& m) noexcept { return m; }
inline Matrix& tensor_of(Parameter& p) noexcept { return p.value; }
inline Matrix& tensor_of(Matrix& m) noexcept { return m; }

template <class A, class F>
void for_each_tensor(A& affine, const std::string& prefix, F&& f) {
  f(prefix + ".weight", affine.weight);
  f(prefix + ".bias", affine.bias);
}

/// Visits every tensor as f(name, tensor) in the canonical checkpoint order:
/// blocks 1..K+1 (GFEB layers in forward order), then the head.
template <class W, class F>
void for_each_tensor_in(W& weights, F&& f) {
  for (std::size_t k = 0; k < weights.blocks.size(); ++k) {
    const std::string block = "gfeb" + std::to_string(k + 1);
    std::visit(
        [&](auto& b) {
          if constexpr (requires { b.project; }) {
            for_each_tensor(b.project, block + ".attn.project", f);
            for_each_tensor(b.query, block + ".attn.query", f);
            for_each_tensor(b.key, block + ".attn.key", f);
            for_each_tensor(b.value, block + ".attn.value", f);
            for_each_tensor(b.out, block + ".attn.out", f);
          } else {
            for_each_tensor(b.hidden, block + ".mlp.hidden", f);
            for_each_tensor(b.out, block + ".mlp.out", f);
          }
        },
        weights.blocks[k]);
  }
  for_each_tensor(weights.head.hidden, "head.hidden", f);
  for_each_tensor(weights.head.out, "head.out", f);
}

template <class T>
AffineT<Matrix> zeros_like(const AffineT<T>& a) {
  return {Matrix(tensor_of(a.weight).rows(), tensor_of(a.weight).cols()),
          Matrix(tensor_of(a.bias).rows(), tensor_of(a.bias).cols())};
}

template <class T>
HeadT<Matrix> zeros_like(const HeadT<T>& h) {
  return {zeros_like(h.hidden), zeros_like(h.out)};
}

template <class T>
GfebT<Matrix> zeros_like(const GfebT<T>& block) {
  return std::visit(
      [](const auto& b) -> GfebT<Matrix> {
        if constexpr (requires { b.project; })
          return AttentionBlockT<Matrix>{zeros_like(b.project), zeros_like(b.query), zeros_like(b.key),
                                         zeros_like(b.value), zeros_like(b.out)};
        else
          return MlpBlockT<Matrix>{zeros_like(b.hidden), zeros_like(b.out)};
      },
      block);
}

template <class T>
GasMilGrads zeros_like(const GasMilWeights<T>& w) {
  GasMilGrads g;
  for (const auto& b : w.blocks) g.blocks.push_back(zeros_like(b));
  g.head = zeros_like(w.head);
  return g;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for both weight and bias.
inline AffineT<Parameter> init_affine(std::size_t in, std::size_t out, RngStream& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Matrix w(in, out), b(1, out);
  for (double& v : w.data()) v = rng.uniform(-bound, bound);
  for (double& v : b.data()) v = rng.uniform(-bound, bound);
  return {Parameter(std::move(w)), Parameter(std::move(b))};
}

inline MlpBlockT<Parameter> init_mlp_block(std::size_t in, std::size_t hidden, std::size_t out, RngStream& rng) {
  auto h = init_affine(in, hidden, rng);
  auto o = init_affine(hidden, out, rng);
  return {std::move(h), std::move(o)};
}

inline AttentionBlockT<Parameter> init_attention_block(std::size_t in, std::size_t feature_dim, std::size_t attn_dim,
                                                       std::size_t out, RngStream& rng) {
  AttentionBlockT<Parameter> b;
  b.project = init_affine(in, feature_dim, rng);
  b.query = init_affine(feature_dim, attn_dim, rng);
  b.key = init_affine(feature_dim, attn_dim, rng);
  b.value = init_affine(feature_dim, feature_dim, rng);
  b.out = init_affine(feature_dim, out, rng);
  return b;
}

inline HeadT<Parameter> init_head(std::size_t in, std::size_t hidden, RngStream& rng) {
  auto h = init_affine(in, hidden, rng);
  auto o = init_affine(hidden, 1, rng);
  return {std::move(h), std::move(o)};
}

inline GasMilParams init_params(const GasMilConfig& config, RngStream& rng) {
  config.validate();
  GasMilParams p;
  const std::size_t c = config.output_width();
  for (std::size_t k = 0; k < config.num_blocks(); ++k) {
    const std::size_t in = config.block_input_width(k);
    if (config.gfeb_kind == GfebKind::kMlp)
      p.blocks.emplace_back(init_mlp_block(in, config.mlp_hidden, c, rng));
    else
      p.blocks.emplace_back(init_attention_block(in, config.attn_feature_dim, config.attn_dim, c, rng));
  }
  p.head = init_head(config.selected_width(), config.head_hidden, rng);
  return p;
}

/// Sum of optimizer step counts; changes whenever any parameter is updated.
inline std::uint64_t params_stamp(const GasMilParams& p) {
  std::uint64_t stamp = 0;
  for_each_tensor_in(p, [&](const std::string&, const Parameter& t) { stamp += t.step_count + 1; });
  return stamp;
}

// ---------------------------------------------------------------------------
// GFEB: MLP variant

struct MlpTrace {
  Matrix input;
  Matrix hidden;  // sigmoid activations
};

template <class T>
Matrix gfeb_mlp(const Matrix& a, const MlpBlockT<T>& w, MlpTrace* trace = nullptr) {
  Matrix hidden = sigmoid_map(linear_affine(a, tensor_of(w.hidden.weight), tensor_of(w.hidden.bias)));
  Matrix out = linear_affine(hidden, tensor_of(w.out.weight), tensor_of(w.out.bias));
  if (trace) *trace = {a, std::move(hidden)};
  return out;
}

template <class T>
Matrix gfeb_mlp_backward(const MlpTrace& t, const MlpBlockT<T>& w, const Matrix& d_out, MlpBlockT<Matrix>& g,
                         bool want_input_grad) {
  Matrix d_hidden = linear_affine_backward(t.hidden, tensor_of(w.out.weight), d_out, g.out.weight, g.out.bias);
  Matrix d_pre = sigmoid_backward(t.hidden, d_hidden);
  return linear_affine_backward(t.input, tensor_of(w.hidden.weight), d_pre, g.hidden.weight, g.hidden.bias,
                                want_input_grad);
}

// ---------------------------------------------------------------------------
// GFEB: single-head scaled dot-product attention variant

struct AttentionTrace {
  Matrix input;
  Matrix x;        // projected input, n x F
  Matrix q, k, v;  // n x d, n x d, n x F
  Matrix weights;  // softmax(QK^T / sqrt(d)), n x n
  Matrix attended; // weights * V, n x F
};

template <class T>
Matrix gfeb_attention(const Matrix& a, const AttentionBlockT<T>& w, AttentionTrace* trace = nullptr) {
  Matrix x = linear_affine(a, tensor_of(w.project.weight), tensor_of(w.project.bias));
  Matrix q = linear_affine(x, tensor_of(w.query.weight), tensor_of(w.query.bias));
  Matrix k = linear_affine(x, tensor_of(w.key.weight), tensor_of(w.key.bias));
  Matrix v = linear_affine(x, tensor_of(w.value.weight), tensor_of(w.value.bias));
  Matrix logits = matmul_nt(q, k);
  logits *= 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix weights = row_softmax(logits);
  Matrix attended = matmul(weights, v);
  Matrix out = linear_affine(attended, tensor_of(w.out.weight), tensor_of(w.out.bias));
  if (trace) *trace = {a, std::move(x), std::move(q), std::move(k), std::move(v), std::move(weights), std::move(attended)};
  return out;
}

template <class T>
Matrix gfeb_attention_backward(const AttentionTrace& t, const AttentionBlockT<T>& w, const Matrix& d_out,
                               AttentionBlockT<Matrix>& g, bool want_input_grad) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(t.q.cols()));
  Matrix d_attended = linear_affine_backward(t.attended, tensor_of(w.out.weight), d_out, g.out.weight, g.out.bias);
  Matrix d_weights = matmul_nt(d_attended, t.v);
  Matrix d_v = matmul_tn(t.weights, d_attended);
  Matrix d_logits = row_softmax_backward(t.weights, d_weights);
  d_logits *= scale;
  Matrix d_q = matmul(d_logits, t.k);
  Matrix d_k = matmul_tn(d_logits, t.q);

  Matrix d_x = linear_affine_backward(t.x, tensor_of(w.query.weight), d_q, g.query.weight, g.query.bias);
  d_x += linear_affine_backward(t.x, tensor_of(w.key.weight), d_k, g.key.weight, g.key.bias);
  d_x += linear_affine_backward(t.x, tensor_of(w.value.weight), d_v, g.value.weight, g.value.bias);
  return linear_affine_backward(t.input, tensor_of(w.project.weight), d_x, g.project.weight, g.project.bias,
                                want_input_grad);
}

// ---------------------------------------------------------------------------
// Max-Min selection

struct MaxMinSelection {
  Matrix values;                     // 2s x c
  std::vector<std::size_t> indices;  // 2s x c row-major: source row of each entry
};

/// Per column: the s largest entries in descending order, then the s
/// smallest in ascending order. Ties go to the lowest row index in both
/// blocks.
inline MaxMinSelection max_min_select(const Matrix& b, std::size_t s) {
  const std::size_t n = b.rows();
  const std::size_t c = b.cols();
  if (s == 0) throw ConfigError("max_min_select: s must be at least 1");
  if (n < 2 * s)
    throw ConfigError("max_min_select: bag has " + std::to_string(n) + " instances but 2s = " + std::to_string(2 * s));
  MaxMinSelection out{Matrix(2 * s, c), std::vector<std::size_t>(2 * s * c)};
  std::vector<std::size_t> order(n);
  for (std::size_t j = 0; j < c; ++j) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(s), order.end(),
                      [&](std::size_t x, std::size_t y) { return b(x, j) > b(y, j) || (b(x, j) == b(y, j) && x < y); });
    for (std::size_t p = 0; p < s; ++p) {
      out.values(p, j) = b(order[p], j);
      out.indices[p * c + j] = order[p];
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(s), order.end(),
                      [&](std::size_t x, std::size_t y) { return b(x, j) < b(y, j) || (b(x, j) == b(y, j) && x < y); });
    for (std::size_t p = 0; p < s; ++p) {
      out.values(s + p, j) = b(order[p], j);
      out.indices[(s + p) * c + j] = order[p];
    }
  }
  return out;
}

/// Routes dC back onto the selected entries of an n x c matrix.
inline Matrix max_min_backward(const MaxMinSelection& sel, std::size_t n, const Matrix& d_selected) {
  const std::size_t c = sel.values.cols();
  Matrix d(n, c);
  for (std::size_t p = 0; p < sel.values.rows(); ++p)
    for (std::size_t j = 0; j < c; ++j) d(sel.indices[p * c + j], j) += d_selected(p, j);
  return d;
}

/// D = [C_1; ...; C_L]^T. Row j of D gathers class-j evidence from every
/// block, each contributing its max block then its min block.
inline Matrix assemble_d(std::span<const Matrix> selected) {
  if (selected.empty()) throw DimensionError("assemble_d: no blocks");
  const std::size_t c = selected.front().cols();
  std::size_t total = 0;
  for (const auto& m : selected) {
    if (m.cols() != c)
      throw DimensionError("assemble_d: inconsistent class count " + m.shape() + " vs " + selected.front().shape());
    total += m.rows();
  }
  Matrix d(c, total);
  std::size_t col = 0;
  for (const auto& m : selected)
    for (std::size_t p = 0; p < m.rows(); ++p, ++col)
      for (std::size_t j = 0; j < c; ++j) d(j, col) = m(p, j);
  return d;
}

/// Splits dD back into per-block 2s x c gradients.
inline std::vector<Matrix> assemble_d_backward(const Matrix& d_d, std::size_t blocks, std::size_t rows_per_block) {
  std::vector<Matrix> out(blocks, Matrix(rows_per_block, d_d.rows()));
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t p = 0; p < rows_per_block; ++p)
      for (std::size_t j = 0; j < d_d.rows(); ++j) out[b](p, j) = d_d(j, b * rows_per_block + p);
  return out;
}

// ---------------------------------------------------------------------------
// Classification head

struct HeadTrace {
  Matrix input;   // D, c x 2Ls
  Matrix hidden;  // sigmoid activations, c x head_hidden
  Matrix mask;    // inverted-dropout multipliers
};

/// Applies the head to every row of `d`; returns the row-major output, so a
/// c x 2Ls input with a one-column output layer gives one score per class.
template <class T>
std::vector<double> head_forward(const Matrix& d, const HeadT<T>& w, double dropout, bool training, RngStream& rng,
                                 HeadTrace* trace = nullptr) {
  Matrix hidden = sigmoid_map(linear_affine(d, tensor_of(w.hidden.weight), tensor_of(w.hidden.bias)));
  Matrix mask = dropout_mask(hidden.rows(), hidden.cols(), dropout, training, rng);
  Matrix out = linear_affine(hadamard(hidden, mask), tensor_of(w.out.weight), tensor_of(w.out.bias));
  if (trace) *trace = {d, std::move(hidden), std::move(mask)};
  return out.data();
}

template <class T>
Matrix head_backward(const HeadTrace& t, const HeadT<T>& w, std::span<const double> d_scores, HeadT<Matrix>& g) {
  const std::size_t out_cols = tensor_of(w.out.weight).cols();
  if (d_scores.size() != t.input.rows() * out_cols)
    throw DimensionError("head_backward: got " + std::to_string(d_scores.size()) + " score gradients for a " +
                         std::to_string(t.input.rows()) + "x" + std::to_string(out_cols) + " output");
  Matrix d_out(t.input.rows(), out_cols);
  std::copy(d_scores.begin(), d_scores.end(), d_out.data().begin());
  Matrix dropped = hadamard(t.hidden, t.mask);
  Matrix d_dropped = linear_affine_backward(dropped, tensor_of(w.out.weight), d_out, g.out.weight, g.out.bias);
  Matrix d_pre = sigmoid_backward(t.hidden, hadamard(d_dropped, t.mask));
  return linear_affine_backward(t.input, tensor_of(w.hidden.weight), d_pre, g.hidden.weight, g.hidden.bias);
}

// ---------------------------------------------------------------------------
// Full forward / backward

struct BlockTrace {
  std::variant<MlpTrace, AttentionTrace> gfeb;
  MaxMinSelection selection;
  std::size_t instances = 0;
};

struct ForwardTrace {
  std::vector<BlockTrace> blocks;
  HeadTrace head;
  std::uint64_t stamp = 0;
  std::size_t instances = 0;
  std::size_t features = 0;
};

/// Input for block k: group k's columns, or everything for the concat block.
inline Matrix block_input(const Matrix& features, const GasMilConfig& config, std::size_t block) {
  if (block >= config.layout.num_groups()) return features;
  const std::size_t off = config.layout.offset(block);
  return slice_cols(features, off, off + config.layout.dims[block]);
}

template <class T>
Matrix gfeb_forward(const Matrix& a, const GfebT<T>& block, std::variant<MlpTrace, AttentionTrace>* trace) {
  return std::visit(
      [&](const auto& b) -> Matrix {
        if constexpr (requires { b.project; }) {
          if (!trace) return gfeb_attention(a, b);
          AttentionTrace t;
          Matrix out = gfeb_attention(a, b, &t);
          *trace = std::move(t);
          return out;
        } else {
          if (!trace) return gfeb_mlp(a, b);
          MlpTrace t;
          Matrix out = gfeb_mlp(a, b, &t);
          *trace = std::move(t);
          return out;
        }
      },
      block);
}

inline void check_forward_input(const Matrix& features, const GasMilConfig& config) {
  if (features.cols() != config.layout.total_width())
    throw ConfigError("layout mismatch: bag has " + std::to_string(features.cols()) +
                      " features per instance, model layout expects " + std::to_string(config.layout.total_width()));
  if (features.rows() < 2 * config.selection_count)
    throw ConfigError("bag has " + std::to_string(features.rows()) + " instances; Max-Min needs at least 2s = " +
                      std::to_string(2 * config.selection_count));
}

/// Raw per-output scores for one bag. Training mode draws head dropout from
/// `rng`; inference never touches it.
inline std::vector<double> model_forward(const Matrix& features, const GasMilParams& params,
                                         const GasMilConfig& config, bool training, RngStream& rng,
                                         ForwardTrace* trace = nullptr) {
  check_forward_input(features, config);
  if (params.blocks.size() != config.num_blocks())
    throw ConfigError("parameters hold " + std::to_string(params.blocks.size()) + " blocks, config expects " +
                      std::to_string(config.num_blocks()));
  std::vector<Matrix> selected;
  selected.reserve(config.num_blocks());
  if (trace) {
    trace->blocks.assign(config.num_blocks(), {});
    trace->instances = features.rows();
    trace->features = features.cols();
    trace->stamp = params_stamp(params);
  }
  for (std::size_t k = 0; k < config.num_blocks(); ++k) {
    Matrix scores = gfeb_forward(block_input(features, config, k), params.blocks[k],
                                 trace ? &trace->blocks[k].gfeb : nullptr);
    MaxMinSelection sel = max_min_select(scores, config.selection_count);
    selected.push_back(sel.values);
    if (trace) {
      trace->blocks[k].selection = std::move(sel);
      trace->blocks[k].instances = features.rows();
    }
  }
  Matrix d = assemble_d(selected);
  return head_forward(d, params.head, config.head_dropout, training, rng, trace ? &trace->head : nullptr);
}

inline std::vector<double> model_forward(const FeatureBag& bag, const GasMilParams& params, const GasMilConfig& config,
                                         bool training, RngStream& rng, ForwardTrace* trace = nullptr) {
  return model_forward(bag.features, params, config, training, rng, trace);
}

struct GasMilGradients {
  GasMilGrads params;
  Matrix input;  // empty unless requested
};

/// Exact reverse pass of the recorded forward computation for the given
/// dLoss/dScores. Through Max-Min only selected entries receive gradient.
inline GasMilGradients model_gradients(const ForwardTrace& trace, const GasMilParams& params,
                                       const GasMilConfig& config, std::span<const double> loss_grad,
                                       bool want_input_grad = false) {
  if (trace.blocks.size() != params.blocks.size() || trace.stamp != params_stamp(params))
    throw UsageError("model_gradients: trace does not belong to the current parameters (stale trace)");
  if (loss_grad.size() != config.output_width())
    throw DimensionError("model_gradients: loss gradient has " + std::to_string(loss_grad.size()) +
                         " entries, model emits " + std::to_string(config.output_width()));
  GasMilGradients out{zeros_like(params), {}};
  if (want_input_grad) out.input = Matrix(trace.instances, trace.features);

  Matrix d_d = head_backward(trace.head, params.head, loss_grad, out.params.head);
  const std::vector<Matrix> d_selected =
      assemble_d_backward(d_d, trace.blocks.size(), 2 * config.selection_count);
  for (std::size_t k = 0; k < trace.blocks.size(); ++k) {
    const BlockTrace& bt = trace.blocks[k];
    Matrix d_scores = max_min_backward(bt.selection, bt.instances, d_selected[k]);
    Matrix d_input = std::visit(
        [&](auto& g) -> Matrix {
          using G = std::remove_cvref_t<decltype(g)>;
          if constexpr (std::is_same_v<G, AttentionBlockT<Matrix>>)
            return gfeb_attention_backward(std::get<AttentionTrace>(bt.gfeb),
                                           std::get<AttentionBlockT<Parameter>>(params.blocks[k]), d_scores, g,
                                           want_input_grad);
          else
            return gfeb_mlp_backward(std::get<MlpTrace>(bt.gfeb), std::get<MlpBlockT<Parameter>>(params.blocks[k]),
                                     d_scores, g, want_input_grad);
        },
        out.params.blocks[k]);
    if (!want_input_grad) continue;
    const bool concat = k >= config.layout.num_groups();
    const std::size_t off = concat ? 0 : config.layout.offset(k);
    for (std::size_t i = 0; i < d_input.rows(); ++i)
      for (std::size_t j = 0; j < d_input.cols(); ++j) out.input(i, off + j) += d_input(i, j);
  }
  return out;
}

/// Class decision from raw scores: argmax for cross-entropy (first maximum
/// wins), number of sigmoid(score) > 0.5 for the ordinal head.
inline int predict_label(std::span<const double> scores, LossKind loss) {
  if (scores.empty()) throw DimensionError("predict_label: empty score vector");
  if (loss == LossKind::kCrossEntropy)
    return static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin());
  return static_cast<int>(std::count_if(scores.begin(), scores.end(), [](double z) { return sigmoid(z) > 0.5; }));
}

// ---------------------------------------------------------------------------
// Trainable wrapper shared with the baselines

struct NamedParameter {
  std::string name;
  Parameter* param;
};

template <class W>
std::vector<NamedParameter> named_parameters(W& weights) {
  std::vector<NamedParameter> out;
  for_each_tensor_in(weights, [&](const std::string& name, Parameter& p) { out.push_back({name, &p}); });
  return out;
}

template <class W>
std::vector<Matrix> flatten_grads(W&& grads) {
  std::vector<Matrix> out;
  for_each_tensor_in(grads, [&](const std::string&, Matrix& m) { out.push_back(std::move(m)); });
  return out;
}

/// GAS-MIL behind the interface the trainer and checkpoint code expect.
class GasMilModel {
 public:
  using Trace = ForwardTrace;

  GasMilModel(GasMilConfig config, RngStream& init_rng) : config_(std::move(config)) {
    params_ = init_params(config_, init_rng);
  }

  const GasMilConfig& config() const noexcept { return config_; }
  GasMilParams& params() noexcept { return params_; }
  const GasMilParams& params() const noexcept { return params_; }

  std::size_t input_width() const { return config_.layout.total_width(); }
  std::size_t min_instances() const { return 2 * config_.selection_count; }
  std::size_t num_classes() const { return config_.num_classes; }
  std::size_t output_width() const { return config_.output_width(); }
  LossKind loss() const { return config_.loss; }

  std::vector<double> forward(const Matrix& features, bool training, RngStream& rng, Trace* trace = nullptr) const {
    return model_forward(features, params_, config_, training, rng, trace);
  }

  std::vector<Matrix> backward(const Trace& trace, std::span<const double> d_scores) const {
    return flatten_grads(model_gradients(trace, params_, config_, d_scores).params);
  }

  std::vector<NamedParameter> parameters() { return named_parameters(params_); }

 private:
  GasMilConfig config_;
  GasMilParams params_;
};

}  // namespace gasmil
