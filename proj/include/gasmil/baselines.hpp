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

// Comparison aggregators over the full feature width:
//   AB-MIL   ungated attention pooling, a_i = w^T tanh(V h_i + b), then a head
//   Chowder  one instance MLP, Max-Min over its n x c scores, the shared head

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "gasmil/model.hpp"
#include "gasmil/numerics.hpp"

namespace gasmil {

enum class ArchKind { kGasMil, kAbMil, kChowder };

inline std::string to_string(ArchKind k) {
  switch (k) {
    case ArchKind::kAbMil: return "abmil";
    case ArchKind::kChowder: return "chowder";
    default: return "gasmil";
  }
}

inline ArchKind parse_arch_kind(const std::string& s) {
  if (s == "gasmil") return ArchKind::kGasMil;
  if (s == "abmil") return ArchKind::kAbMil;
  if (s == "chowder") return ArchKind::kChowder;
  throw ParameterError("unknown architecture '" + s + "' (expected gasmil, abmil or chowder)");
}

/// Baselines reuse GasMilConfig for layout, classes, loss, s and head sizes;
/// only the attention width is their own.
struct BaselineConfig {
  ArchKind kind = ArchKind::kAbMil;
  std::size_t attention_hidden = 128;
  GasMilConfig base;
};

// ---------------------------------------------------------------------------
// AB-MIL

template <class T>
struct AbMilWeights {
  AffineT<T> attention;  // m x L
  T attention_vector;    // L x 1
  HeadT<T> head;         // m -> head_hidden -> c
};

template <class W, class F>
void for_each_tensor_in_abmil(W& w, F&& f) {
  for_each_tensor(w.attention, "abmil.attention", f);
  f("abmil.attention_vector", w.attention_vector);
  for_each_tensor(w.head.hidden, "head.hidden", f);
  for_each_tensor(w.head.out, "head.out", f);
}

struct AbMilTrace {
  Matrix input;      // n x m
  Matrix tanh_act;   // n x L
  Matrix alpha;      // n x 1
  HeadTrace head;
};

/// Scores of length c. `alpha_out`, when given, receives the attention
/// weights (summing to 1).
template <class T>
std::vector<double> abmil_forward(const Matrix& h, const AbMilWeights<T>& w, double dropout, bool training,
                                  RngStream& rng, AbMilTrace* trace = nullptr, std::vector<double>* alpha_out = nullptr) {
  if (h.rows() == 0) throw ConfigError("abmil_forward: empty bag");
  if (h.cols() != tensor_of(w.attention.weight).rows())
    throw DimensionError("abmil_forward: bag " + h.shape() + " vs attention weight " +
                         tensor_of(w.attention.weight).shape());
  Matrix u = linear_affine(h, tensor_of(w.attention.weight), tensor_of(w.attention.bias));
  for (double& v : u.data()) v = std::tanh(v);
  Matrix logits = matmul(u, tensor_of(w.attention_vector));  // n x 1
  Matrix alpha = transpose(row_softmax(transpose(logits)));   // softmax over instances
  Matrix pooled = matmul_tn(alpha, h);                        // 1 x m
  HeadTrace ht;
  auto scores = head_forward(pooled, w.head, dropout, training, rng, trace ? &ht : nullptr);
  if (alpha_out) *alpha_out = alpha.data();
  if (trace) *trace = {h, std::move(u), std::move(alpha), std::move(ht)};
  return scores;
}

template <class T>
Matrix abmil_backward(const AbMilTrace& t, const AbMilWeights<T>& w, std::span<const double> d_scores,
                      AbMilWeights<Matrix>& g, bool want_input_grad = false) {
  Matrix d_pooled = head_backward(t.head, w.head, d_scores, g.head);  // 1 x m
  Matrix d_h = want_input_grad ? matmul(t.alpha, d_pooled) : Matrix{};
  Matrix d_alpha = matmul_nt(t.input, d_pooled);  // n x 1
  Matrix d_logits = transpose(row_softmax_backward(transpose(t.alpha), transpose(d_alpha)));
  g.attention_vector += matmul_tn(t.tanh_act, d_logits);
  Matrix d_u = matmul_nt(d_logits, tensor_of(w.attention_vector));
  for (std::size_t i = 0; i < d_u.size(); ++i) {
    const double a = t.tanh_act.data()[i];
    d_u.data()[i] *= 1.0 - a * a;
  }
  Matrix d_h_att = linear_affine_backward(t.input, tensor_of(w.attention.weight), d_u, g.attention.weight,
                                          g.attention.bias, want_input_grad);
  if (want_input_grad) d_h += d_h_att;
  return d_h;
}

class AbMilModel {
 public:
  using Trace = AbMilTrace;

  AbMilModel(BaselineConfig config, RngStream& rng) : config_(std::move(config)) {
    config_.kind = ArchKind::kAbMil;
    const GasMilConfig& b = config_.base;
    b.validate();
    if (config_.attention_hidden < 1) throw ConfigError("AB-MIL attention width must be positive");
    const std::size_t m = b.layout.total_width();
    weights_.attention = init_affine(m, config_.attention_hidden, rng);
    weights_.attention_vector = init_affine(config_.attention_hidden, 1, rng).weight;
    weights_.head.hidden = init_affine(m, b.head_hidden, rng);
    weights_.head.out = init_affine(b.head_hidden, b.output_width(), rng);
  }

  const BaselineConfig& config() const noexcept { return config_; }
  AbMilWeights<Parameter>& weights() noexcept { return weights_; }
  const AbMilWeights<Parameter>& weights() const noexcept { return weights_; }

  std::size_t input_width() const { return config_.base.layout.total_width(); }
  std::size_t min_instances() const { return 1; }
  std::size_t num_classes() const { return config_.base.num_classes; }
  std::size_t output_width() const { return config_.base.output_width(); }
  LossKind loss() const { return config_.base.loss; }

  std::vector<double> forward(const Matrix& features, bool training, RngStream& rng, Trace* trace = nullptr) const {
    if (features.cols() != input_width())
      throw ConfigError("layout mismatch: bag has " + std::to_string(features.cols()) +
                        " features per instance, model expects " + std::to_string(input_width()));
    return abmil_forward(features, weights_, config_.base.head_dropout, training, rng, trace);
  }

  std::vector<Matrix> backward(const Trace& trace, std::span<const double> d_scores) const {
    AbMilWeights<Matrix> g{zeros_like(weights_.attention),
                           Matrix(weights_.attention_vector.value.rows(), weights_.attention_vector.value.cols()),
                           zeros_like(weights_.head)};
    abmil_backward(trace, weights_, d_scores, g);
    std::vector<Matrix> out;
    for_each_tensor_in_abmil(g, [&](const std::string&, Matrix& m) { out.push_back(std::move(m)); });
    return out;
  }

  std::vector<NamedParameter> parameters() {
    std::vector<NamedParameter> out;
    for_each_tensor_in_abmil(weights_, [&](const std::string& name, Parameter& p) { out.push_back({name, &p}); });
    return out;
  }

 private:
  BaselineConfig config_;
  AbMilWeights<Parameter> weights_;
};

// ---------------------------------------------------------------------------
// Chowder

template <class T>
struct ChowderWeights {
  MlpBlockT<T> instance;  // m -> mlp_hidden -> c
  HeadT<T> head;          // 2s -> head_hidden -> 1, shared over class rows
};

template <class W, class F>
void for_each_tensor_in_chowder(W& w, F&& f) {
  // Same names as the equivalent one-block GAS-MIL so checkpoints line up.
  for_each_tensor(w.instance.hidden, "gfeb1.mlp.hidden", f);
  for_each_tensor(w.instance.out, "gfeb1.mlp.out", f);
  for_each_tensor(w.head.hidden, "head.hidden", f);
  for_each_tensor(w.head.out, "head.out", f);
}

struct ChowderTrace {
  MlpTrace instance;
  MaxMinSelection selection;
  HeadTrace head;
};

/// One instance MLP, column-wise Max-Min, and the head over the c x 2s
/// transposed selection.
template <class T>
std::vector<double> chowder_forward(const Matrix& h, const ChowderWeights<T>& w, std::size_t s, double dropout,
                                    bool training, RngStream& rng, ChowderTrace* trace = nullptr) {
  if (h.rows() < 2 * s)
    throw ConfigError("chowder_forward: bag has " + std::to_string(h.rows()) + " instances; needs at least 2s = " +
                      std::to_string(2 * s));
  MlpTrace mt;
  Matrix b = gfeb_mlp(h, w.instance, trace ? &mt : nullptr);
  MaxMinSelection sel = max_min_select(b, s);
  HeadTrace ht;
  auto scores = head_forward(transpose(sel.values), w.head, dropout, training, rng, trace ? &ht : nullptr);
  if (trace) *trace = {std::move(mt), std::move(sel), std::move(ht)};
  return scores;
}

template <class T>
void chowder_backward(const ChowderTrace& t, const ChowderWeights<T>& w, std::span<const double> d_scores,
                      ChowderWeights<Matrix>& g) {
  Matrix d_d = head_backward(t.head, w.head, d_scores, g.head);
  Matrix d_b = max_min_backward(t.selection, t.instance.input.rows(), transpose(d_d));
  gfeb_mlp_backward(t.instance, w.instance, d_b, g.instance, false);
}

class ChowderModel {
 public:
  using Trace = ChowderTrace;

  ChowderModel(BaselineConfig config, RngStream& rng) : config_(std::move(config)) {
    config_.kind = ArchKind::kChowder;
    const GasMilConfig& b = config_.base;
    b.validate();
    weights_.instance = init_mlp_block(b.layout.total_width(), b.mlp_hidden, b.output_width(), rng);
    weights_.head = init_head(2 * b.selection_count, b.head_hidden, rng);
  }

  const BaselineConfig& config() const noexcept { return config_; }
  ChowderWeights<Parameter>& weights() noexcept { return weights_; }
  const ChowderWeights<Parameter>& weights() const noexcept { return weights_; }

  std::size_t input_width() const { return config_.base.layout.total_width(); }
  std::size_t min_instances() const { return 2 * config_.base.selection_count; }
  std::size_t num_classes() const { return config_.base.num_classes; }
  std::size_t output_width() const { return config_.base.output_width(); }
  LossKind loss() const { return config_.base.loss; }

  std::vector<double> forward(const Matrix& features, bool training, RngStream& rng, Trace* trace = nullptr) const {
    if (features.cols() != input_width())
      throw ConfigError("layout mismatch: bag has " + std::to_string(features.cols()) +
                        " features per instance, model expects " + std::to_string(input_width()));
    return chowder_forward(features, weights_, config_.base.selection_count, config_.base.head_dropout, training, rng,
                           trace);
  }

  std::vector<Matrix> backward(const Trace& trace, std::span<const double> d_scores) const {
    ChowderWeights<Matrix> g{{zeros_like(weights_.instance.hidden), zeros_like(weights_.instance.out)},
                             zeros_like(weights_.head)};
    chowder_backward(trace, weights_, d_scores, g);
    std::vector<Matrix> out;
    for_each_tensor_in_chowder(g, [&](const std::string&, Matrix& m) { out.push_back(std::move(m)); });
    return out;
  }

  std::vector<NamedParameter> parameters() {
    std::vector<NamedParameter> out;
    for_each_tensor_in_chowder(weights_, [&](const std::string& name, Parameter& p) { out.push_back({name, &p}); });
    return out;
  }

 private:
  BaselineConfig config_;
  ChowderWeights<Parameter> weights_;
};

/// The GAS-MIL configuration that Chowder is equivalent to: the whole width
/// as one group, no concatenation block.
inline GasMilConfig chowder_equivalent_config(const GasMilConfig& base) {
  GasMilConfig c = base;
  c.layout = GroupLayout{{"all"}, {base.layout.total_width()}};
  c.concat_group = false;
  c.gfeb_kind = GfebKind::kMlp;
  return c;
}

}  // namespace gasmil
