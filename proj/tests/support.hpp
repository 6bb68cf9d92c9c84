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

// Shared helpers for the test suite.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "gasmil/model.hpp"
#include "gasmil/numerics.hpp"
#include "gasmil/training.hpp"

namespace gasmil::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, RngStream& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = scale * rng.normal();
  return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

/// Smallest distance between two entries of the same column of any block
/// output; Max-Min is differentiable wherever this is positive.
inline double min_column_gap(const Matrix& features, const GasMilParams& params, const GasMilConfig& config) {
  double gap = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < config.num_blocks(); ++k) {
    const Matrix b = gfeb_forward(block_input(features, config, k), params.blocks[k], nullptr);
    for (std::size_t j = 0; j < b.cols(); ++j) {
      std::vector<double> col(b.rows());
      for (std::size_t i = 0; i < b.rows(); ++i) col[i] = b(i, j);
      std::sort(col.begin(), col.end());
      for (std::size_t i = 1; i < col.size(); ++i) gap = std::min(gap, col[i] - col[i - 1]);
    }
  }
  return gap;
}

struct GradCheckResult {
  double params = 0.0;
  double input = 0.0;
};

/// Analytic GAS-MIL gradients (parameters and input) against central
/// differences of the bag loss. Dropout is active and the mask is held fixed
/// by reseeding the same stream for every evaluation.
inline GradCheckResult gasmil_grad_check(Matrix& features, GasMilParams& params, const GasMilConfig& config, int label,
                                         std::uint64_t dropout_seed) {
  auto loss_fn = [&] {
    RngStream rng(dropout_seed);
    const auto scores = model_forward(features, params, config, true, rng);
    return bag_loss(config.loss, scores, label, config.num_classes).loss;
  };
  RngStream rng(dropout_seed);
  ForwardTrace trace;
  const auto scores = model_forward(features, params, config, true, rng, &trace);
  const LossResult loss = bag_loss(config.loss, scores, label, config.num_classes);
  GasMilGradients grads = model_gradients(trace, params, config, loss.grad, true);

  std::vector<GradCheckTarget> targets;
  std::vector<Matrix*> values;
  for_each_tensor_in(params, [&](const std::string&, Parameter& p) { values.push_back(&p.value); });
  std::size_t i = 0;
  for_each_tensor_in(grads.params, [&](const std::string&, Matrix& g) { targets.push_back({values[i++], &g}); });
  GradCheckResult out;
  out.params = finite_diff_check(loss_fn, targets);
  const std::vector<GradCheckTarget> input{{&features, &grads.input}};
  out.input = finite_diff_check(loss_fn, input);
  return out;
}

}  // namespace gasmil::testing
