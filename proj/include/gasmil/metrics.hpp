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

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gasmil/errors.hpp"
#include "json.hpp"

namespace gasmil {

namespace detail {

inline void check_labels(std::span<const int> y_true, std::span<const int> y_pred, std::size_t c, const char* who) {
  if (y_true.empty()) throw ParameterError(std::string(who) + ": empty input");
  if (y_true.size() != y_pred.size())
    throw ParameterError(std::string(who) + ": y_true has " + std::to_string(y_true.size()) + " labels, y_pred has " +
                         std::to_string(y_pred.size()));
  auto bad = [c](int y) { return y < 0 || static_cast<std::size_t>(y) >= c; };
  if (std::any_of(y_true.begin(), y_true.end(), bad) || std::any_of(y_pred.begin(), y_pred.end(), bad))
    throw ParameterError(std::string(who) + ": label outside [0, " + std::to_string(c) + ")");
}

}  // namespace detail

/// confusion[t][p] counts bags of true class t predicted as p.
using ConfusionMatrix = std::vector<std::vector<long>>;

inline ConfusionMatrix confusion_matrix(std::span<const int> y_true, std::span<const int> y_pred, std::size_t c) {
  detail::check_labels(y_true, y_pred, c, "confusion_matrix");
  ConfusionMatrix m(c, std::vector<long>(c, 0));
  for (std::size_t i = 0; i < y_true.size(); ++i) ++m[y_true[i]][y_pred[i]];
  return m;
}

inline double accuracy(std::span<const int> y_true, std::span<const int> y_pred) {
  if (y_true.size() != y_pred.size()) throw ParameterError("accuracy: length mismatch");
  if (y_true.empty()) throw ParameterError("accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) hits += y_true[i] == y_pred[i];
  return static_cast<double>(hits) / static_cast<double>(y_true.size());
}

/// Mean recall over the classes that occur in y_true.
inline double balanced_accuracy(std::span<const int> y_true, std::span<const int> y_pred, std::size_t c) {
  const auto cm = confusion_matrix(y_true, y_pred, c);
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < c; ++k) {
    const long support = std::accumulate(cm[k].begin(), cm[k].end(), 0L);
    if (support == 0) continue;
    sum += static_cast<double>(cm[k][k]) / static_cast<double>(support);
    ++present;
  }
  return sum / static_cast<double>(present);
}

/// Cohen's kappa with quadratic weights (i-j)^2/(c-1)^2 over all c nominal
/// classes. Throws UndefinedMetricError when the expected disagreement is 0.
inline double quadratic_weighted_kappa(std::span<const int> y_true, std::span<const int> y_pred, std::size_t c) {
  if (c < 2) throw ParameterError("quadratic_weighted_kappa: needs at least two classes");
  const auto cm = confusion_matrix(y_true, y_pred, c);
  const double n = static_cast<double>(y_true.size());
  std::vector<double> row(c, 0.0), col(c, 0.0);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      row[i] += static_cast<double>(cm[i][j]);
      col[j] += static_cast<double>(cm[i][j]);
    }
  // The (c-1)^2 weight scale cancels in the ratio; integer squared
  // distances keep both sums exact.
  double observed = 0.0, expected = 0.0;
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(i) - static_cast<double>(j);
      observed += d * d * static_cast<double>(cm[i][j]);
      expected += d * d * row[i] * col[j];
    }
  if (expected == 0.0)
    throw UndefinedMetricError(
        "quadratic_weighted_kappa: expected disagreement is zero (every true and predicted label is the same "
        "class)");
  return 1.0 - n * observed / expected;
}

/// Support-weighted mean of per-class F1; F1 is 0 when precision + recall = 0.
inline double weighted_f1(std::span<const int> y_true, std::span<const int> y_pred, std::size_t c) {
  const auto cm = confusion_matrix(y_true, y_pred, c);
  const double n = static_cast<double>(y_true.size());
  double total = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    double support = 0.0, predicted = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      support += static_cast<double>(cm[k][j]);
      predicted += static_cast<double>(cm[j][k]);
    }
    if (support == 0.0) continue;
    // 2PR/(P+R) = 2TP/(support+predicted); zero when TP is zero.
    const double f1 = 2.0 * static_cast<double>(cm[k][k]) / (support + predicted);
    total += support * f1;
  }
  return total / n;
}

/// ROC AUC as the Mann-Whitney U statistic: P(s+ > s-) + P(s+ = s-)/2,
/// computed exactly from midranks. y_true entries are 0 or 1.
inline double auc_binary(std::span<const double> scores, std::span<const int> y_true) {
  if (scores.size() != y_true.size()) throw ParameterError("auc_binary: length mismatch");
  if (std::any_of(scores.begin(), scores.end(), [](double s) { return std::isnan(s); }))
    throw ParameterError("auc_binary: NaN score");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Doubled midranks keep the tie arithmetic in integers.
  std::vector<long long> rank2(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) rank2[order[k]] = static_cast<long long>(i + j + 1);
    i = j;
  }
  long long positives = 0, rank_sum2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (y_true[i] != 0 && y_true[i] != 1) throw ParameterError("auc_binary: labels must be 0 or 1");
    if (y_true[i] == 1) {
      ++positives;
      rank_sum2 += rank2[i];
    }
  }
  const long long negatives = static_cast<long long>(n) - positives;
  if (positives == 0 || negatives == 0)
    throw UndefinedMetricError("auc_binary: both classes must be present");
  const long long u2 = rank_sum2 - positives * (positives + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
}

struct MetricsReport {
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;
  std::optional<double> qwk;
  double weighted_f1 = 0.0;
  std::optional<double> auc;
  ConfusionMatrix confusion;
  /// Why qwk or auc is missing, if it is.
  std::vector<std::string> notes;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Everything but AUC from a prediction vector. AUC needs scores and is
/// filled in by the caller for binary tasks.
inline MetricsReport compute_report(std::span<const int> y_true, std::span<const int> y_pred, std::size_t c) {
  MetricsReport r;
  r.confusion = confusion_matrix(y_true, y_pred, c);
  r.accuracy = accuracy(y_true, y_pred);
  r.balanced_accuracy = balanced_accuracy(y_true, y_pred, c);
  r.weighted_f1 = weighted_f1(y_true, y_pred, c);
  try {
    r.qwk = quadratic_weighted_kappa(y_true, y_pred, c);
  } catch (const UndefinedMetricError& e) {
    r.notes.emplace_back(e.what());
  }
  return r;
}

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json::object();
  j["accuracy"] = r.accuracy;
  j["balanced_accuracy"] = r.balanced_accuracy;
  j["qwk"] = r.qwk ? nlohmann::json(*r.qwk) : nlohmann::json(nullptr);
  j["weighted_f1"] = r.weighted_f1;
  if (r.auc) j["auc"] = *r.auc;
  j["confusion"] = r.confusion;
  if (!r.notes.empty()) j["notes"] = r.notes;
}

}  // namespace gasmil
