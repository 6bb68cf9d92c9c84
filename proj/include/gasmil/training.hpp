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
#include <concepts>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "gasmil/bagio.hpp"
#include "gasmil/errors.hpp"
#include "gasmil/metrics.hpp"
#include "gasmil/model.hpp"
#include "gasmil/numerics.hpp"

namespace gasmil {

// ---------------------------------------------------------------------------
// Losses

/// Grade g of c ordered classes as c-1 cumulative targets: the first g ones.
inline std::vector<double> ordinal_encode(int grade, std::size_t c) {
  if (c < 2) throw ParameterError("ordinal_encode: needs at least two grades");
  if (grade < 0 || static_cast<std::size_t>(grade) >= c)
    throw ParameterError("ordinal_encode: grade " + std::to_string(grade) + " outside [0, " + std::to_string(c) + ")");
  std::vector<double> t(c - 1, 0.0);
  std::fill(t.begin(), t.begin() + grade, 1.0);
  return t;
}

/// Number of probabilities above 0.5.
inline int ordinal_decode(std::span<const double> probabilities) {
  return static_cast<int>(std::count_if(probabilities.begin(), probabilities.end(), [](double p) { return p > 0.5; }));
}

struct LossResult {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean binary cross-entropy over components, in logit form:
///   l(z, t) = softplus(z) - t z
inline LossResult bce_multilabel_loss(std::span<const double> scores, std::span<const double> targets) {
  if (scores.size() != targets.size() || scores.empty())
    throw DimensionError("bce_multilabel_loss: " + std::to_string(scores.size()) + " scores vs " +
                         std::to_string(targets.size()) + " targets");
  LossResult r{0.0, std::vector<double>(scores.size())};
  const double inv = 1.0 / static_cast<double>(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double z = scores[i];
    if (!std::isfinite(z) || !std::isfinite(targets[i])) throw NumericError("bce_multilabel_loss: non-finite input");
    r.loss += (softplus(z) - targets[i] * z) * inv;
    r.grad[i] = (sigmoid(z) - targets[i]) * inv;
  }
  return r;
}

/// -log softmax(scores)[target]; gradient softmax - onehot.
inline LossResult ce_loss(std::span<const double> scores, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= scores.size())
    throw ParameterError("ce_loss: target " + std::to_string(target) + " outside [0, " +
                         std::to_string(scores.size()) + ")");
  for (double z : scores)
    if (!std::isfinite(z)) throw NumericError("ce_loss: non-finite score");
  const double mx = *std::max_element(scores.begin(), scores.end());
  double sum = 0.0;
  for (double z : scores) sum += std::exp(z - mx);
  const double log_norm = mx + std::log(sum);
  LossResult r{log_norm - scores[static_cast<std::size_t>(target)], std::vector<double>(scores.size())};
  for (std::size_t i = 0; i < scores.size(); ++i) r.grad[i] = std::exp(scores[i] - log_norm);
  r.grad[static_cast<std::size_t>(target)] -= 1.0;
  return r;
}

inline LossResult bag_loss(LossKind kind, std::span<const double> scores, int label, std::size_t num_classes) {
  if (kind == LossKind::kCrossEntropy) return ce_loss(scores, label);
  const auto targets = ordinal_encode(label, num_classes);
  return bce_multilabel_loss(scores, targets);
}

// ---------------------------------------------------------------------------
// Class-balanced sampling and augmentation

/// 1 / count(label) per bag, so every class carries equal total weight.
inline std::vector<double> class_weights(std::span<const int> labels) {
  if (labels.empty()) throw ParameterError("class_weights: no labels");
  std::map<int, std::size_t> counts;
  for (int y : labels) ++counts[y];
  std::vector<double> w(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) w[i] = 1.0 / static_cast<double>(counts[labels[i]]);
  return w;
}

/// Draws indices with replacement proportionally to fixed weights.
class WeightedSampler {
 public:
  explicit WeightedSampler(std::span<const double> weights) : cumulative_(weights.size()) {
    if (weights.empty()) throw ParameterError("WeightedSampler: no weights");
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (!(weights[i] >= 0.0) || !std::isfinite(weights[i])) throw ParameterError("WeightedSampler: bad weight");
      cumulative_[i] = (acc += weights[i]);
    }
    if (acc <= 0.0) throw ParameterError("WeightedSampler: weights sum to zero");
  }

  std::size_t draw(RngStream& rng) const {
    const double u = rng.uniform() * cumulative_.back();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::min(static_cast<std::size_t>(it - cumulative_.begin()), cumulative_.size() - 1);
  }

 private:
  std::vector<double> cumulative_;
};

/// Adds independent N(0, noise_std^2) to every entry, padding rows included.
inline Matrix augment_batch(const Matrix& features, double noise_std, RngStream& rng) {
  if (!(noise_std >= 0.0)) throw ParameterError("augment_batch: noise_std must be non-negative");
  Matrix out = features;
  if (noise_std == 0.0) return out;
  for (double& v : out.data()) v += noise_std * rng.normal();
  return out;
}

// ---------------------------------------------------------------------------
// Model interface consumed by the trainer

template <class M>
concept MilModel = requires(M& m, const M& cm, const Matrix& x, RngStream& rng, typename M::Trace& t,
                            std::span<const double> d) {
  { cm.forward(x, true, rng, &t) } -> std::same_as<std::vector<double>>;
  { cm.backward(t, d) } -> std::same_as<std::vector<Matrix>>;
  { m.parameters() } -> std::same_as<std::vector<NamedParameter>>;
  { cm.output_width() } -> std::convertible_to<std::size_t>;
  { cm.num_classes() } -> std::convertible_to<std::size_t>;
  { cm.min_instances() } -> std::convertible_to<std::size_t>;
  { cm.loss() } -> std::same_as<LossKind>;
};

enum class MonitorMetric { kBalancedAccuracy, kQwk, kWeightedF1, kLoss };

inline std::string to_string(MonitorMetric m) {
  switch (m) {
    case MonitorMetric::kQwk: return "qwk";
    case MonitorMetric::kWeightedF1: return "weighted_f1";
    case MonitorMetric::kLoss: return "loss";
    default: return "balanced_accuracy";
  }
}

inline MonitorMetric parse_monitor_metric(const std::string& s) {
  if (s == "balanced_accuracy") return MonitorMetric::kBalancedAccuracy;
  if (s == "qwk") return MonitorMetric::kQwk;
  if (s == "weighted_f1") return MonitorMetric::kWeightedF1;
  if (s == "loss") return MonitorMetric::kLoss;
  throw ParameterError("unknown monitor metric '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double noise_std = 1.5;
  std::size_t patience = 10;
  LossKind loss = LossKind::kCrossEntropy;
  std::uint64_t seed = 0;
  MonitorMetric monitor = MonitorMetric::kBalancedAccuracy;
  /// Redraw each training bag's instance subset every time it is sampled.
  /// Only meaningful together with `instances`.
  bool resample_per_epoch = false;
  /// When non-zero, training bags are fixed to this many instances per draw
  /// (resample_per_epoch) instead of being used as provided.
  std::size_t instances = 0;
  /// Worker threads for per-bag gradients; 0 reads GASMIL_THREADS and falls
  /// back to the hardware concurrency.
  std::size_t threads = 0;

  void validate() const {
    if (epochs < 1 || batch_size < 1 || patience < 1) throw ParameterError("TrainConfig: counts must be at least 1");
    if (!(noise_std >= 0.0)) throw ParameterError("TrainConfig: noise_std must be non-negative");
    if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw ParameterError("TrainConfig: lr and weight decay must be >= 0");
    if (resample_per_epoch && instances == 0)
      throw ParameterError("TrainConfig: resample_per_epoch needs a target instance count");
  }
};

inline std::size_t resolve_threads(std::size_t requested) {
  std::size_t n = requested;
  if (n == 0) {
    if (const char* env = std::getenv("GASMIL_THREADS")) n = static_cast<std::size_t>(std::strtoul(env, nullptr, 10));
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  MetricsReport val;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::string stop_reason;
};

inline bool operator==(const EpochRecord& a, const EpochRecord& b) {
  return a.epoch == b.epoch && a.train_loss == b.train_loss && a.val_loss == b.val_loss && a.val == b.val;
}
inline bool operator==(const TrainLog& a, const TrainLog& b) {
  return a.epochs == b.epochs && a.best_epoch == b.best_epoch && a.stop_reason == b.stop_reason;
}

inline void write_train_log_csv(std::ostream& out, const TrainLog& log) {
  out << "epoch,train_loss,val_accuracy,val_balanced_accuracy,val_qwk,val_weighted_f1\n";
  out.precision(17);
  for (const auto& r : log.epochs) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val.accuracy << ',' << r.val.balanced_accuracy << ',';
    if (r.val.qwk) out << *r.val.qwk;
    else out << "nan";
    out << ',' << r.val.weighted_f1 << '\n';
  }
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  MetricsReport report;
  double mean_loss = 0.0;
  std::vector<int> predictions;
  std::vector<double> positive_scores;  // binary tasks only
};

/// Probability-like score of class 1 for binary tasks, used for AUC.
inline double positive_class_score(std::span<const double> scores, LossKind loss) {
  if (loss == LossKind::kBceOrdinal) return sigmoid(scores[0]);
  return sigmoid(scores[1] - scores[0]);
}

/// Inference over a labelled set: no dropout, no noise, no randomness.
template <MilModel M>
Evaluation evaluate_bags(const M& model, std::span<const FeatureBag> bags) {
  if (bags.empty()) throw ParameterError("evaluate_bags: empty split");
  Evaluation ev;
  std::vector<int> truth;
  RngStream unused(0);
  double loss_sum = 0.0;
  for (const auto& bag : bags) {
    const auto scores = model.forward(bag.features, false, unused);
    ev.predictions.push_back(predict_label(scores, model.loss()));
    truth.push_back(bag.label);
    loss_sum += bag_loss(model.loss(), scores, bag.label, model.num_classes()).loss;
    if (model.num_classes() == 2) ev.positive_scores.push_back(positive_class_score(scores, model.loss()));
  }
  ev.mean_loss = loss_sum / static_cast<double>(bags.size());
  ev.report = compute_report(truth, ev.predictions, model.num_classes());
  if (model.num_classes() == 2) {
    try {
      ev.report.auc = auc_binary(ev.positive_scores, truth);
    } catch (const UndefinedMetricError& e) {
      ev.report.notes.emplace_back(e.what());
    }
  }
  return ev;
}

template <MilModel M>
MetricsReport evaluate_split(const M& model, std::span<const FeatureBag> bags) {
  return evaluate_bags(model, bags).report;
}

// ---------------------------------------------------------------------------
// Training loop

namespace detail {

/// Higher is better for every monitor; loss is negated.
inline double monitor_value(MonitorMetric m, const Evaluation& ev) {
  switch (m) {
    case MonitorMetric::kQwk: return ev.report.qwk.value_or(-std::numeric_limits<double>::infinity());
    case MonitorMetric::kWeightedF1: return ev.report.weighted_f1;
    case MonitorMetric::kLoss: return -ev.mean_loss;
    default: return ev.report.balanced_accuracy;
  }
}

struct ItemResult {
  double loss = 0.0;
  std::vector<Matrix> grads;
};

template <MilModel M>
ItemResult train_item(const M& model, const FeatureBag& bag, std::uint64_t seed, const TrainConfig& cfg) {
  RngStream rng(seed);
  Matrix x = cfg.resample_per_epoch ? sample_or_pad(bag, cfg.instances, rng).features : bag.features;
  x = augment_batch(x, cfg.noise_std, rng);
  typename M::Trace trace;
  const auto scores = model.forward(x, true, rng, &trace);
  const LossResult lr = bag_loss(model.loss(), scores, bag.label, model.num_classes());
  return {lr.loss, model.backward(trace, lr.grad)};
}

}  // namespace detail

/// Minibatch AdamW with class-balanced sampling, input noise and early
/// stopping on the validation monitor. The model ends up holding the best
/// validation parameters. Every random draw derives from cfg.seed, and
/// per-bag gradients are summed in draw order, so results do not depend on
/// the thread count.
template <MilModel M>
TrainLog fit(M& model, std::span<const FeatureBag> train, std::span<const FeatureBag> val, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty() || val.empty()) throw ParameterError("fit: train and validation splits must be non-empty");
  if (cfg.loss != model.loss()) throw ConfigError("fit: model and training config disagree on the loss");
  const std::size_t need = model.min_instances();
  auto check_bag = [&](const FeatureBag& b) {
    const std::size_t rows = cfg.resample_per_epoch ? cfg.instances : b.features.rows();
    if (rows < need)
      throw ConfigError("bag '" + b.bag_id + "' has " + std::to_string(rows) + " instances; model needs " +
                        std::to_string(need));
  };
  std::for_each(train.begin(), train.end(), check_bag);

  std::vector<int> labels;
  for (const auto& b : train) labels.push_back(b.label);
  const WeightedSampler sampler(class_weights(labels));
  const std::size_t threads = resolve_threads(cfg.threads);
  const AdamWOptions opt{cfg.lr, cfg.weight_decay};

  RngStream rng(cfg.seed);
  std::vector<NamedParameter> params = model.parameters();
  std::vector<Matrix> best(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) best[i] = params[i].param->value;
  double best_value = -std::numeric_limits<double>::infinity();
  std::size_t stagnant = 0;

  TrainLog log;
  log.stop_reason = "epoch_limit";
  const std::size_t n_train = train.size();
  const std::size_t batches = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t size = std::min(cfg.batch_size, n_train - b * cfg.batch_size);
      std::vector<std::size_t> picks(size);
      std::vector<std::uint64_t> seeds(size);
      for (std::size_t i = 0; i < size; ++i) {
        picks[i] = sampler.draw(rng);
        seeds[i] = rng.next_u64();
      }
      // Items are computed in waves of `threads` and folded into the batch
      // sums in draw order, so memory stays bounded by the wave and the
      // floating-point result does not depend on the thread count.
      const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1);
      const std::size_t wave = std::max<std::size_t>(1, threads);
      std::vector<Matrix> sums(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        sums[p] = params[p].param->value;
        sums[p].fill(0.0);
      }
      double batch_loss = 0.0;
      for (std::size_t w0 = 0; w0 < size; w0 += wave) {
        const std::size_t count = std::min(wave, size - w0);
        std::vector<detail::ItemResult> results(count);
        std::vector<std::exception_ptr> failures(count);
        auto work = [&](std::size_t first, std::size_t stride) {
          for (std::size_t i = first; i < count; i += stride) {
            try {
              results[i] = detail::train_item(model, train[picks[w0 + i]], seeds[w0 + i], cfg);
            } catch (...) {
              failures[i] = std::current_exception();
            }
          }
        };
        if (count == 1) {
          work(0, 1);
        } else {
          std::vector<std::jthread> pool;
          for (std::size_t t = 1; t < count; ++t) pool.emplace_back(work, t, count);
          work(0, count);
        }
        for (std::size_t i = 0; i < count; ++i) {
          if (!failures[i]) continue;
          try {
            std::rethrow_exception(failures[i]);
          } catch (const NumericError& e) {
            throw NumericError("training diverged at " + where + " (bag '" + train[picks[w0 + i]].bag_id +
                               "'): " + e.what());
          }
        }
        for (const auto& r : results) {
          batch_loss += r.loss;
          for (std::size_t p = 0; p < params.size(); ++p) sums[p] += r.grads[p];
        }
      }
      batch_loss /= static_cast<double>(size);
      if (!std::isfinite(batch_loss)) throw NumericError("training diverged: non-finite loss at " + where);
      epoch_loss += batch_loss * static_cast<double>(size);

      const double inv = 1.0 / static_cast<double>(size);
      for (std::size_t p = 0; p < params.size(); ++p) {
        Matrix& g = params[p].param->grad;
        g = std::move(sums[p]);
        g *= inv;
        try {
          adamw_step(*params[p].param, opt, params[p].name);
        } catch (const NumericError& e) {
          throw NumericError("training diverged at " + where + ": " + e.what());
        }
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(n_train);
    const Evaluation ev = evaluate_bags(model, val);
    rec.val = ev.report;
    rec.val_loss = ev.mean_loss;
    log.epochs.push_back(rec);

    const double value = detail::monitor_value(cfg.monitor, ev);
    if (value > best_value) {
      best_value = value;
      log.best_epoch = epoch;
      stagnant = 0;
      for (std::size_t i = 0; i < params.size(); ++i) best[i] = params[i].param->value;
    } else if (++stagnant >= cfg.patience) {
      log.stop_reason = "early_stop";
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i].param->value = best[i];
  return log;
}

}  // namespace gasmil
