#pragma once

#include <chrono>
#include <functional>
#include <unordered_map>

#include "dynser/common.hpp"
#include "dynser/metrics.hpp"
#include "dynser/model.hpp"
#include "dynser/tensor.hpp"

namespace dynser {

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

// Mean over the batch of -log softmax(logits)[label], log-sum-exp stabilized.
inline Tensor cross_entropy(const Tensor& logits,
                            const std::vector<int>& labels) {
  if (logits.dim() != 2) {
    throw DimensionError("cross_entropy: logits must be [B,K], got " +
                         shape_str(logits.shape()));
  }
  const std::int64_t batch = logits.dim_size(0);
  const std::int64_t k = logits.dim_size(1);
  if (static_cast<std::int64_t>(labels.size()) != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for a batch of " + std::to_string(batch));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k) {
      throw DataError("cross_entropy: label " + std::to_string(labels[i]) +
                      " at sample " + std::to_string(i) + " is outside 0.." +
                      std::to_string(k - 1));
    }
  }
  double total = 0.0;
  const double* ld = logits.data();
  for (std::int64_t b = 0; b < batch; ++b) {
    const double* row = ld + b * k;
    double m = row[0];
    for (std::int64_t i = 1; i < k; ++i) m = std::max(m, row[i]);
    double z = 0.0;
    for (std::int64_t i = 0; i < k; ++i) z += std::exp(row[i] - m);
    total += m + std::log(z) - row[labels[b]];
  }
  Tensor loss = Tensor::scalar(total / static_cast<double>(batch));
  if (detail::should_record({&logits})) {
    loss.set_requires_grad(true);
    auto li = logits.impl(), oi = loss.impl();
    Tape::active()->record(oi, {li}, [li, oi, labels, batch, k]() {
      const double g = oi->grad[0] / static_cast<double>(batch);
      const double* ld2 = li->data.data();
      double* gl = li->grad.data();
      for (std::int64_t b = 0; b < batch; ++b) {
        const double* row = ld2 + b * k;
        double m = row[0];
        for (std::int64_t i = 1; i < k; ++i) m = std::max(m, row[i]);
        double z = 0.0;
        for (std::int64_t i = 0; i < k; ++i) z += std::exp(row[i] - m);
        for (std::int64_t i = 0; i < k; ++i) {
          const double p = std::exp(row[i] - m) / z;
          gl[b * k + i] += g * (p - (labels[b] == i ? 1.0 : 0.0));
        }
      }
    });
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard bias-corrected first/second-moment update. Parameters with no
// gradient buffer are treated as having zero gradient.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig config = {}) : config_(config) {}

  void step(const std::vector<std::pair<std::string, Tensor>>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (const auto& [name, tensor] : params) {
      Tensor t = tensor;
      Slot& slot = slots_[name];
      if (slot.m.empty()) {
        slot.m.assign(t.size(), 0.0);
        slot.v.assign(t.size(), 0.0);
      } else if (static_cast<std::int64_t>(slot.m.size()) != t.size()) {
        throw DimensionError("adam: parameter " + name +
                             " changed size mid-run");
      }
      const double* g = t.has_grad() ? t.grad().data() : nullptr;
      double* w = t.data();
      for (std::int64_t i = 0; i < t.size(); ++i) {
        const double gi = g ? g[i] : 0.0;
        slot.m[i] = config_.beta1 * slot.m[i] + (1.0 - config_.beta1) * gi;
        slot.v[i] = config_.beta2 * slot.v[i] + (1.0 - config_.beta2) * gi * gi;
        const double mhat = slot.m[i] / bc1;
        const double vhat = slot.v[i] / bc2;
        w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
  }

  std::int64_t timestep() const { return t_; }

  const std::vector<double>* first_moment(const std::string& name) const {
    auto it = slots_.find(name);
    return it == slots_.end() ? nullptr : &it->second.m;
  }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  AdamConfig config_;
  std::unordered_map<std::string, Slot> slots_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Stratified k-fold
// ---------------------------------------------------------------------------

struct FoldPlan {
  std::vector<int> fold_of;  // per sample
  int k = 0;

  std::vector<int> test_indices(int fold) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
      if (fold_of[i] == fold) out.push_back(static_cast<int>(i));
    }
    return out;
  }

  std::vector<int> train_indices(int fold) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
      if (fold_of[i] != fold) out.push_back(static_cast<int>(i));
    }
    return out;
  }

  // histogram[fold][class]
  std::vector<std::vector<std::int64_t>> class_histogram(
      const std::vector<int>& labels, int n_classes) const {
    std::vector<std::vector<std::int64_t>> h(
        k, std::vector<std::int64_t>(n_classes, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      ++h[fold_of[i]][labels[i]];
    }
    return h;
  }
};

// Per class: shuffle that class's samples with the seeded generator, then
// deal them round-robin to folds. Per-class fold counts differ by at most 1.
inline FoldPlan stratified_kfold(const std::vector<int>& labels, int k,
                                 std::uint64_t seed) {
  if (k < 2) throw ParameterError("stratified_kfold: need k >= 2");
  if (labels.empty()) throw DataError("stratified_kfold: empty label list");
  std::unordered_map<int, std::vector<int>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    by_class[labels[i]].push_back(static_cast<int>(i));
  }
  std::vector<int> classes;
  for (const auto& [c, _] : by_class) classes.push_back(c);
  std::sort(classes.begin(), classes.end());

  FoldPlan plan;
  plan.k = k;
  plan.fold_of.assign(labels.size(), -1);
  for (int c : classes) {
    auto& idx = by_class[c];
    if (static_cast<int>(idx.size()) < k) {
      throw DataError("stratified_kfold: class " + std::to_string(c) +
                      " has only " + std::to_string(idx.size()) +
                      " samples for " + std::to_string(k) + " folds");
    }
    Rng rng(derive_seed(seed, "stratify", static_cast<std::uint64_t>(c)));
    rng.shuffle(idx);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      plan.fold_of[idx[i]] = static_cast<int>(i % k);
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::int64_t epochs = 100;
  double lr = 0.001;
  std::int64_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int k_folds = 5;
  bool track_train_ua = true;

  AdamConfig adam() const { return AdamConfig{lr, beta1, beta2, adam_eps}; }
};

// In-memory feature set: one MFCC image (and optionally one padded waveform)
// per clip.
struct Dataset {
  std::vector<Tensor> mfcc;               // each [1, F, T]
  std::vector<std::vector<double>> wave;  // each wave_samples long; may be empty
  std::vector<int> labels;
  std::int64_t mfcc_coeffs = 0;
  std::int64_t mfcc_frames = 0;
  std::int64_t wave_samples = 0;

  std::size_t size() const { return labels.size(); }
  bool has_wave() const { return !wave.empty(); }

  ModelInputSpec input_spec() const {
    return ModelInputSpec{mfcc_coeffs, mfcc_frames, wave_samples};
  }
};

inline BatchInput assemble_batch(const Dataset& ds,
                                 const std::vector<int>& indices,
                                 bool need_wave, bool need_mfcc) {
  const std::int64_t b = static_cast<std::int64_t>(indices.size());
  BatchInput batch;
  if (need_mfcc) {
    Tensor m = Tensor::zeros({b, 1, ds.mfcc_coeffs, ds.mfcc_frames});
    const std::int64_t plane = ds.mfcc_coeffs * ds.mfcc_frames;
    for (std::int64_t i = 0; i < b; ++i) {
      const Tensor& src = ds.mfcc[indices[i]];
      std::copy(src.data(), src.data() + plane, m.data() + i * plane);
    }
    batch.mfcc = m;
  }
  if (need_wave) {
    if (!ds.has_wave()) {
      throw ProtocolError("assemble_batch: dataset has no waveform stream");
    }
    Tensor w = Tensor::zeros({b, 1, ds.wave_samples});
    for (std::int64_t i = 0; i < b; ++i) {
      const auto& src = ds.wave[indices[i]];
      std::copy(src.begin(), src.end(), w.data() + i * ds.wave_samples);
    }
    batch.wave = w;
  }
  return batch;
}

inline std::vector<int> predict(ModelParams& model, const Dataset& ds,
                                const std::vector<int>& indices,
                                std::int64_t batch_size) {
  const bool need_wave = variant_uses_wave(model.variant);
  const bool need_mfcc = variant_uses_mfcc(model.variant);
  std::vector<int> preds;
  preds.reserve(indices.size());
  for (std::size_t at = 0; at < indices.size(); at += batch_size) {
    std::vector<int> chunk(
        indices.begin() + at,
        indices.begin() + std::min(indices.size(), at + batch_size));
    BatchInput batch = assemble_batch(ds, chunk, need_wave, need_mfcc);
    Tensor logits = model_forward(model, batch, Mode::kEval);
    const std::int64_t k = logits.dim_size(1);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const double* row = logits.data() + i * k;
      int best = 0;
      for (int j = 1; j < k; ++j) {
        if (row[j] > row[best]) best = j;
      }
      preds.push_back(best);
    }
  }
  return preds;
}

inline MetricsReport evaluate_model(ModelParams& model, const Dataset& ds,
                                    const std::vector<int>& indices,
                                    std::int64_t batch_size) {
  std::vector<int> preds = predict(model, ds, indices, batch_size);
  std::vector<int> truth;
  truth.reserve(indices.size());
  for (int i : indices) truth.push_back(ds.labels[i]);
  return compute_metrics(
      confusion_matrix(preds, truth, model.hyper.n_classes));
}

struct EpochStats {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double train_ua = -1.0;  // -1 when not tracked
  double test_ua = 0.0;
  double test_wa = 0.0;
  double test_macro_f1 = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  MetricsReport final_test;
};

// Returning false stops training after the current epoch (used by callers
// that measure time-to-target; the loop itself never stops early).
using EpochCallback = std::function<bool(const EpochStats&)>;

inline TrainResult train(ModelParams& model, const Dataset& ds,
                         const TrainConfig& cfg,
                         const std::vector<int>& train_idx,
                         const std::vector<int>& test_idx,
                         const EpochCallback& on_epoch = nullptr) {
  if (train_idx.empty() || test_idx.empty()) {
    throw ProtocolError("train: empty train or test split");
  }
  const bool need_wave = variant_uses_wave(model.variant);
  const bool need_mfcc = variant_uses_mfcc(model.variant);
  auto params = trainable_params(model);
  AdamOptimizer opt(cfg.adam());
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));

  TrainResult result;
  std::vector<int> order = train_idx;
  std::uint64_t step = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::int64_t seen = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
      std::vector<int> chunk(
          order.begin() + at,
          order.begin() + std::min(order.size(), at + cfg.batch_size));
      // batchnorm needs two examples to define a variance
      if (chunk.size() < 2) continue;
      BatchInput batch = assemble_batch(ds, chunk, need_wave, need_mfcc);
      std::vector<int> labels;
      labels.reserve(chunk.size());
      for (int i : chunk) labels.push_back(ds.labels[i]);

      Tape tape;
      Tensor logits = model_forward(model, batch, Mode::kTrain,
                                    derive_seed(cfg.seed, "dropout", step));
      Tensor loss = cross_entropy(logits, labels);
      const double loss_val = loss.item();
      if (!std::isfinite(loss_val)) {
        throw NumericError("train: non-finite loss at epoch " +
                           std::to_string(epoch));
      }
      tape.backward(loss);
      opt.step(params);
      loss_sum += loss_val * static_cast<double>(chunk.size());
      seen += static_cast<std::int64_t>(chunk.size());
      ++step;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    if (cfg.track_train_ua) {
      stats.train_ua =
          evaluate_model(model, ds, train_idx, cfg.batch_size).ua;
    }
    MetricsReport test = evaluate_model(model, ds, test_idx, cfg.batch_size);
    stats.test_ua = test.ua;
    stats.test_wa = test.wa;
    stats.test_macro_f1 = test.macro_f1;
    result.history.push_back(stats);
    if (on_epoch && !on_epoch(stats)) break;
  }
  result.final_test = evaluate_model(model, ds, test_idx, cfg.batch_size);
  return result;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

struct FoldResult {
  int fold = 0;
  MetricsReport metrics;
  std::vector<EpochStats> history;
};

struct CrossValResult {
  FoldPlan plan;
  std::vector<FoldResult> folds;
  double mean_ua = 0.0, mean_wa = 0.0, mean_macro_f1 = 0.0;
  ConfusionMatrix pooled_confusion;
  MetricsReport pooled;
  double wall_seconds = 0.0;
};

// Trains k models, each reinitialized from seed + fold index, evaluates on
// the held-out fold, and reports both the fold means and the pooled-matrix
// metrics.
inline CrossValResult cross_validate(ModelVariant variant,
                                     const ModelHyper& hyper, const Dataset& ds,
                                     const TrainConfig& cfg,
                                     const EpochCallback& on_epoch = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  CrossValResult result;
  result.plan =
      stratified_kfold(ds.labels, cfg.k_folds, derive_seed(cfg.seed, "folds"));
  const int n_classes = hyper.n_classes;
  result.pooled_confusion.assign(n_classes,
                                 std::vector<std::int64_t>(n_classes, 0));
  for (int f = 0; f < cfg.k_folds; ++f) {
    ModelParams model = build_model(variant, hyper, ds.input_spec(),
                                    derive_seed(cfg.seed, "fold_model", f));
    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = derive_seed(cfg.seed, "fold_train", f);
    TrainResult tr = train(model, ds, fold_cfg, result.plan.train_indices(f),
                           result.plan.test_indices(f), on_epoch);
    FoldResult fr;
    fr.fold = f;
    fr.metrics = tr.final_test;
    fr.history = std::move(tr.history);
    for (int i = 0; i < n_classes; ++i) {
      for (int j = 0; j < n_classes; ++j) {
        result.pooled_confusion[i][j] += fr.metrics.confusion[i][j];
      }
    }
    result.mean_ua += fr.metrics.ua;
    result.mean_wa += fr.metrics.wa;
    result.mean_macro_f1 += fr.metrics.macro_f1;
    result.folds.push_back(std::move(fr));
  }
  result.mean_ua /= cfg.k_folds;
  result.mean_wa /= cfg.k_folds;
  result.mean_macro_f1 /= cfg.k_folds;
  result.pooled = compute_metrics(result.pooled_confusion);
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return result;
}

}  // namespace dynser
