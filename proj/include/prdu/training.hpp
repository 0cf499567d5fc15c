#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "prdu/config.hpp"
#include "prdu/gradcheck.hpp"
#include "prdu/model.hpp"

namespace prdu {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment estimates aligned with the parameter list by index.
struct AdamState {
  std::vector<Tensor> m, v;
  long step = 0;
  AdamConfig cfg;

  static AdamState init(std::span<const ParamRef> params, AdamConfig cfg = {}) {
    AdamState s;
    s.cfg = cfg;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const ParamRef& ref : params) {
      s.m.push_back(Tensor::zeros_like(*ref.tensor));
      s.v.push_back(Tensor::zeros_like(*ref.tensor));
    }
    return s;
  }
};

inline void adam_step(std::span<const ParamRef> params, std::span<const Tensor> grads,
                      AdamState& state, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: lr must be > 0");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].tensor->same_shape(grads[i]))
      throw std::invalid_argument("adam_step: shape mismatch for " + params[i].name);
    const double* g = grads[i].data();
    for (int e = 0; e < grads[i].size(); ++e)
      if (!std::isfinite(g[e]))
        throw std::runtime_error("adam_step: non-finite gradient in " + params[i].name);
  }
  state.step += 1;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* theta = params[i].tensor->data();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    const double* g = grads[i].data();
    const int n = grads[i].size();
    for (int e = 0; e < n; ++e) {
      m[e] = b1 * m[e] + (1.0 - b1) * g[e];
      v[e] = b2 * v[e] + (1.0 - b2) * g[e] * g[e];
      theta[e] -= lr * (m[e] / bc1) / (std::sqrt(v[e] / bc2) + state.cfg.eps);
    }
  }
}

// initial * factor^(number of milestones reached).
inline double lr_at(int epoch, double initial, std::span<const int> milestones, double factor) {
  for (std::size_t i = 1; i < milestones.size(); ++i)
    if (milestones[i] <= milestones[i - 1])
      throw std::invalid_argument("lr_at: milestones must be strictly increasing");
  int hits = 0;
  for (int m : milestones)
    if (m <= epoch) ++hits;
  return initial * std::pow(factor, hits);
}

struct AnnealSchedule {
  int warmup = 2;  // epochs at lambda = 0
  int ramp = 3;    // epochs to climb linearly to 1
};

inline double lambda_at(int epoch, const AnnealSchedule& s) {
  if (epoch < 0) throw std::invalid_argument("lambda_at: epoch must be >= 0");
  if (s.warmup < 0 || s.ramp < 1) throw std::invalid_argument("lambda_at: bad schedule");
  if (epoch < s.warmup) return 0.0;
  return std::min(1.0, static_cast<double>(epoch - s.warmup + 1) / s.ramp);
}

struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double weighted_f1 = 0.0;
  std::vector<double> precision, recall, f1;
  double loss_ce = 0.0;
  double loss_kl = 0.0;
  int count = 0;
};

inline Metrics compute_metrics(std::span<const int> truth, std::span<const int> predicted,
                               int n_labels) {
  if (truth.size() != predicted.size())
    throw std::invalid_argument("compute_metrics: size mismatch");
  Metrics m;
  m.count = static_cast<int>(truth.size());
  if (m.count == 0) return m;
  std::vector<int> tp(n_labels, 0), fp(n_labels, 0), fn(n_labels, 0), support(n_labels, 0);
  int correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predicted[i];
    ++support[static_cast<std::size_t>(t)];
    if (t == p) {
      ++correct;
      ++tp[static_cast<std::size_t>(t)];
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(t)];
    }
  }
  m.accuracy = static_cast<double>(correct) / m.count;
  m.precision.resize(n_labels);
  m.recall.resize(n_labels);
  m.f1.resize(n_labels);
  double weighted = 0.0;
  for (int c = 0; c < n_labels; ++c) {
    const double denom_p = tp[c] + fp[c];
    const double denom_r = tp[c] + fn[c];
    m.precision[c] = denom_p > 0 ? tp[c] / denom_p : 0.0;
    m.recall[c] = denom_r > 0 ? tp[c] / denom_r : 0.0;
    const double pr = m.precision[c] + m.recall[c];
    m.f1[c] = pr > 0 ? 2.0 * m.precision[c] * m.recall[c] / pr : 0.0;
    m.macro_f1 += m.f1[c];  // absent classes contribute zero
    weighted += support[c] * m.f1[c];
  }
  m.macro_f1 /= n_labels;
  m.weighted_f1 = weighted / m.count;
  return m;
}

inline Metrics evaluate(const PriorRegModel& model, std::span<const Example> examples,
                        Mode mode) {
  std::vector<int> truth, predicted;
  truth.reserve(examples.size());
  predicted.reserve(examples.size());
  for (const Example& ex : examples) {
    truth.push_back(ex.label);
    predicted.push_back(predict(model, ex, mode).label);
  }
  return compute_metrics(truth, predicted, model.dims.n_labels);
}

// Mean loss components with dropout off. The sampled mode is scored with its
// point-estimate classification term so validation numbers stay
// deterministic.
inline std::pair<double, double> mean_losses(const PriorRegModel& model,
                                             std::span<const Example> examples, double lambda,
                                             Mode mode) {
  if (examples.empty()) return {0.0, 0.0};
  const Mode scored = mode == Mode::TrainWholePredictHistSampled
                          ? Mode::TrainWholePredictHist
                          : mode;
  double ce = 0.0, kl = 0.0;
  for (const Example& ex : examples) {
    const LossBreakdown parts = training_loss(nullptr, model, ex, lambda, scored);
    ce += parts.ce;
    kl += parts.kl;
  }
  return {ce / static_cast<double>(examples.size()), kl / static_cast<double>(examples.size())};
}

struct EpochRecord {
  int epoch = 0;
  std::string split;
  Mode mode = Mode::TrainWholePredictHist;
  int ws = 0;
  int fw = kFullFuture;
  double lambda = 0.0;
  double lr = 0.0;
  double loss_ce = 0.0;
  double loss_kl = 0.0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double weighted_f1 = 0.0;
  std::uint64_t seed = 0;
};

inline nlohmann::ordered_json record_to_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["mode"] = to_string(r.mode);
  j["ws"] = r.ws;
  if (r.fw < 0)
    j["fw"] = "all";
  else
    j["fw"] = r.fw;
  j["lambda"] = r.lambda;
  j["lr"] = r.lr;
  j["loss_ce"] = r.loss_ce;
  j["loss_kl"] = r.loss_kl;
  j["accuracy"] = r.accuracy;
  j["macro_f1"] = r.macro_f1;
  j["weighted_f1"] = r.weighted_f1;
  j["seed"] = r.seed;
  return j;
}

struct TrainResult {
  PriorRegModel final_model;
  PriorRegModel best_model;  // highest validation accuracy, final when no val split
  double best_val_accuracy = -1.0;
  int best_epoch = -1;
  std::vector<EpochRecord> records;
};

namespace detail {

inline void shuffle_indices(std::vector<int>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(idx[i - 1], idx[j]);
  }
}

inline double global_grad_norm(std::span<const Tensor> grads) {
  double sq = 0.0;
  for (const Tensor& g : grads) {
    const double* p = g.data();
    for (int i = 0; i < g.size(); ++i) sq += p[i] * p[i];
  }
  return std::sqrt(sq);
}

}  // namespace detail

// Mini-batch training: shuffle per epoch, mean-reduced batch loss, global
// norm clipping, Adam, per-epoch train/val metrics. Deterministic given the
// config seeds.
inline TrainResult train(const TrainConfig& config, std::span<const DialogueSession> corpus) {
  if (corpus.empty()) throw std::invalid_argument("train: corpus is empty");
  config_validate(config);

  Rng init_rng(config.seed_init);
  Rng shuffle_rng(config.seed_shuffle);
  Rng dropout_rng(config.seed_dropout);
  Rng gumbel_rng(config.seed_gumbel);

  PriorRegModel model = init_model(config.model_dims(), config.input_mode, config.use_rnn,
                                   config.feature_width, init_rng, config.share_encoders);
  model.detach_q_in_kl = config.detach_q;

  // Session-level split keeps every dialogue wholly on one side.
  std::vector<int> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  detail::shuffle_indices(order, shuffle_rng);
  const int val_count =
      static_cast<int>(std::floor(config.val_fraction * static_cast<double>(corpus.size())));
  std::vector<DialogueSession> val_sessions, train_sessions;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const DialogueSession& s = corpus[static_cast<std::size_t>(order[i])];
    if (static_cast<int>(i) < val_count)
      val_sessions.push_back(s);
    else
      train_sessions.push_back(s);
  }
  std::vector<Example> train_examples = make_examples(train_sessions, config.ws, config.fw);
  std::vector<Example> val_examples = make_examples(val_sessions, config.ws, config.fw);
  if (train_examples.empty()) throw std::invalid_argument("train: empty training split");

  auto params = model.parameters();
  AdamState adam = AdamState::init(params);
  const AnnealSchedule anneal{config.anneal_warmup, config.anneal_ramp};

  TrainResult result{model, model.clone(), -1.0, -1, {}};
  Tape tape;
  std::vector<int> idx(train_examples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lambda = lambda_at(epoch, anneal);
    const double lr = lr_at(epoch, config.lr, config.lr_milestones, config.lr_factor);
    detail::shuffle_indices(idx, shuffle_rng);

    double ce_sum = 0.0, kl_sum = 0.0;
    for (std::size_t start = 0; start < idx.size(); start += config.batch_size) {
      const std::size_t stop = std::min(idx.size(), start + config.batch_size);
      tape.clear();
      for (const ParamRef& ref : params) tape.watch(*ref.tensor);

      std::vector<Tensor> losses;
      losses.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        const Example& ex = train_examples[static_cast<std::size_t>(idx[i])];
        TrainNoise noise;
        noise.dropout = DropoutSpec{config.dropout, true, &dropout_rng};
        noise.gumbel = &gumbel_rng;
        noise.tau = config.tau;
        const LossBreakdown parts = training_loss(&tape, model, ex, lambda, config.mode, noise);
        ce_sum += parts.ce;
        kl_sum += parts.kl;
        losses.push_back(parts.total);
      }
      const Tensor batch_loss = mean_over_axis(&tape, concat(&tape, losses), 0);
      if (!std::isfinite(batch_loss.value()))
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch starting at " + std::to_string(start));

      const GradientMap grad_map = tape.backward(batch_loss);
      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (const ParamRef& ref : params) grads.push_back(grad_map.grad(*ref.tensor));

      if (config.grad_clip > 0.0) {
        const double norm = detail::global_grad_norm(grads);
        if (norm > config.grad_clip) {
          const double factor = config.grad_clip / norm;
          for (Tensor& g : grads) {
            double* p = g.data();
            for (int e = 0; e < g.size(); ++e) p[e] *= factor;
          }
        }
      }
      adam_step(params, grads, adam, lr);
    }

    EpochRecord base;
    base.epoch = epoch;
    base.mode = config.mode;
    base.ws = config.ws;
    base.fw = config.fw;
    base.lambda = lambda;
    base.lr = lr;
    base.seed = config.seed;

    EpochRecord train_rec = base;
    train_rec.split = "train";
    train_rec.loss_ce = ce_sum / static_cast<double>(train_examples.size());
    train_rec.loss_kl = kl_sum / static_cast<double>(train_examples.size());
    const Metrics train_metrics = evaluate(model, train_examples, config.mode);
    train_rec.accuracy = train_metrics.accuracy;
    train_rec.macro_f1 = train_metrics.macro_f1;
    train_rec.weighted_f1 = train_metrics.weighted_f1;
    result.records.push_back(train_rec);

    if (!val_examples.empty()) {
      EpochRecord val_rec = base;
      val_rec.split = "val";
      const auto [val_ce, val_kl] = mean_losses(model, val_examples, lambda, config.mode);
      val_rec.loss_ce = val_ce;
      val_rec.loss_kl = val_kl;
      const Metrics val_metrics = evaluate(model, val_examples, config.mode);
      val_rec.accuracy = val_metrics.accuracy;
      val_rec.macro_f1 = val_metrics.macro_f1;
      val_rec.weighted_f1 = val_metrics.weighted_f1;
      result.records.push_back(val_rec);

      if (val_metrics.accuracy > result.best_val_accuracy) {
        result.best_val_accuracy = val_metrics.accuracy;
        result.best_epoch = epoch;
        result.best_model = model.clone();
      }
    }
  }

  result.final_model = std::move(model);
  if (val_examples.empty()) result.best_model = result.final_model.clone();
  return result;
}

}  // namespace prdu
