#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "prdu/categorical.hpp"
#include "prdu/data.hpp"
#include "prdu/encoder.hpp"
#include "prdu/rng.hpp"

namespace prdu {

// Training/inference regimes. "history" = past + current query only,
// "whole" = the entire session including future turns.
enum class Mode { TrainHistPredictHist, TrainWholePredictWhole, TrainWholePredictHist,
                  TrainWholePredictHistSampled };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::TrainHistPredictHist: return "TH-PH";
    case Mode::TrainWholePredictWhole: return "TW-PW";
    case Mode::TrainWholePredictHist: return "TW-PH";
    case Mode::TrainWholePredictHistSampled: return "TW-PH-S";
  }
  throw std::invalid_argument("mode: invalid value");
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "TH-PH") return Mode::TrainHistPredictHist;
  if (s == "TW-PW") return Mode::TrainWholePredictWhole;
  if (s == "TW-PH") return Mode::TrainWholePredictHist;
  if (s == "TW-PH-S") return Mode::TrainWholePredictHistSampled;
  throw std::invalid_argument("mode: expected one of TH-PH, TW-PW, TW-PH, TW-PH-S; got '" + s +
                              "'");
}

// One hidden tanh layer, then logits.
struct MlpHead {
  Tensor w_hidden, b_hidden;  // d_mlp x d_model, d_mlp
  Tensor w_out, b_out;        // n_labels x d_mlp, n_labels

  void append_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".w_hidden", &w_hidden});
    out.push_back({prefix + ".b_hidden", &b_hidden});
    out.push_back({prefix + ".w_out", &w_out});
    out.push_back({prefix + ".b_out", &b_out});
  }
};

inline Tensor mlp_forward(Tape* tape, const MlpHead& head, const Tensor& r) {
  Tensor hidden = tanh_op(tape, add(tape, matmul(tape, head.w_hidden, r), head.b_hidden));
  return add(tape, matmul(tape, head.w_out, hidden), head.b_out);
}

struct ModelDims {
  int vocab = 50;
  int d_emb = 32;
  int d_hidden = 32;
  int d_attn = 16;
  int d_mlp = 64;
  int n_labels = 4;
};

// Per-thread forward counters, for tests that pin down which branches a
// mode touches.
struct BranchCounters {
  std::uint64_t prior = 0;
  std::uint64_t posterior = 0;
  void reset() { prior = posterior = 0; }
};
inline thread_local BranchCounters branch_counters;

// Twin-branch classifier. The prior branch sees u_{k-ws..k}; the posterior
// branch additionally sees future turns and exists only at training time.
// Parameter sets are disjoint unless share_encoders is set.
struct PriorRegModel {
  ModelDims dims;
  EncoderParams prior_encoder;
  EncoderParams posterior_encoder;
  MlpHead prior_head;
  MlpHead posterior_head;
  bool share_encoders = false;
  bool detach_q_in_kl = false;

  const EncoderParams& posterior_encoder_params() const {
    return share_encoders ? prior_encoder : posterior_encoder;
  }

  // Declaration order; checkpoint layout and optimizer state follow it.
  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    prior_encoder.append_params("prior_encoder", out);
    prior_head.append_params("prior_head", out);
    if (!share_encoders) posterior_encoder.append_params("posterior_encoder", out);
    posterior_head.append_params("posterior_head", out);
    return out;
  }

  // The theta subset: everything feeding the inference-time branch.
  std::vector<ParamRef> prior_parameters() {
    std::vector<ParamRef> out;
    prior_encoder.append_params("prior_encoder", out);
    prior_head.append_params("prior_head", out);
    return out;
  }

  PriorRegModel clone() const {
    PriorRegModel out = *this;
    for (ParamRef ref : out.parameters()) *ref.tensor = ref.tensor->clone();
    return out;
  }
};

namespace detail {

inline MlpHead init_head(int d_model, int d_mlp, int n_labels, Rng& rng) {
  MlpHead h;
  h.w_hidden = uniform_tensor({d_mlp, d_model}, 1.0 / std::sqrt(static_cast<double>(d_model)), rng);
  h.b_hidden = Tensor({d_mlp});
  h.w_out = uniform_tensor({n_labels, d_mlp}, 1.0 / std::sqrt(static_cast<double>(d_mlp)), rng);
  h.b_out = Tensor({n_labels});
  return h;
}

}  // namespace detail

inline PriorRegModel init_model(const ModelDims& dims, InputMode input_mode, bool use_rnn,
                                int feature_width, Rng& rng, bool share_encoders = false) {
  if (dims.n_labels < 2) throw std::invalid_argument("init_model: need at least 2 labels");
  PriorRegModel m;
  m.dims = dims;
  m.share_encoders = share_encoders;
  const EncoderDims enc{dims.vocab, dims.d_emb, dims.d_hidden, dims.d_attn};
  m.prior_encoder = init_encoder(enc, input_mode, use_rnn, feature_width, rng);
  m.posterior_encoder = init_encoder(enc, input_mode, use_rnn, feature_width, rng);
  const int d_model = m.prior_encoder.d_model();
  m.prior_head = detail::init_head(d_model, dims.d_mlp, dims.n_labels, rng);
  m.posterior_head = detail::init_head(d_model, dims.d_mlp, dims.n_labels, rng);
  return m;
}

inline Tensor prior_logits(Tape* tape, const PriorRegModel& model, const DialogueSession& session,
                           int k, int ws, const DropoutSpec& dropout = {}) {
  ++branch_counters.prior;
  if (k < 1 || k > session.turns())
    throw std::invalid_argument("prior branch: query index out of range");
  const FlattenedInput input = flatten(session, prior_window_start(k, ws), k);
  const Tensor r = encode(tape, input, model.prior_encoder, dropout);
  return mlp_forward(tape, model.prior_head, r);
}

inline Tensor posterior_logits(Tape* tape, const PriorRegModel& model,
                               const DialogueSession& session, int k, int ws, int fw,
                               const DropoutSpec& dropout = {}) {
  ++branch_counters.posterior;
  if (k < 1 || k > session.turns())
    throw std::invalid_argument("posterior branch: query index out of range");
  const FlattenedInput input =
      flatten(session, prior_window_start(k, ws), posterior_window_end(k, fw, session.turns()));
  const Tensor r = encode(tape, input, model.posterior_encoder_params(), dropout);
  return mlp_forward(tape, model.posterior_head, r);
}

// p(z | u_{1:k}): depends only on the window ending at the query turn.
inline Categorical prior_forward(Tape* tape, const PriorRegModel& model,
                                 const DialogueSession& session, int k, int ws,
                                 const DropoutSpec& dropout = {}) {
  return softmax(tape, prior_logits(tape, model, session, k, ws, dropout));
}

// q(z | u_{1:N}): same window start, extended fw turns past the query.
inline Categorical posterior_forward(Tape* tape, const PriorRegModel& model,
                                     const DialogueSession& session, int k, int ws, int fw,
                                     const DropoutSpec& dropout = {}) {
  return softmax(tape, posterior_logits(tape, model, session, k, ws, fw, dropout));
}

// Gumbel-softmax relaxation: softmax((logits + g) / tau) with
// g_i = -ln(-ln U_i). Differentiable in the logits; concentrates on a vertex
// as tau -> 0 and flattens to uniform as tau -> inf.
inline Categorical gumbel_sample(Tape* tape, const Tensor& logits, double temperature, Rng& rng) {
  if (temperature <= 0.0) throw std::invalid_argument("gumbel_sample: tau must be > 0");
  if (logits.rank() != 1) throw std::invalid_argument("gumbel_sample: expects a logit vector");
  Tensor noise(logits.shape());
  double* p = noise.data();
  for (int i = 0; i < noise.size(); ++i) p[i] = rng.next_gumbel();
  return softmax(tape, scale(tape, add(tape, logits, noise), 1.0 / temperature));
}

struct TrainNoise {
  DropoutSpec dropout;
  Rng* gumbel = nullptr;
  double tau = 1.0;
};

struct LossBreakdown {
  Tensor total;     // scalar, recorded when a tape is given
  double ce = 0.0;  // classification component value
  double kl = 0.0;  // divergence component value (before the lambda weight)
};

// Annealed objective, minimization form. The KL term pulls the history-only
// prior toward the future-aware posterior; gradients flow into both branches
// unless detach_q_in_kl is set.
inline LossBreakdown training_loss(Tape* tape, const PriorRegModel& model, const Example& ex,
                                   double lambda, Mode mode, const TrainNoise& noise = {}) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw std::invalid_argument("training_loss: lambda must be in [0,1]");
  if (ex.session == nullptr) throw std::invalid_argument("training_loss: example has no session");
  const DialogueSession& session = *ex.session;

  LossBreakdown out;
  switch (mode) {
    case Mode::TrainHistPredictHist: {
      Categorical p = prior_forward(tape, model, session, ex.k, ex.ws, noise.dropout);
      out.total = cross_entropy(tape, p, ex.label);
      out.ce = out.total.value();
      return out;
    }
    case Mode::TrainWholePredictWhole: {
      Categorical q = posterior_forward(tape, model, session, ex.k, ex.ws, ex.fw, noise.dropout);
      out.total = cross_entropy(tape, q, ex.label);
      out.ce = out.total.value();
      return out;
    }
    case Mode::TrainWholePredictHist:
    case Mode::TrainWholePredictHistSampled: {
      Tensor q_logits =
          posterior_logits(tape, model, session, ex.k, ex.ws, ex.fw, noise.dropout);
      Categorical q = softmax(tape, q_logits);
      Categorical p = prior_forward(tape, model, session, ex.k, ex.ws, noise.dropout);

      Tensor ce;
      if (mode == Mode::TrainWholePredictHistSampled) {
        if (noise.gumbel == nullptr)
          throw std::invalid_argument("training_loss: sampled mode needs a gumbel rng");
        Categorical relaxed = gumbel_sample(tape, q_logits, noise.tau, *noise.gumbel);
        ce = cross_entropy(tape, relaxed, ex.label);
      } else {
        ce = cross_entropy(tape, q, ex.label);
      }

      const Categorical q_for_kl =
          model.detach_q_in_kl
              ? Categorical{q.probs.detached(), q.log_probs.detached()}
              : q;
      Tensor kl = kl_categorical(tape, q_for_kl, p);
      out.ce = ce.value();
      out.kl = kl.value();
      // scale-by-lambda keeps theta gradients exactly zero at lambda = 0
      out.total = add(tape, ce, scale(tape, kl, lambda));
      return out;
    }
  }
  throw std::invalid_argument("training_loss: invalid mode");
}

struct Prediction {
  int label = 0;
  Categorical dist;
};

// Inference. History-trained and regularized modes classify with the prior
// branch, so future turns cannot influence the output; the whole-session
// mode is the diagnostic upper reference and uses the posterior branch.
inline Prediction predict(const PriorRegModel& model, const Example& ex, Mode mode) {
  if (ex.session == nullptr) throw std::invalid_argument("predict: example has no session");
  Categorical dist =
      mode == Mode::TrainWholePredictWhole
          ? posterior_forward(nullptr, model, *ex.session, ex.k, ex.ws, ex.fw)
          : prior_forward(nullptr, model, *ex.session, ex.k, ex.ws);
  return Prediction{dist.argmax(), std::move(dist)};
}

}  // namespace prdu
