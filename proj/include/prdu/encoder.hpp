#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "prdu/data.hpp"
#include "prdu/rng.hpp"
#include "prdu/tape.hpp"
#include "prdu/tensor.hpp"

namespace prdu {

enum class InputMode { TokenIds, FeatureVectors };

inline std::string to_string(InputMode m) {
  return m == InputMode::TokenIds ? "tokens" : "features";
}

inline InputMode input_mode_from_string(const std::string& s) {
  if (s == "tokens") return InputMode::TokenIds;
  if (s == "features") return InputMode::FeatureVectors;
  throw std::invalid_argument("input_mode: expected 'tokens' or 'features', got '" + s + "'");
}

// Update/reset/candidate gate weights for one GRU direction.
struct GruDirection {
  Tensor w_update, w_reset, w_cand;  // input matrices, d_hidden x d_in
  Tensor u_update, u_reset, u_cand;  // recurrent matrices, d_hidden x d_hidden
  Tensor b_update, b_reset, b_cand;  // bias vectors, d_hidden

  void append_params(const std::string& prefix, std::vector<ParamRef>& out) {
    out.push_back({prefix + ".w_update", &w_update});
    out.push_back({prefix + ".w_reset", &w_reset});
    out.push_back({prefix + ".w_cand", &w_cand});
    out.push_back({prefix + ".u_update", &u_update});
    out.push_back({prefix + ".u_reset", &u_reset});
    out.push_back({prefix + ".u_cand", &u_cand});
    out.push_back({prefix + ".b_update", &b_update});
    out.push_back({prefix + ".b_reset", &b_reset});
    out.push_back({prefix + ".b_cand", &b_cand});
  }
};

struct EncoderDims {
  int vocab = 50;
  int d_emb = 32;
  int d_hidden = 32;
  int d_attn = 16;
};

// Embedding + optional bi-GRU + pooling + single-query attention. The prior
// and posterior branches each own one of these; parameters are immutable
// during an evaluation pass.
struct EncoderParams {
  Tensor embedding;  // vocab x d_emb; unused in feature mode
  GruDirection fwd, bwd;
  Tensor w_query, w_key;  // d_attn x d_model
  Tensor w_value;         // d_model x d_model
  bool use_rnn = true;
  InputMode input_mode = InputMode::TokenIds;
  int feature_width = 0;  // feature mode input width

  int d_input() const {
    return input_mode == InputMode::TokenIds ? embedding.extent(1) : feature_width;
  }
  int d_hidden() const { return use_rnn ? fwd.w_update.extent(0) : 0; }
  int d_model() const { return use_rnn ? 2 * d_hidden() : d_input(); }

  void append_params(const std::string& prefix, std::vector<ParamRef>& out) {
    if (input_mode == InputMode::TokenIds)
      out.push_back({prefix + ".embedding", &embedding});
    if (use_rnn) {
      fwd.append_params(prefix + ".gru_fwd", out);
      bwd.append_params(prefix + ".gru_bwd", out);
    }
    out.push_back({prefix + ".w_query", &w_query});
    out.push_back({prefix + ".w_key", &w_key});
    out.push_back({prefix + ".w_value", &w_value});
  }
};

namespace detail {

inline Tensor uniform_tensor(std::vector<int> shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  double* p = t.data();
  for (int i = 0; i < t.size(); ++i) p[i] = rng.next_uniform(-bound, bound);
  return t;
}

inline Tensor normal_tensor(std::vector<int> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  double* p = t.data();
  for (int i = 0; i < t.size(); ++i) p[i] = stddev * rng.next_normal();
  return t;
}

inline GruDirection init_gru_direction(int d_hidden, int d_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_hidden));
  GruDirection g;
  g.w_update = uniform_tensor({d_hidden, d_in}, bound, rng);
  g.w_reset = uniform_tensor({d_hidden, d_in}, bound, rng);
  g.w_cand = uniform_tensor({d_hidden, d_in}, bound, rng);
  g.u_update = uniform_tensor({d_hidden, d_hidden}, bound, rng);
  g.u_reset = uniform_tensor({d_hidden, d_hidden}, bound, rng);
  g.u_cand = uniform_tensor({d_hidden, d_hidden}, bound, rng);
  g.b_update = Tensor({d_hidden});
  g.b_reset = Tensor({d_hidden});
  g.b_cand = Tensor({d_hidden});
  return g;
}

}  // namespace detail

inline EncoderParams init_encoder(const EncoderDims& dims, InputMode mode, bool use_rnn,
                                  int feature_width, Rng& rng) {
  EncoderParams p;
  p.use_rnn = use_rnn;
  p.input_mode = mode;
  p.feature_width = feature_width;
  if (mode == InputMode::TokenIds)
    p.embedding = detail::normal_tensor({dims.vocab, dims.d_emb}, 0.02, rng);
  const int d_in = mode == InputMode::TokenIds ? dims.d_emb : feature_width;
  if (use_rnn) {
    p.fwd = detail::init_gru_direction(dims.d_hidden, d_in, rng);
    p.bwd = detail::init_gru_direction(dims.d_hidden, d_in, rng);
  }
  const int d_model = use_rnn ? 2 * dims.d_hidden : d_in;
  const double attn_bound = 1.0 / std::sqrt(static_cast<double>(d_model));
  p.w_query = detail::uniform_tensor({dims.d_attn, d_model}, attn_bound, rng);
  p.w_key = detail::uniform_tensor({dims.d_attn, d_model}, attn_bound, rng);
  p.w_value = detail::uniform_tensor({d_model, d_model}, attn_bound, rng);
  return p;
}

// Token lookup (rows of the embedding table) or feature pass-through.
inline Tensor embed(Tape* tape, const FlattenedInput& input, const EncoderParams& params) {
  if (input.length() == 0) throw std::invalid_argument("embed: empty input");
  if (params.input_mode == InputMode::TokenIds) {
    if (input.feature_mode())
      throw std::invalid_argument("embed: feature input given to a token-mode encoder");
    return embed_rows(tape, params.embedding, input.tokens);
  }
  const int width = params.feature_width;
  Tensor out({input.length(), width});
  double* po = out.data();
  for (const auto& row : input.features) {
    if (static_cast<int>(row.size()) != width)
      throw std::invalid_argument("embed: feature width " + std::to_string(row.size()) +
                                  " does not match configured " + std::to_string(width));
    for (double v : row) *po++ = v;
  }
  return out;
}

namespace detail {

inline Tensor gru_step(Tape* tape, const GruDirection& g, const Tensor& x, const Tensor& h_prev,
                       const Tensor& ones) {
  Tensor z = sigmoid(tape, add(tape, add(tape, matmul(tape, g.w_update, x),
                                         matmul(tape, g.u_update, h_prev)),
                               g.b_update));
  Tensor r = sigmoid(tape, add(tape, add(tape, matmul(tape, g.w_reset, x),
                                         matmul(tape, g.u_reset, h_prev)),
                               g.b_reset));
  Tensor cand = tanh_op(tape, add(tape, add(tape, matmul(tape, g.w_cand, x),
                                            matmul(tape, g.u_cand, mul(tape, r, h_prev))),
                                  g.b_cand));
  // h = (1 - z) * h_prev + z * cand
  return add(tape, mul(tape, sub(tape, ones, z), h_prev), mul(tape, z, cand));
}

}  // namespace detail

// Row t of the output is [forward h_t ; backward h_t]; both directions start
// from a zero hidden state, the backward one consumes the sequence reversed.
inline Tensor bigru_forward(Tape* tape, const Tensor& embedded, const EncoderParams& params) {
  if (embedded.rank() != 2 || embedded.extent(0) < 1)
    throw std::invalid_argument("bigru_forward: expects a T x d_in matrix, T >= 1");
  if (embedded.extent(1) != params.fwd.w_update.extent(1))
    throw std::invalid_argument("bigru_forward: input width " +
                                std::to_string(embedded.extent(1)) +
                                " does not match GRU weights");
  const int steps = embedded.extent(0);
  const int d_hidden = params.fwd.w_update.extent(0);
  const Tensor ones({d_hidden}, std::vector<double>(static_cast<std::size_t>(d_hidden), 1.0));

  std::vector<Tensor> fwd_states(static_cast<std::size_t>(steps));
  Tensor h = Tensor({d_hidden});
  for (int t = 0; t < steps; ++t) {
    h = detail::gru_step(tape, params.fwd, select_row(tape, embedded, t), h, ones);
    fwd_states[static_cast<std::size_t>(t)] = h;
  }
  std::vector<Tensor> bwd_states(static_cast<std::size_t>(steps));
  h = Tensor({d_hidden});
  for (int t = steps - 1; t >= 0; --t) {
    h = detail::gru_step(tape, params.bwd, select_row(tape, embedded, t), h, ones);
    bwd_states[static_cast<std::size_t>(t)] = h;
  }
  std::vector<Tensor> rows(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    const Tensor parts[] = {fwd_states[static_cast<std::size_t>(t)],
                            bwd_states[static_cast<std::size_t>(t)]};
    rows[static_cast<std::size_t>(t)] = concat(tape, parts);
  }
  return stack_rows(tape, rows);
}

// Arithmetic mean over the time axis.
inline Tensor pool(Tape* tape, const Tensor& contextual) {
  if (contextual.rank() != 2 || contextual.extent(0) < 1)
    throw std::invalid_argument("pool: expects a T x d matrix, T >= 1");
  return mean_over_axis(tape, contextual, 0);
}

// Scaled dot-product attention with a single query vector; the output is a
// convex combination of value-projected rows.
inline Tensor attend(Tape* tape, const Tensor& query_vec, const Tensor& contextual,
                     const EncoderParams& params) {
  if (contextual.rank() != 2 || contextual.extent(0) < 1)
    throw std::invalid_argument("attend: expects a T x d matrix, T >= 1");
  const int d_attn = params.w_query.extent(0);
  Tensor q = matmul(tape, params.w_query, query_vec);                       // [d_attn]
  Tensor keys = matmul(tape, contextual, transpose(tape, params.w_key));    // [T x d_attn]
  Tensor values = matmul(tape, contextual, transpose(tape, params.w_value));// [T x d_model]
  Tensor scores = scale(tape, matmul(tape, keys, q),
                        1.0 / std::sqrt(static_cast<double>(d_attn)));      // [T]
  Tensor weights = exp_op(tape, log_softmax(tape, scores));                 // [T], sums to 1
  return matmul(tape, weights, values);                                     // [d_model]
}

struct DropoutSpec {
  double rate = 0.0;
  bool train = false;
  Rng* rng = nullptr;
};

namespace detail {

// Inverted dropout: scale kept units by 1/(1-rate) at train time so the
// evaluation path needs no rescaling.
inline Tensor dropout_mask(const std::vector<int>& shape, const DropoutSpec& spec) {
  Tensor mask(shape);
  double* p = mask.data();
  const double keep = 1.0 - spec.rate;
  for (int i = 0; i < mask.size(); ++i)
    p[i] = spec.rng->next_unit() < spec.rate ? 0.0 : 1.0 / keep;
  return mask;
}

}  // namespace detail

// Full pipeline: r = attend(pool(C), C) with C the (dropout-masked)
// contextual embeddings. valid_length < 0 uses every position; otherwise
// positions past it are padding and are dropped before any processing.
inline Tensor encode(Tape* tape, const FlattenedInput& input, const EncoderParams& params,
                     const DropoutSpec& dropout = {}, int valid_length = -1) {
  const FlattenedInput* effective = &input;
  FlattenedInput truncated;
  if (valid_length >= 0 && valid_length < input.length()) {
    truncated = prefix(input, valid_length);
    effective = &truncated;
  }
  if (effective->length() == 0) throw std::invalid_argument("encode: empty input");

  Tensor contextual = embed(tape, *effective, params);
  if (params.use_rnn) contextual = bigru_forward(tape, contextual, params);
  if (dropout.train && dropout.rate > 0.0) {
    if (dropout.rng == nullptr) throw std::invalid_argument("encode: dropout needs an rng");
    if (dropout.rate >= 1.0) throw std::invalid_argument("encode: dropout rate must be < 1");
    contextual = mul(tape, contextual, detail::dropout_mask(contextual.shape(), dropout));
  }
  return attend(tape, pool(tape, contextual), contextual, params);
}

}  // namespace prdu
