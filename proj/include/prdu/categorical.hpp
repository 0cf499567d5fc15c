#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "prdu/tape.hpp"
#include "prdu/tensor.hpp"

namespace prdu {

// Normalized distribution over L labels with paired log-probabilities.
// Log-probs always come from the log-sum-exp path, never from ln of a
// computed probability; near-one-hot distributions keep finite log-probs.
struct Categorical {
  Tensor probs;      // [L]
  Tensor log_probs;  // [L]

  int size() const { return probs.extent(0); }

  int argmax() const {
    const double* p = probs.data();
    int best = 0;
    for (int i = 1; i < size(); ++i)
      if (p[i] > p[best]) best = i;  // ties keep the lowest index
    return best;
  }

  // Value-level construction from plain probabilities (oracle outputs,
  // loaded distributions). Probabilities below the floor get a large
  // negative log instead of -inf.
  static Categorical from_probs(const std::vector<double>& p) {
    const int n = static_cast<int>(p.size());
    if (n < 2) throw std::invalid_argument("categorical: needs at least 2 classes");
    std::vector<double> logs(p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
      logs[i] = p[i] >= 1e-300 ? std::log(p[i]) : -709.0 + std::log(1e-300);
    Categorical out;
    out.probs = Tensor({n}, std::vector<double>(p));
    out.log_probs = Tensor({n}, std::move(logs));
    return out;
  }
};

// probs_i = exp(logits_i - max) / sum_j exp(logits_j - max). Differentiable
// through both members when recorded.
inline Categorical softmax(Tape* tape, const Tensor& logits) {
  if (logits.rank() != 1 || logits.extent(0) < 2)
    throw std::invalid_argument("softmax: expects a vector of at least 2 logits");
  Categorical out;
  out.log_probs = log_softmax(tape, logits);
  out.probs = exp_op(tape, out.log_probs);
  return out;
}

// -log_probs[label].
inline Tensor cross_entropy(Tape* tape, const Categorical& dist, int label) {
  if (label < 0 || label >= dist.size())
    throw std::invalid_argument("cross_entropy: label out of range");
  return scale(tape, select_index(tape, dist.log_probs, label), -1.0);
}

// KL(q || p) = sum_i q_i (log q_i - log p_i), with 0 * log 0 = 0. Underflowed
// probabilities are exact zeros while their log-probs stay finite, so the
// convention holds without special cases.
inline Tensor kl_categorical(Tape* tape, const Categorical& q, const Categorical& p) {
  if (q.size() != p.size())
    throw std::invalid_argument("kl_categorical: dimension mismatch");
  return sum_all(tape, mul(tape, q.probs, sub(tape, q.log_probs, p.log_probs)));
}

}  // namespace prdu
