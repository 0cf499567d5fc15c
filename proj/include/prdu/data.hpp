#pragma once

#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "prdu/categorical.hpp"
#include "prdu/rng.hpp"

namespace prdu {

struct Utterance {
  std::string speaker;
  std::vector<int> tokens;            // token mode
  std::vector<double> features;       // feature mode (mutually exclusive)
  std::optional<int> label;
};

struct DialogueSession {
  std::string session_id;
  std::vector<Utterance> utterances;

  int turns() const { return static_cast<int>(utterances.size()); }
};

// One classification instance. k is the 1-based query turn; ws counts past
// utterances excluding the query; fw < 0 means "all remaining turns".
struct Example {
  const DialogueSession* session = nullptr;
  int k = 1;
  int ws = 0;
  int fw = -1;
  int label = 0;
};

constexpr int kFullFuture = -1;

// Word-level sequence with the source turn of every position.
struct FlattenedInput {
  std::vector<int> tokens;
  std::vector<std::vector<double>> features;
  std::vector<int> utterance_index;  // 1-based, non-decreasing

  bool feature_mode() const { return tokens.empty() && !features.empty(); }
  int length() const { return static_cast<int>(utterance_index.size()); }
};

// Leading slice of a flattened input; the masked-batch path drops padded
// positions through this before any encoding work happens.
inline FlattenedInput prefix(const FlattenedInput& in, int len) {
  if (len < 0 || len > in.length())
    throw std::invalid_argument("prefix: length out of range");
  FlattenedInput out;
  out.utterance_index.assign(in.utterance_index.begin(), in.utterance_index.begin() + len);
  if (!in.tokens.empty()) out.tokens.assign(in.tokens.begin(), in.tokens.begin() + len);
  if (!in.features.empty())
    out.features.assign(in.features.begin(), in.features.begin() + len);
  return out;
}

inline FlattenedInput flatten(const DialogueSession& session, int from, int to) {
  const int n = session.turns();
  if (from < 1 || from > to || to > n)
    throw std::invalid_argument("flatten: invalid range " + std::to_string(from) + ".." +
                                std::to_string(to) + " for N=" + std::to_string(n));
  FlattenedInput out;
  for (int i = from; i <= to; ++i) {
    const Utterance& u = session.utterances[static_cast<std::size_t>(i - 1)];
    if (!u.tokens.empty()) {
      for (int tok : u.tokens) {
        out.tokens.push_back(tok);
        out.utterance_index.push_back(i);
      }
    } else {
      out.features.push_back(u.features);
      out.utterance_index.push_back(i);
    }
  }
  return out;
}

inline int prior_window_start(int k, int ws) { return std::max(1, k - ws); }

inline int posterior_window_end(int k, int fw, int n) {
  return fw < 0 ? n : std::min(n, k + fw);
}

// One example per labeled utterance; unlabeled turns are skipped.
inline std::vector<Example> make_examples(std::span<const DialogueSession> sessions, int ws,
                                          int fw) {
  if (ws < 0) throw std::invalid_argument("make_examples: ws must be >= 0");
  std::vector<Example> out;
  for (const DialogueSession& s : sessions) {
    for (int i = 1; i <= s.turns(); ++i) {
      const auto& label = s.utterances[static_cast<std::size_t>(i - 1)].label;
      if (label) out.push_back(Example{&s, i, ws, fw, *label});
    }
  }
  return out;
}

namespace detail {

inline void check_utterance(const Utterance& u, int n_labels, const std::string& where) {
  if (u.tokens.empty() && u.features.empty())
    throw std::runtime_error(where + ": empty utterance");
  if (!u.tokens.empty() && !u.features.empty())
    throw std::runtime_error(where + ": utterance has both tokens and features");
  for (int tok : u.tokens)
    if (tok < 0) throw std::runtime_error(where + ": negative token id");
  if (u.label) {
    if (*u.label < 0 || (n_labels > 0 && *u.label >= n_labels))
      throw std::runtime_error(where + ": label " + std::to_string(*u.label) +
                               " out of range [0, " + std::to_string(n_labels) + ")");
  }
}

}  // namespace detail

// One session per line. Unknown fields are rejected so format drift fails
// loudly instead of silently dropping data.
inline std::vector<DialogueSession> parse_corpus(std::istream& is, const std::string& name,
                                                 int n_labels = -1) {
  std::vector<DialogueSession> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = name + ":" + std::to_string(line_no);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(where + ": malformed record: " + e.what());
    }
    if (!rec.is_object()) throw std::runtime_error(where + ": record is not an object");
    for (const auto& [key, _] : rec.items())
      if (key != "session_id" && key != "utterances")
        throw std::runtime_error(where + ": unknown field '" + key + "'");
    if (!rec.contains("session_id") || !rec["session_id"].is_string())
      throw std::runtime_error(where + ": missing string field 'session_id'");
    if (!rec.contains("utterances") || !rec["utterances"].is_array() ||
        rec["utterances"].empty())
      throw std::runtime_error(where + ": missing non-empty array field 'utterances'");

    DialogueSession session;
    session.session_id = rec["session_id"].get<std::string>();
    for (const auto& ju : rec["utterances"]) {
      if (!ju.is_object()) throw std::runtime_error(where + ": utterance is not an object");
      for (const auto& [key, _] : ju.items())
        if (key != "speaker" && key != "tokens" && key != "features" && key != "label")
          throw std::runtime_error(where + ": unknown utterance field '" + key + "'");
      Utterance u;
      if (ju.contains("speaker")) u.speaker = ju["speaker"].get<std::string>();
      if (ju.contains("tokens")) u.tokens = ju["tokens"].get<std::vector<int>>();
      if (ju.contains("features")) u.features = ju["features"].get<std::vector<double>>();
      if (ju.contains("label") && !ju["label"].is_null()) u.label = ju["label"].get<int>();
      detail::check_utterance(u, n_labels, where);
      session.utterances.push_back(std::move(u));
    }
    out.push_back(std::move(session));
  }
  return out;
}

inline std::vector<DialogueSession> load_corpus(const std::string& path, int n_labels = -1) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_corpus: cannot open " + path);
  return parse_corpus(f, path, n_labels);
}

inline nlohmann::ordered_json session_to_json(const DialogueSession& s) {
  nlohmann::ordered_json rec;
  rec["session_id"] = s.session_id;
  rec["utterances"] = nlohmann::ordered_json::array();
  for (const Utterance& u : s.utterances) {
    nlohmann::ordered_json ju;
    ju["speaker"] = u.speaker;
    if (!u.features.empty())
      ju["features"] = u.features;
    else
      ju["tokens"] = u.tokens;
    if (u.label)
      ju["label"] = *u.label;
    else
      ju["label"] = nullptr;
    rec["utterances"].push_back(std::move(ju));
  }
  return rec;
}

inline void save_corpus(const std::string& path, std::span<const DialogueSession> sessions) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_corpus: cannot open " + path);
  for (const DialogueSession& s : sessions) f << session_to_json(s).dump() << "\n";
}

// Topic-cued synthetic dialogues. Every token is drawn from the session
// topic's vocabulary slice with probability alpha (alpha_past up to and
// including the query turn, alpha_future after it) and uniformly from the
// whole vocabulary otherwise. The query turn sits mid-session and carries
// the only label.
struct SynthSpec {
  int topics = 4;
  int vocab = 50;
  int slice = 10;          // tokens per topic slice, slices are disjoint from 0
  int session_len = 7;
  int utt_len_min = 3;
  int utt_len_max = 6;
  double alpha_past = 0.2;
  double alpha_future = 0.8;

  int query_index() const { return (session_len + 1) / 2; }  // ceil(N/2), 1-based

  void validate() const {
    if (topics < 2) throw std::invalid_argument("synth spec: topics must be >= 2");
    if (static_cast<long long>(topics) * slice > vocab)
      throw std::invalid_argument("synth spec: topics * slice must be <= vocab");
    if (session_len < 1) throw std::invalid_argument("synth spec: session_len must be >= 1");
    if (utt_len_min < 1 || utt_len_max < utt_len_min)
      throw std::invalid_argument("synth spec: bad utterance length range");
    if (!(alpha_past >= 0.0 && alpha_past <= alpha_future && alpha_future <= 1.0))
      throw std::invalid_argument("synth spec: need 0 <= alpha_past <= alpha_future <= 1");
  }
};

inline std::vector<DialogueSession> generate_synthetic(const SynthSpec& spec, int n_sessions,
                                                       std::uint64_t seed) {
  spec.validate();
  if (n_sessions < 1) throw std::invalid_argument("generate_synthetic: n_sessions must be >= 1");
  Rng rng(seed);
  const int k = spec.query_index();
  std::vector<DialogueSession> out;
  out.reserve(static_cast<std::size_t>(n_sessions));
  for (int s = 0; s < n_sessions; ++s) {
    const int topic = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.topics)));
    DialogueSession session;
    session.session_id = "synth-" + std::to_string(seed) + "-" + std::to_string(s);
    for (int i = 1; i <= spec.session_len; ++i) {
      Utterance u;
      u.speaker = (i % 2 == 1) ? "A" : "B";
      const double alpha = i <= k ? spec.alpha_past : spec.alpha_future;
      const int len = rng.next_int(spec.utt_len_min, spec.utt_len_max);
      u.tokens.reserve(static_cast<std::size_t>(len));
      for (int t = 0; t < len; ++t) {
        if (rng.next_unit() < alpha)
          u.tokens.push_back(topic * spec.slice +
                             static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.slice))));
        else
          u.tokens.push_back(static_cast<int>(rng.next_below(static_cast<std::uint64_t>(spec.vocab))));
      }
      if (i == k) u.label = topic;
      session.utterances.push_back(std::move(u));
    }
    out.push_back(std::move(session));
  }
  return out;
}

// Exact posterior over topics by enumerating the generator's mixture
// likelihood; no learning involved. Serves as the ground-truth reference the
// trained models are compared against.
inline Categorical bayes_oracle(const SynthSpec& spec, const FlattenedInput& observed) {
  spec.validate();
  if (observed.feature_mode())
    throw std::invalid_argument("bayes_oracle: expects token-mode input");
  const int k = spec.query_index();
  std::vector<double> loglik(static_cast<std::size_t>(spec.topics), 0.0);
  for (int pos = 0; pos < observed.length(); ++pos) {
    const int tok = observed.tokens[static_cast<std::size_t>(pos)];
    const double alpha =
        observed.utterance_index[static_cast<std::size_t>(pos)] <= k ? spec.alpha_past
                                                                     : spec.alpha_future;
    const double background = (1.0 - alpha) / spec.vocab;
    for (int t = 0; t < spec.topics; ++t) {
      const bool in_slice = tok >= t * spec.slice && tok < (t + 1) * spec.slice;
      // Floor keeps log-probs finite when alpha = 1 zeroes the background.
      const double term = in_slice ? alpha / spec.slice + background : background;
      loglik[static_cast<std::size_t>(t)] += std::log(std::max(term, 1e-300));
    }
  }
  return softmax(nullptr, Tensor({spec.topics}, std::move(loglik)));
}

}  // namespace prdu
