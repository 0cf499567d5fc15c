#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prdu/model.hpp"
#include "prdu/rng.hpp"

namespace prdu {

// Fully resolved run configuration. Every run log starts with an echo of
// this, and a run can be reproduced from the echo alone.
struct TrainConfig {
  Mode mode = Mode::TrainWholePredictHist;
  int ws = 3;
  int fw = kFullFuture;  // -1 = all remaining turns
  int d_emb = 32;
  int d_hidden = 32;
  int d_attn = 16;
  int d_mlp = 64;
  bool use_rnn = true;
  InputMode input_mode = InputMode::TokenIds;
  int feature_width = 0;
  int n_labels = 4;
  int vocab = 50;
  double dropout = 0.3;
  double lr = 1e-3;
  std::vector<int> lr_milestones = {2, 4, 6, 8};
  double lr_factor = 0.5;
  int anneal_warmup = 2;
  int anneal_ramp = 3;
  int batch_size = 16;
  int epochs = 10;
  double grad_clip = 5.0;
  double val_fraction = 0.1;
  std::uint64_t seed = 1;
  std::uint64_t seed_init = 0, seed_shuffle = 0, seed_dropout = 0, seed_gumbel = 0;
  bool seed_init_set = false, seed_shuffle_set = false, seed_dropout_set = false,
       seed_gumbel_set = false;
  double tau = 1.0;
  bool share_encoders = false;
  bool detach_q = false;
  std::string corpus;
  std::string checkpoint;
  std::string log;

  ModelDims model_dims() const {
    return ModelDims{vocab, d_emb, d_hidden, d_attn, d_mlp, n_labels};
  }

  // Unset per-stream seeds derive from the base seed.
  void finalize_seeds() {
    if (!seed_init_set) seed_init = derive_seed(seed, 0);
    if (!seed_shuffle_set) seed_shuffle = derive_seed(seed, 1);
    if (!seed_dropout_set) seed_dropout = derive_seed(seed, 2);
    if (!seed_gumbel_set) seed_gumbel = derive_seed(seed, 3);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline long long parse_ll(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return out;
  } catch (...) {
    throw std::invalid_argument(key + ": expected an integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long out = std::stoull(v, &pos);
    if (pos != v.size() || v.front() == '-') throw std::invalid_argument("");
    return out;
  } catch (...) {
    throw std::invalid_argument(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

inline double parse_f64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return out;
  } catch (...) {
    throw std::invalid_argument(key + ": expected a real number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument(key + ": expected true/false, got '" + v + "'");
}

inline int parse_bounded_int(const std::string& key, const std::string& v, int lo, int hi) {
  const long long x = parse_ll(key, v);
  if (x < lo || x > hi)
    throw std::invalid_argument(key + ": value " + v + " outside [" + std::to_string(lo) + ", " +
                                std::to_string(hi) + "]");
  return static_cast<int>(x);
}

}  // namespace detail

inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "mode",       "ws",          "fw",           "d_emb",        "d_hidden",
      "d_attn",     "d_mlp",       "use_rnn",      "input_mode",   "feature_width",
      "n_labels",   "vocab",       "dropout",      "lr",           "lr_milestones",
      "lr_factor",  "anneal_warmup", "anneal_ramp", "batch_size",  "epochs",
      "grad_clip",  "val_fraction", "seed",        "seed_init",    "seed_shuffle",
      "seed_dropout", "seed_gumbel", "tau",        "share_encoders", "detach_q",
      "corpus",     "checkpoint",  "log"};
  return keys;
}

inline void config_set(TrainConfig& c, const std::string& key, const std::string& raw) {
  using namespace detail;
  const std::string v = trim(raw);
  const int kMax = 1 << 20;
  if (key == "mode") {
    c.mode = mode_from_string(v);
  } else if (key == "ws") {
    c.ws = parse_bounded_int(key, v, 0, kMax);
  } else if (key == "fw") {
    c.fw = (v == "all") ? kFullFuture : parse_bounded_int(key, v, 0, kMax);
  } else if (key == "d_emb") {
    c.d_emb = parse_bounded_int(key, v, 1, kMax);
  } else if (key == "d_hidden") {
    c.d_hidden = parse_bounded_int(key, v, 1, kMax);
  } else if (key == "d_attn") {
    c.d_attn = parse_bounded_int(key, v, 1, kMax);
  } else if (key == "d_mlp") {
    c.d_mlp = parse_bounded_int(key, v, 1, kMax);
  } else if (key == "use_rnn") {
    c.use_rnn = parse_bool(key, v);
  } else if (key == "input_mode") {
    c.input_mode = input_mode_from_string(v);
  } else if (key == "feature_width") {
    c.feature_width = parse_bounded_int(key, v, 0, kMax);
  } else if (key == "n_labels") {
    c.n_labels = parse_bounded_int(key, v, 2, kMax);
  } else if (key == "vocab") {
    c.vocab = parse_bounded_int(key, v, 1, kMax);
  } else if (key == "dropout") {
    c.dropout = parse_f64(key, v);
    if (!(c.dropout >= 0.0 && c.dropout < 1.0))
      throw std::invalid_argument("dropout: must be in [0, 1), got " + v);
  } else if (key == "lr") {
    c.lr = parse_f64(key, v);
    if (!(c.lr > 0.0)) throw std::invalid_argument("lr: must be > 0, got " + v);
  } else if (key == "lr_milestones") {
    std::vector<int> ms;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, ',')) {
      part = trim(part);
      if (!part.empty()) ms.push_back(parse_bounded_int(key, part, 0, kMax));
    }
    for (std::size_t i = 1; i < ms.size(); ++i)
      if (ms[i] <= ms[i - 1])
        throw std::invalid_argument("lr_milestones: must be strictly increasing");
    c.lr_milestones = std::move(ms);
  } else if (key == "lr_factor") {
    c.lr_factor = parse_f64(key, v);
    if (!(c.lr_factor > 0.0 && c.lr_factor <= 1.0))
      throw std::invalid_argument("lr_factor: must be in (0, 1], got " + v);
  } else if (key == "anneal_warmup") {
    c.anneal_warmup = parse_bounded_int(key, v, 0, kMax);
  } else if (key == "anneal_ramp") {
    c.anneal_ramp = parse_bounded_int(key, v, 1, kMax);
  } else if (key == "batch_size") {
    c.batch_size = parse_bounded_int(key, v, 1, kMax);
  } else if (key == "epochs") {
    c.epochs = parse_bounded_int(key, v, 0, kMax);
  } else if (key == "grad_clip") {
    c.grad_clip = parse_f64(key, v);
    if (c.grad_clip < 0.0) throw std::invalid_argument("grad_clip: must be >= 0, got " + v);
  } else if (key == "val_fraction") {
    c.val_fraction = parse_f64(key, v);
    if (!(c.val_fraction >= 0.0 && c.val_fraction < 1.0))
      throw std::invalid_argument("val_fraction: must be in [0, 1), got " + v);
  } else if (key == "seed") {
    c.seed = parse_u64(key, v);
  } else if (key == "seed_init") {
    c.seed_init = parse_u64(key, v);
    c.seed_init_set = true;
  } else if (key == "seed_shuffle") {
    c.seed_shuffle = parse_u64(key, v);
    c.seed_shuffle_set = true;
  } else if (key == "seed_dropout") {
    c.seed_dropout = parse_u64(key, v);
    c.seed_dropout_set = true;
  } else if (key == "seed_gumbel") {
    c.seed_gumbel = parse_u64(key, v);
    c.seed_gumbel_set = true;
  } else if (key == "tau") {
    c.tau = parse_f64(key, v);
    if (!(c.tau > 0.0)) throw std::invalid_argument("tau: must be > 0, got " + v);
  } else if (key == "share_encoders") {
    c.share_encoders = parse_bool(key, v);
  } else if (key == "detach_q") {
    c.detach_q = parse_bool(key, v);
  } else if (key == "corpus") {
    c.corpus = v;
  } else if (key == "checkpoint") {
    c.checkpoint = v;
  } else if (key == "log") {
    c.log = v;
  } else {
    throw std::invalid_argument("unknown config key: '" + key + "'");
  }
}

inline void config_validate(const TrainConfig& c) {
  if (c.input_mode == InputMode::FeatureVectors && c.feature_width < 1)
    throw std::invalid_argument("feature_width: required (>= 1) when input_mode = features");
}

// Flat `key = value` text; later assignments win, flag overrides win last.
inline TrainConfig parse_config(const std::string& file_path,
                                const std::vector<std::pair<std::string, std::string>>& overrides) {
  TrainConfig c;
  if (!file_path.empty()) {
    std::ifstream f(file_path);
    if (!f) throw std::runtime_error("parse_config: cannot open " + file_path);
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
      ++line_no;
      const std::string t = detail::trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument(file_path + ":" + std::to_string(line_no) +
                                    ": expected 'key = value'");
      config_set(c, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    }
  }
  for (const auto& [key, value] : overrides) config_set(c, key, value);
  c.finalize_seeds();
  config_validate(c);
  return c;
}

inline nlohmann::ordered_json config_echo(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(c.mode);
  j["ws"] = c.ws;
  if (c.fw < 0)
    j["fw"] = "all";
  else
    j["fw"] = c.fw;
  j["d_emb"] = c.d_emb;
  j["d_hidden"] = c.d_hidden;
  j["d_attn"] = c.d_attn;
  j["d_mlp"] = c.d_mlp;
  j["use_rnn"] = c.use_rnn;
  j["input_mode"] = to_string(c.input_mode);
  j["feature_width"] = c.feature_width;
  j["n_labels"] = c.n_labels;
  j["vocab"] = c.vocab;
  j["dropout"] = c.dropout;
  j["lr"] = c.lr;
  j["lr_milestones"] = c.lr_milestones;
  j["lr_factor"] = c.lr_factor;
  j["anneal_warmup"] = c.anneal_warmup;
  j["anneal_ramp"] = c.anneal_ramp;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["grad_clip"] = c.grad_clip;
  j["val_fraction"] = c.val_fraction;
  j["seed"] = c.seed;
  j["seed_init"] = c.seed_init;
  j["seed_shuffle"] = c.seed_shuffle;
  j["seed_dropout"] = c.seed_dropout;
  j["seed_gumbel"] = c.seed_gumbel;
  j["tau"] = c.tau;
  j["share_encoders"] = c.share_encoders;
  j["detach_q"] = c.detach_q;
  j["corpus"] = c.corpus;
  j["checkpoint"] = c.checkpoint;
  j["log"] = c.log;
  return j;
}

// Rebuilds a config from the echo record at the head of a run log.
inline TrainConfig config_from_echo(const nlohmann::json& j) {
  TrainConfig c;
  c.mode = mode_from_string(j.at("mode").get<std::string>());
  c.ws = j.at("ws").get<int>();
  c.fw = j.at("fw").is_string() ? kFullFuture : j.at("fw").get<int>();
  c.d_emb = j.at("d_emb").get<int>();
  c.d_hidden = j.at("d_hidden").get<int>();
  c.d_attn = j.at("d_attn").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.use_rnn = j.at("use_rnn").get<bool>();
  c.input_mode = input_mode_from_string(j.at("input_mode").get<std::string>());
  c.feature_width = j.at("feature_width").get<int>();
  c.n_labels = j.at("n_labels").get<int>();
  c.vocab = j.at("vocab").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.lr = j.at("lr").get<double>();
  c.lr_milestones = j.at("lr_milestones").get<std::vector<int>>();
  c.lr_factor = j.at("lr_factor").get<double>();
  c.anneal_warmup = j.at("anneal_warmup").get<int>();
  c.anneal_ramp = j.at("anneal_ramp").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.val_fraction = j.at("val_fraction").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.seed_init = j.at("seed_init").get<std::uint64_t>();
  c.seed_shuffle = j.at("seed_shuffle").get<std::uint64_t>();
  c.seed_dropout = j.at("seed_dropout").get<std::uint64_t>();
  c.seed_gumbel = j.at("seed_gumbel").get<std::uint64_t>();
  c.seed_init_set = c.seed_shuffle_set = c.seed_dropout_set = c.seed_gumbel_set = true;
  c.tau = j.at("tau").get<double>();
  c.share_encoders = j.at("share_encoders").get<bool>();
  c.detach_q = j.at("detach_q").get<bool>();
  c.corpus = j.at("corpus").get<std::string>();
  c.checkpoint = j.at("checkpoint").get<std::string>();
  c.log = j.at("log").get<std::string>();
  config_validate(c);
  return c;
}

}  // namespace prdu
