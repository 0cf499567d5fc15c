#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "prdu/model.hpp"

namespace prdu {

struct CheckpointMeta {
  Mode mode = Mode::TrainWholePredictHist;
  int ws = 3;
  int fw = kFullFuture;
  double tau = 1.0;
  std::uint64_t seed_init = 0, seed_shuffle = 0, seed_dropout = 0, seed_gumbel = 0;
};

namespace detail {

inline void write_f64_le(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(buf, 8);
}

inline double read_f64_le(std::istream& is) {
  char buf[8];
  is.read(buf, 8);
  if (!is) throw std::runtime_error("checkpoint: truncated parameter data");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

// Layout: magic line, one JSON metadata line, then the named parameter
// arrays as raw little-endian doubles in declaration order.
inline void save_checkpoint(const std::string& path, PriorRegModel& model,
                            const CheckpointMeta& meta) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f << "PRDU1\n";

  nlohmann::ordered_json j;
  j["dims"] = {{"vocab", model.dims.vocab},   {"d_emb", model.dims.d_emb},
               {"d_hidden", model.dims.d_hidden}, {"d_attn", model.dims.d_attn},
               {"d_mlp", model.dims.d_mlp},   {"n_labels", model.dims.n_labels}};
  j["use_rnn"] = model.prior_encoder.use_rnn;
  j["input_mode"] = to_string(model.prior_encoder.input_mode);
  j["feature_width"] = model.prior_encoder.feature_width;
  j["share_encoders"] = model.share_encoders;
  j["detach_q_in_kl"] = model.detach_q_in_kl;
  j["mode"] = to_string(meta.mode);
  j["ws"] = meta.ws;
  j["fw"] = meta.fw;
  j["tau"] = meta.tau;
  j["seeds"] = {{"init", meta.seed_init},
                {"shuffle", meta.seed_shuffle},
                {"dropout", meta.seed_dropout},
                {"gumbel", meta.seed_gumbel}};
  auto params = model.parameters();
  nlohmann::ordered_json jp = nlohmann::ordered_json::array();
  for (const ParamRef& ref : params)
    jp.push_back({{"name", ref.name}, {"shape", ref.tensor->shape()}});
  j["params"] = std::move(jp);
  f << j.dump() << "\n";

  for (const ParamRef& ref : params) {
    const double* p = ref.tensor->data();
    for (int i = 0; i < ref.tensor->size(); ++i) detail::write_f64_le(f, p[i]);
  }
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

struct LoadedCheckpoint {
  PriorRegModel model;
  CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string magic;
  if (!std::getline(f, magic) || magic != "PRDU1")
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  std::string meta_line;
  if (!std::getline(f, meta_line))
    throw std::runtime_error("load_checkpoint: missing metadata in " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(meta_line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_checkpoint: malformed metadata: " + std::string(e.what()));
  }

  ModelDims dims;
  dims.vocab = j.at("dims").at("vocab").get<int>();
  dims.d_emb = j.at("dims").at("d_emb").get<int>();
  dims.d_hidden = j.at("dims").at("d_hidden").get<int>();
  dims.d_attn = j.at("dims").at("d_attn").get<int>();
  dims.d_mlp = j.at("dims").at("d_mlp").get<int>();
  dims.n_labels = j.at("dims").at("n_labels").get<int>();

  Rng scratch(0);
  LoadedCheckpoint out{
      init_model(dims, input_mode_from_string(j.at("input_mode").get<std::string>()),
                 j.at("use_rnn").get<bool>(), j.at("feature_width").get<int>(), scratch,
                 j.at("share_encoders").get<bool>()),
      CheckpointMeta{}};
  out.model.detach_q_in_kl = j.at("detach_q_in_kl").get<bool>();
  out.meta.mode = mode_from_string(j.at("mode").get<std::string>());
  out.meta.ws = j.at("ws").get<int>();
  out.meta.fw = j.at("fw").get<int>();
  out.meta.tau = j.at("tau").get<double>();
  out.meta.seed_init = j.at("seeds").at("init").get<std::uint64_t>();
  out.meta.seed_shuffle = j.at("seeds").at("shuffle").get<std::uint64_t>();
  out.meta.seed_dropout = j.at("seeds").at("dropout").get<std::uint64_t>();
  out.meta.seed_gumbel = j.at("seeds").at("gumbel").get<std::uint64_t>();

  auto params = out.model.parameters();
  const auto& jp = j.at("params");
  if (jp.size() != params.size())
    throw std::runtime_error("load_checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (jp[i].at("name").get<std::string>() != params[i].name)
      throw std::runtime_error("load_checkpoint: parameter order mismatch at " + params[i].name);
    if (jp[i].at("shape").get<std::vector<int>>() != params[i].tensor->shape())
      throw std::runtime_error("load_checkpoint: shape mismatch for " + params[i].name);
    double* p = params[i].tensor->data();
    for (int e = 0; e < params[i].tensor->size(); ++e) p[e] = detail::read_f64_le(f);
  }
  return out;
}

}  // namespace prdu
