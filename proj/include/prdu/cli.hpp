#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "prdu/checkpoint.hpp"
#include "prdu/config.hpp"
#include "prdu/data.hpp"
#include "prdu/training.hpp"

namespace prdu::cli {

namespace detail {

inline std::string format_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string format_pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * v);
  return buf;
}

inline std::string fw_string(int fw) { return fw < 0 ? "all" : std::to_string(fw); }

}  // namespace detail

inline void write_run_log(const std::string& path, const TrainConfig& cfg,
                          std::span<const EpochRecord> records,
                          const std::optional<EpochRecord>& test_record) {
  std::ofstream f(path, std::ios::binary);  // binary keeps line endings stable
  if (!f) throw std::runtime_error("cannot open log file " + path);
  f << config_echo(cfg).dump() << "\n";
  for (const EpochRecord& r : records) f << record_to_json(r).dump() << "\n";
  if (test_record) f << record_to_json(*test_record).dump() << "\n";
}

struct CellResult {
  std::string mode;
  int ws = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
};

struct CellAggregate {
  double mean_accuracy = 0.0;
  double mean_macro_f1 = 0.0;
  int n_seeds = 0;
};

// Mean over seeds per (mode, ws); accumulation in seed order.
inline std::map<std::pair<std::string, int>, CellAggregate> aggregate_cells(
    std::vector<CellResult> cells) {
  std::sort(cells.begin(), cells.end(), [](const CellResult& a, const CellResult& b) {
    return std::tie(a.mode, a.ws, a.seed) < std::tie(b.mode, b.ws, b.seed);
  });
  std::map<std::pair<std::string, int>, CellAggregate> out;
  for (const CellResult& c : cells) {
    CellAggregate& agg = out[{c.mode, c.ws}];
    agg.mean_accuracy += c.accuracy;
    agg.mean_macro_f1 += c.macro_f1;
    agg.n_seeds += 1;
  }
  for (auto& [key, agg] : out) {
    agg.mean_accuracy /= agg.n_seeds;
    agg.mean_macro_f1 /= agg.n_seeds;
  }
  return out;
}

inline std::string render_table(const std::vector<std::string>& modes,
                                const std::vector<int>& ws_list,
                                const std::map<std::pair<std::string, int>, CellAggregate>& agg) {
  std::ostringstream os;
  os << "method";
  for (int ws : ws_list) os << "\tws=" << ws << " (acc|f1)";
  os << "\n";
  for (const std::string& mode : modes) {
    os << mode;
    for (int ws : ws_list) {
      const auto it = agg.find({mode, ws});
      if (it == agg.end()) {
        os << "\t-";
      } else {
        os << "\t" << detail::format_pct(it->second.mean_accuracy) << "|"
           << detail::format_pct(it->second.mean_macro_f1);
      }
    }
    os << "\n";
  }
  return os.str();
}

inline std::string render_csv(const std::vector<std::string>& modes,
                              const std::vector<int>& ws_list,
                              const std::map<std::pair<std::string, int>, CellAggregate>& agg) {
  std::ostringstream os;
  os << "mode,ws,n_seeds,accuracy,macro_f1\n";
  for (const std::string& mode : modes) {
    for (int ws : ws_list) {
      const auto it = agg.find({mode, ws});
      if (it == agg.end()) continue;
      os << mode << "," << ws << "," << it->second.n_seeds << ","
         << detail::format_g17(it->second.mean_accuracy) << ","
         << detail::format_g17(it->second.mean_macro_f1) << "\n";
    }
  }
  return os.str();
}

inline std::string cell_log_name(const std::string& mode, int ws, std::uint64_t seed) {
  return "cell_" + mode + "_ws" + std::to_string(ws) + "_seed" + std::to_string(seed) + ".jsonl";
}

// Trains one configuration and appends the test-split record evaluated with
// the best-validation checkpoint.
inline CellResult run_cell(const TrainConfig& cfg, std::span<const DialogueSession> train_corpus,
                           std::span<const DialogueSession> test_corpus) {
  TrainResult result = train(cfg, train_corpus);

  std::vector<Example> test_examples = make_examples(test_corpus, cfg.ws, cfg.fw);
  const Metrics test_metrics = evaluate(result.best_model, test_examples, cfg.mode);
  const double final_lambda =
      cfg.epochs > 0 ? lambda_at(cfg.epochs - 1, AnnealSchedule{cfg.anneal_warmup, cfg.anneal_ramp})
                     : 0.0;
  const auto [test_ce, test_kl] =
      mean_losses(result.best_model, test_examples, final_lambda, cfg.mode);

  EpochRecord test_rec;
  test_rec.epoch = cfg.epochs;
  test_rec.split = "test";
  test_rec.mode = cfg.mode;
  test_rec.ws = cfg.ws;
  test_rec.fw = cfg.fw;
  test_rec.lambda = final_lambda;
  test_rec.lr = cfg.epochs > 0
                    ? lr_at(cfg.epochs - 1, cfg.lr, cfg.lr_milestones, cfg.lr_factor)
                    : cfg.lr;
  test_rec.loss_ce = test_ce;
  test_rec.loss_kl = test_kl;
  test_rec.accuracy = test_metrics.accuracy;
  test_rec.macro_f1 = test_metrics.macro_f1;
  test_rec.weighted_f1 = test_metrics.weighted_f1;
  test_rec.seed = cfg.seed;

  if (!cfg.log.empty()) write_run_log(cfg.log, cfg, result.records, test_rec);
  if (!cfg.checkpoint.empty()) {
    CheckpointMeta meta{cfg.mode, cfg.ws,          cfg.fw,          cfg.tau,
                        cfg.seed_init, cfg.seed_shuffle, cfg.seed_dropout, cfg.seed_gumbel};
    save_checkpoint(cfg.checkpoint, result.best_model, meta);
  }
  return CellResult{to_string(cfg.mode), cfg.ws, cfg.seed, test_metrics.accuracy,
                    test_metrics.macro_f1};
}

struct GridOutcome {
  std::vector<CellResult> cells;
  std::string table_text;
  std::string table_csv;
};

inline GridOutcome run_grid(const TrainConfig& base, const std::vector<std::string>& modes,
                            const std::vector<int>& ws_list,
                            const std::vector<std::uint64_t>& seeds,
                            std::span<const DialogueSession> train_corpus,
                            std::span<const DialogueSession> test_corpus,
                            const std::string& outdir, int jobs) {
  std::filesystem::create_directories(outdir);
  struct Cell {
    TrainConfig cfg;
  };
  std::vector<Cell> cells;
  for (const std::string& mode : modes) {
    for (int ws : ws_list) {
      for (std::uint64_t seed : seeds) {
        TrainConfig cfg = base;
        cfg.mode = mode_from_string(mode);
        cfg.ws = ws;
        cfg.seed = seed;
        cfg.seed_init_set = cfg.seed_shuffle_set = cfg.seed_dropout_set = cfg.seed_gumbel_set =
            false;
        cfg.finalize_seeds();
        cfg.log = (std::filesystem::path(outdir) / cell_log_name(mode, ws, seed)).string();
        cfg.checkpoint.clear();
        cells.push_back(Cell{std::move(cfg)});
      }
    }
  }

  std::vector<CellResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        results[i] = run_cell(cells[i].cfg, train_corpus, test_corpus);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  GridOutcome out;
  out.cells = results;
  const auto agg = aggregate_cells(results);
  out.table_text = render_table(modes, ws_list, agg);
  out.table_csv = render_csv(modes, ws_list, agg);

  std::ofstream txt(std::filesystem::path(outdir) / "results.txt");
  txt << out.table_text;
  std::ofstream csv(std::filesystem::path(outdir) / "results.csv");
  csv << out.table_csv;
  return out;
}

// Re-aggregates a grid directory from the raw cell logs only; never touches
// checkpoints.
inline GridOutcome report_from_logs(const std::string& outdir) {
  std::vector<CellResult> cells;
  std::vector<std::string> modes;
  std::vector<int> ws_list;
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(outdir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("cell_", 0) == 0 && entry.path().extension() == ".jsonl")
      files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("report: cannot open " + path.string());
    std::string line;
    if (!std::getline(f, line))
      throw std::runtime_error("report: empty log " + path.string());
    const nlohmann::json echo = nlohmann::json::parse(line);
    CellResult cell;
    cell.mode = echo.at("mode").get<std::string>();
    cell.ws = echo.at("ws").get<int>();
    cell.seed = echo.at("seed").get<std::uint64_t>();
    bool have_test = false;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      const nlohmann::json rec = nlohmann::json::parse(line);
      if (rec.at("split").get<std::string>() == "test") {
        cell.accuracy = rec.at("accuracy").get<double>();
        cell.macro_f1 = rec.at("macro_f1").get<double>();
        have_test = true;
      }
    }
    if (!have_test)
      throw std::runtime_error("report: no test record in " + path.string());
    cells.push_back(cell);
    if (std::find(modes.begin(), modes.end(), cell.mode) == modes.end())
      modes.push_back(cell.mode);
    if (std::find(ws_list.begin(), ws_list.end(), cell.ws) == ws_list.end())
      ws_list.push_back(cell.ws);
  }
  std::sort(ws_list.begin(), ws_list.end());

  GridOutcome out;
  out.cells = std::move(cells);
  const auto agg = aggregate_cells(out.cells);
  out.table_text = render_table(modes, ws_list, agg);
  out.table_csv = render_csv(modes, ws_list, agg);
  return out;
}

namespace detail {

inline std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = prdu::detail::trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

}  // namespace detail

inline int run_command(const std::vector<std::string>& args) {
  CLI::App app{"dialogue understanding with future-aware posterior regularization"};
  app.require_subcommand(1);

  // ---- gen ----
  auto* gen = app.add_subcommand("gen", "generate a synthetic corpus");
  std::string gen_out;
  int gen_sessions = 2000;
  std::uint64_t gen_seed = 7;
  std::string gen_preset = "default";
  SynthSpec spec;
  gen->add_option("--out", gen_out, "output corpus path")->required();
  gen->add_option("--sessions", gen_sessions, "number of sessions");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--spec", gen_preset, "spec preset (default)");
  gen->add_option("--topics", spec.topics, "topic/label count");
  gen->add_option("--vocab", spec.vocab, "vocabulary size");
  gen->add_option("--slice", spec.slice, "tokens per topic slice");
  gen->add_option("--session-len", spec.session_len, "utterances per session");
  gen->add_option("--utt-min", spec.utt_len_min, "min utterance length");
  gen->add_option("--utt-max", spec.utt_len_max, "max utterance length");
  gen->add_option("--alpha-past", spec.alpha_past, "topic cue rate up to the query turn");
  gen->add_option("--alpha-future", spec.alpha_future, "topic cue rate after the query turn");

  // ---- train ----
  auto* tr = app.add_subcommand("train", "train one configuration");
  std::string tr_config, tr_from_log;
  std::vector<std::pair<std::string, std::string>> tr_overrides;
  tr->add_option("--config", tr_config, "key = value config file");
  tr->add_option("--config-from-log", tr_from_log,
                 "reproduce a run from the config echo at the head of a log");
  for (const std::string& key : config_keys()) {
    tr->add_option_function<std::string>(
        "--" + key, [&tr_overrides, key](const std::string& v) { tr_overrides.emplace_back(key, v); },
        "override config key " + key);
  }

  // ---- eval ----
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a corpus");
  std::string ev_checkpoint, ev_corpus, ev_mode;
  int ev_ws = -1;
  std::string ev_fw;
  ev->add_option("--checkpoint", ev_checkpoint, "checkpoint path")->required();
  ev->add_option("--corpus", ev_corpus, "corpus path")->required();
  ev->add_option("--mode", ev_mode, "override the checkpoint mode");
  ev->add_option("--ws", ev_ws, "override the past window");
  ev->add_option("--fw", ev_fw, "override the future window (integer or 'all')");

  // ---- grid ----
  auto* gr = app.add_subcommand("grid", "run the mode x window x seed experiment grid");
  std::string gr_corpus, gr_test, gr_outdir, gr_config;
  std::string gr_modes = "TH-PH,TW-PW,TW-PH,TW-PH-S";
  std::string gr_ws = "3";
  int gr_seeds = 3;
  std::uint64_t gr_seed_base = 1;
  int gr_jobs = 1;
  std::vector<std::pair<std::string, std::string>> gr_overrides;
  gr->add_option("--corpus", gr_corpus, "training corpus")->required();
  gr->add_option("--test-corpus", gr_test, "held-out test corpus")->required();
  gr->add_option("--outdir", gr_outdir, "output directory")->required();
  gr->add_option("--config", gr_config, "base config file");
  gr->add_option("--modes", gr_modes, "comma-separated mode list");
  gr->add_option("--ws-list", gr_ws, "comma-separated past windows");
  gr->add_option("--seeds", gr_seeds, "number of seeds per cell");
  gr->add_option("--seed-base", gr_seed_base, "first seed value");
  gr->add_option("--jobs", gr_jobs, "parallel cell processes");
  for (const std::string& key : config_keys()) {
    gr->add_option_function<std::string>(
        "--" + key, [&gr_overrides, key](const std::string& v) { gr_overrides.emplace_back(key, v); },
        "override config key " + key);
  }

  // ---- report ----
  auto* rp = app.add_subcommand("report", "re-aggregate a grid directory from its logs");
  std::string rp_outdir;
  bool rp_csv = false;
  rp->add_option("--outdir", rp_outdir, "grid output directory")->required();
  rp->add_flag("--csv", rp_csv, "print the csv table instead of the aligned one");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      if (gen_preset != "default")
        throw std::invalid_argument("gen: unknown spec preset '" + gen_preset + "'");
      const auto corpus = generate_synthetic(spec, gen_sessions, gen_seed);
      save_corpus(gen_out, corpus);
      std::cout << "wrote " << corpus.size() << " sessions to " << gen_out << "\n";
      return 0;
    }

    if (tr->parsed()) {
      TrainConfig cfg;
      if (!tr_from_log.empty()) {
        if (!tr_config.empty())
          throw std::invalid_argument("train: pass --config or --config-from-log, not both");
        std::ifstream f(tr_from_log);
        if (!f) throw std::runtime_error("train: cannot open " + tr_from_log);
        std::string first;
        if (!std::getline(f, first))
          throw std::runtime_error("train: empty log " + tr_from_log);
        cfg = config_from_echo(nlohmann::json::parse(first));
        for (const auto& [key, value] : tr_overrides) config_set(cfg, key, value);
        cfg.finalize_seeds();
      } else {
        cfg = parse_config(tr_config, tr_overrides);
      }
      if (cfg.corpus.empty()) throw std::invalid_argument("train: no corpus configured");
      const auto corpus = load_corpus(cfg.corpus, cfg.n_labels);
      TrainResult result = train(cfg, corpus);
      if (!cfg.log.empty()) {
        write_run_log(cfg.log, cfg, result.records, std::nullopt);
      } else {
        std::cout << config_echo(cfg).dump() << "\n";
        for (const EpochRecord& r : result.records) std::cout << record_to_json(r).dump() << "\n";
      }
      if (!cfg.checkpoint.empty()) {
        CheckpointMeta meta{cfg.mode, cfg.ws,          cfg.fw,          cfg.tau,
                            cfg.seed_init, cfg.seed_shuffle, cfg.seed_dropout, cfg.seed_gumbel};
        save_checkpoint(cfg.checkpoint, result.best_model, meta);
      }
      if (!result.records.empty()) {
        const EpochRecord& last = result.records.back();
        std::cout << "trained " << cfg.epochs << " epochs; last " << last.split
                  << " accuracy " << detail::format_pct(last.accuracy) << "%\n";
      }
      return 0;
    }

    if (ev->parsed()) {
      LoadedCheckpoint loaded = load_checkpoint(ev_checkpoint);
      const Mode mode = ev_mode.empty() ? loaded.meta.mode : mode_from_string(ev_mode);
      const int ws = ev_ws >= 0 ? ev_ws : loaded.meta.ws;
      int fw = loaded.meta.fw;
      if (!ev_fw.empty()) fw = ev_fw == "all" ? kFullFuture : std::stoi(ev_fw);
      const auto corpus = load_corpus(ev_corpus, loaded.model.dims.n_labels);
      const auto examples = make_examples(corpus, ws, fw);
      const Metrics m = evaluate(loaded.model, examples, mode);
      nlohmann::ordered_json j;
      j["mode"] = to_string(mode);
      j["ws"] = ws;
      j["fw"] = detail::fw_string(fw);
      j["examples"] = m.count;
      j["accuracy"] = m.accuracy;
      j["macro_f1"] = m.macro_f1;
      j["weighted_f1"] = m.weighted_f1;
      j["precision"] = m.precision;
      j["recall"] = m.recall;
      std::cout << j.dump() << "\n";
      return 0;
    }

    if (gr->parsed()) {
      TrainConfig base = parse_config(gr_config, gr_overrides);
      const auto train_corpus = load_corpus(gr_corpus, base.n_labels);
      const auto test_corpus = load_corpus(gr_test, base.n_labels);
      std::vector<int> ws_list;
      for (const std::string& w : detail::split_list(gr_ws)) ws_list.push_back(std::stoi(w));
      std::vector<std::uint64_t> seeds;
      for (int i = 0; i < gr_seeds; ++i) seeds.push_back(gr_seed_base + static_cast<std::uint64_t>(i));
      const auto outcome = run_grid(base, detail::split_list(gr_modes), ws_list, seeds,
                                    train_corpus, test_corpus, gr_outdir, gr_jobs);
      std::cout << outcome.table_text;
      return 0;
    }

    if (rp->parsed()) {
      const auto outcome = report_from_logs(rp_outdir);
      std::cout << (rp_csv ? outcome.table_csv : outcome.table_text);
      const auto csv_path = std::filesystem::path(rp_outdir) / "results.csv";
      if (std::filesystem::exists(csv_path)) {
        std::ifstream f(csv_path);
        std::stringstream existing;
        existing << f.rdbuf();
        if (existing.str() != outcome.table_csv) {
          std::cerr << "report: aggregation differs from results.csv\n";
          return 1;
        }
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace prdu::cli
