#pragma once

// Experiment commands behind the CLI: meta-training, evaluation,
// cross-domain evaluation, gradient checks and synthetic data export.
// Every command is a pure function of (config, seed, checkpoint); reports are
// written with full precision so reruns are byte-identical.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsqat/checkpoint.hpp"
#include "fsqat/config.hpp"
#include "fsqat/gradcheck_suite.hpp"
#include "fsqat/io.hpp"
#include "fsqat/parallel.hpp"
#include "fsqat/pipeline.hpp"

namespace fsqat {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Data

struct DataSplits {
  VideoPool train, val, test;
  std::set<std::string> classes;  // every class known to the source
};

inline DataSplits load_data(const RunConfig& cfg) {
  DataSplits d;
  if (!cfg.data_dir.empty()) {
    const io::Dataset ds = io::load_dataset(cfg.data_dir, cfg.snippets);
    d.train = ds.pool(Split::train);
    d.val = ds.pool(Split::val);
    d.test = ds.pool(Split::test);
    for (const auto& [k, _] : ds.manifest) d.classes.insert(k);
    return d;
  }
  const SyntheticWorld world = make_world(cfg.synth);
  d.train = make_pool(world, Split::train);
  d.val = make_pool(world, Split::val);
  d.test = make_pool(world, Split::test);
  d.classes.insert(world.class_names.begin(), world.class_names.end());
  return d;
}

inline std::vector<PreparedEpisode> prepare_episodes(const VideoPool& pool, const RunConfig& cfg, std::uint64_t master, std::string_view stream,
                                                     std::size_t first, std::size_t count, bool augment = false) {
  std::vector<PreparedEpisode> out(count);
  parallel_for(count, [&](std::size_t i) {
    const std::size_t idx = first + i;
    Episode ep = sample_episode(pool, cfg.k_shot, derive_seed(master, stream, idx), cfg.adapt.setting);
    if (augment) {
      Rng rng = make_rng(master, "augment", idx);
      ep = permute_episode(ep, rng);
    }
    out[i] = prepare_episode(idx, std::move(ep), cfg.adapt, cfg.tau);
  });
  return out;
}

inline std::vector<EpisodeResult> run_episodes(const std::vector<PreparedEpisode>& eps, const QATParams* params, const EvalConfig& cfg) {
  std::vector<EpisodeResult> out(eps.size());
  parallel_for(eps.size(), [&](std::size_t i) { out[i] = run_episode(eps[i], params, cfg); });
  return out;
}

// ---------------------------------------------------------------------------
// Output helpers

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error(path.string() + ": cannot open for writing");
  os << text;
}

inline std::string predictions_jsonl(const std::vector<EpisodeResult>& results) {
  std::string out;
  for (const auto& r : results) {
    nlohmann::json c = nlohmann::json::array();
    for (const auto& k : r.candidates) c.push_back({{"start", k.start}, {"end", k.end}, {"score", k.score}});
    out += nlohmann::json{{"episode_id", r.episode_id}, {"class", r.label}, {"query_id", r.query_id}, {"candidates", c}}.dump() + "\n";
  }
  return out;
}

inline std::string episode_ap_csv(const std::vector<EpisodeResult>& results, const std::vector<double>& grid) {
  std::string out = "episode_id,class,query_id";
  for (double t : grid) out += ",ap@" + format_threshold(t);
  out += "\n";
  for (const auto& r : results) {
    out += std::to_string(r.episode_id) + "," + r.label + "," + r.query_id;
    for (std::size_t i = 0; i < grid.size(); ++i) out += "," + (r.ap ? fmt17((*r.ap)[i]) : std::string("nan"));
    out += "\n";
  }
  return out;
}

inline nlohmann::json report_json(const MapReport& m, const RunConfig& cfg) {
  return {{"thresholds", m.thresholds}, {"map", m.map},          {"mean", m.mean},
          {"episodes", m.episodes},     {"excluded", m.excluded}, {"qva", cfg.qva},
          {"k_shot", cfg.k_shot},       {"setting", to_string(cfg.adapt.setting)}, {"profile", cfg.profile}};
}

// ---------------------------------------------------------------------------
// meta-train

struct TrainLogRow {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double val_map = 0.0;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<TrainLogRow> log;
  std::size_t best_epoch = 0;
};

inline double mean_map(const std::vector<EpisodeResult>& results, const std::vector<double>& grid) {
  return map_report(results, grid).mean;
}

inline QATParams initial_qat_params(const RunConfig& cfg, std::size_t embed_dim) {
  Rng rng = make_rng(cfg.seed, "qat-init");
  return random_qat_params(embed_dim, cfg.qat.latent_dim, cfg.qat.heads, cfg.qat.dropout, rng, cfg.qat.residual_init);
}

/// Serial meta-training; support fits for an epoch are computed up front in
/// parallel since they do not depend on the transformer.
inline TrainResult meta_train(const RunConfig& cfg, const DataSplits& data, std::ostream* progress = nullptr) {
  if (data.train.empty()) throw DataError("meta-train: no training classes");
  const std::size_t C = data.train.dim();
  TrainResult tr;
  QATParams params = initial_qat_params(cfg, C);
  Adam opt(cfg.meta_lr);
  const std::string echo = echo_config(cfg);
  tr.best = tr.last = Checkpoint{params, cfg.tau, echo};

  std::vector<PreparedEpisode> val;
  if (!data.val.empty() && cfg.val_episodes > 0) val = prepare_episodes(data.val, cfg, cfg.val_seed, "val-episode", 0, cfg.val_episodes);

  double best_map = -std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::size_t first = (epoch - 1) * cfg.episodes_per_epoch;
    const auto batch = prepare_episodes(data.train, cfg, cfg.seed, "train-episode", first, cfg.episodes_per_epoch, cfg.augment);
    double loss_sum = 0.0;
    for (const auto& ep : batch) {
      Rng drop = make_rng(cfg.seed, "dropout", ep.id);
      const SnippetLabels labels = rasterize_labels(*ep.episode.query, ep.episode.label);
      loss_sum += meta_step(params, opt, ep.phi_star, ep.episode.query->features, labels, cfg.adapt.epsilon, &drop).loss;
    }
    TrainLogRow row{epoch, batch.empty() ? 0.0 : loss_sum / static_cast<double>(batch.size()), 0.0};
    if (!val.empty()) row.val_map = mean_map(run_episodes(val, &params, cfg.eval), cfg.eval.tiou_grid);
    tr.log.push_back(row);
    tr.last = Checkpoint{params, cfg.tau, echo};
    if (val.empty() || row.val_map > best_map) {
      best_map = row.val_map;
      tr.best = tr.last;
      tr.best_epoch = epoch;
    }
    if (progress)
      *progress << "epoch " << epoch << "/" << cfg.epochs << " loss " << row.mean_loss << " val_map " << row.val_map << std::endl;
  }
  return tr;
}

inline std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::string out = "epoch,mean_loss,val_map\n";
  for (const auto& r : log) out += std::to_string(r.epoch) + "," + fmt17(r.mean_loss) + "," + fmt17(r.val_map) + "\n";
  return out;
}

inline TrainResult cmd_meta_train(const RunConfig& cfg, const fs::path& out_dir, std::ostream* progress = nullptr) {
  fs::create_directories(out_dir);
  write_text(out_dir / "config.resolved", echo_config(cfg));
  const DataSplits data = load_data(cfg);
  TrainResult tr = meta_train(cfg, data, progress);
  save_checkpoint(out_dir / "checkpoint.qat", tr.best);
  save_checkpoint(out_dir / "last.qat", tr.last);
  write_text(out_dir / "train_log.csv", train_log_csv(tr.log));
  return tr;
}

// ---------------------------------------------------------------------------
// evaluate / cross-eval

struct EvalResult {
  MapReport report;
  std::vector<EpisodeResult> episodes;
  double seconds_per_task = 0.0;
};

/// Evaluates `tasks` episodes from `pool`. The transformer is read-only here.
inline EvalResult evaluate(const RunConfig& cfg, const VideoPool& pool, const QATParams* params) {
  if (pool.empty()) throw DataError("evaluate: no test classes available");
  if (params && params->embed_dim() != pool.dim())
    throw ShapeError("evaluate: checkpoint expects embed dim " + std::to_string(params->embed_dim()) + " but data has " +
                     std::to_string(pool.dim()));
  const auto t0 = std::chrono::steady_clock::now();
  const auto prepared = prepare_episodes(pool, cfg, cfg.seed, "eval-episode", 0, cfg.tasks);
  EvalResult r;
  r.episodes = run_episodes(prepared, params, cfg.eval);
  r.report = map_report(r.episodes, cfg.eval.tiou_grid);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.seconds_per_task = cfg.tasks ? secs / static_cast<double>(cfg.tasks) : 0.0;
  return r;
}

inline void write_eval_outputs(const EvalResult& r, const RunConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  write_text(out_dir / "config.resolved", echo_config(cfg));
  write_text(out_dir / "report.csv", map_report_csv(r.report));
  write_text(out_dir / "report.json", report_json(r.report, cfg).dump(2) + "\n");
  write_text(out_dir / "predictions.jsonl", predictions_jsonl(r.episodes));
  write_text(out_dir / "episode_ap.csv", episode_ap_csv(r.episodes, cfg.eval.tiou_grid));
  // wall clock lives apart from the reports so those stay reproducible
  write_text(out_dir / "timing.json",
             nlohmann::json{{"seconds_per_task", r.seconds_per_task},
                            {"tasks", cfg.tasks},
                            {"workers", worker_count()},
                            {"note", "CPU wall clock over precomputed snippet embeddings; excludes feature extraction"}}
                     .dump(2) +
                 "\n");
}

/// Loads the checkpoint unless query adaptation is disabled. The checkpoint's
/// tau replaces the configured one.
inline std::optional<Checkpoint> checkpoint_for(RunConfig& cfg, const std::string& path) {
  if (!cfg.qva && path.empty()) return std::nullopt;
  if (path.empty()) throw std::invalid_argument("evaluate: --checkpoint is required unless --no-qva is given");
  Checkpoint ck = load_checkpoint(path);
  cfg.tau = ck.tau;
  return ck;
}

inline EvalResult cmd_evaluate(RunConfig cfg, const std::string& checkpoint_path, const fs::path& out_dir) {
  const auto ck = checkpoint_for(cfg, checkpoint_path);
  const DataSplits data = load_data(cfg);
  EvalResult r = evaluate(cfg, data.test, cfg.qva ? &ck->params : nullptr);
  write_eval_outputs(r, cfg, out_dir);
  return r;
}

/// Model trained on `train_cfg`'s domain, scored on `test_cfg`'s test classes.
inline EvalResult cmd_cross_eval(const RunConfig& train_cfg, RunConfig test_cfg, const std::string& checkpoint_path, const fs::path& out_dir) {
  const bool same_source = train_cfg.profile == test_cfg.profile && train_cfg.data_dir == test_cfg.data_dir;
  const DataSplits test_data = load_data(test_cfg);
  if (!same_source) {
    const DataSplits train_data = load_data(train_cfg);
    std::vector<std::string> shared;
    for (const auto& c : test_data.classes)
      if (train_data.classes.count(c)) shared.push_back(c);
    if (!shared.empty())
      throw DataError("cross-eval: profiles '" + train_cfg.profile + "' and '" + test_cfg.profile + "' share class '" + shared.front() +
                      "' (" + std::to_string(shared.size()) + " overlapping); class pools must be disjoint");
  }
  const auto ck = checkpoint_for(test_cfg, checkpoint_path);
  EvalResult r = evaluate(test_cfg, test_data.test, test_cfg.qva ? &ck->params : nullptr);
  write_eval_outputs(r, test_cfg, out_dir);
  return r;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradCheckSummary {
  std::vector<std::pair<std::string, GradCheckReport>> checks;
  bool passed = true;
  std::string text;
};

inline GradCheckSummary cmd_gradcheck(std::uint64_t seed, double tolerance, std::size_t compositions, const std::string& inject_block = {}) {
  GradCheckOptions opt;
  opt.tolerance = tolerance;
  if (!inject_block.empty())
    opt.tamper = [inject_block](std::string_view block, Matrix& g) {
      if (block == inject_block)
        for (double& v : g.data) v *= 1.02;
    };
  GradCheckSummary s;
  Rng rng = make_rng(seed, "gradcheck");
  for (std::size_t i = 0; i < compositions; ++i) {
    auto c = random_composition(rng);
    s.checks.emplace_back("composition" + std::to_string(i), grad_check(c.loss, c.point, opt));
  }
  s.checks.emplace_back("episode", episode_grad_check(derive_seed(seed, "episode"), opt));
  if (!inject_block.empty()) {
    bool found = false;
    for (const auto& [_, r] : s.checks)
      for (const auto& b : r.blocks) found = found || b.name == inject_block;
    if (!found) throw std::invalid_argument("gradcheck: no parameter block named '" + inject_block + "'");
  }

  std::ostringstream os;
  char buf[256];
  for (const auto& [name, r] : s.checks) {
    for (const auto& b : r.blocks) {
      const bool ok = b.finite && b.max_rel_error < tolerance;
      std::snprintf(buf, sizeof buf, "%s %s/%s max_rel_err=%.3e at [%zu] analytic=%.10e numeric=%.10e\n", ok ? "PASS" : "FAIL", name.c_str(), b.name.c_str(), b.max_rel_error, b.worst_index, b.analytic, b.numeric);
      os << buf;
    }
    for (const auto& p : r.problems) os << "NOTE " << name << ": " << p << "\n";
    s.passed = s.passed && r.passed;
  }
  std::snprintf(buf, sizeof buf, "%s: %zu checks at tolerance %.1e\n", s.passed ? "ALL PASS" : "FAILED", s.checks.size(), tolerance);
  os << buf;
  s.text = os.str();
  return s;
}

// ---------------------------------------------------------------------------
// gen-synthetic

inline std::size_t cmd_gen_synthetic(const RunConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  write_text(out_dir / "config.resolved", echo_config(cfg));
  return io::write_synthetic_dataset(make_world(cfg.synth), out_dir);
}

}  // namespace fsqat
