// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only if all
// pass. Artifacts go to ./acceptance_out (or argv[1]).

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "../unit/oracles.hpp"
#include "fsqat/fsqat.hpp"

using namespace fsqat;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kGradTolerance = 1e-6;
constexpr double kGradSeconds = 10.0;
constexpr double kWorkedLoss = 1.84839;
constexpr double kWorkedLossTol = 1e-5;
constexpr double kApTol = 1e-12;
constexpr double kDuplicateDecay = 0.10827;
constexpr double kDecayTol = 1e-5;
constexpr std::size_t kOracleInstances = 1000;
constexpr std::size_t kEvalTasks = 500;
constexpr double kAblationSeconds = 15.0 * 60.0;
constexpr std::uint64_t kSeeds[] = {0, 1, 2};

fs::path g_out = "acceptance_out";
int g_failures = 0;

void verdict(int n, bool ok, const std::string& what) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", n, what.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

void note(const std::string& s) {
  std::printf("  %s\n", s.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FSQAT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::vector<double> episode_means(const std::vector<EpisodeResult>& eps) {
  std::vector<double> out;
  for (const auto& e : eps) {
    if (!e.ap) continue;
    double s = 0.0;
    for (double v : *e.ap) s += v;
    out.push_back(s / static_cast<double>(e.ap->size()));
  }
  return out;
}

// Percentile bootstrap of the mean paired difference.
std::pair<double, double> bootstrap_ci(const std::vector<double>& diff, std::size_t resamples, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, diff.size() - 1);
  std::vector<double> means(resamples);
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < diff.size(); ++i) s += diff[pick(rng)];
    m = s / static_cast<double>(diff.size());
  }
  std::sort(means.begin(), means.end());
  const auto at = [&](double q) { return means[static_cast<std::size_t>(q * static_cast<double>(resamples - 1))]; };
  return {at(0.025), at(0.975)};
}

double spearman(const std::vector<double>& y) {
  const std::size_t n = y.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return y[a] < y[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n; ++i) rank[idx[i]] = static_cast<double>(i);
  const double mean = (static_cast<double>(n) - 1.0) / 2.0;
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    num += (static_cast<double>(i) - mean) * (rank[i] - mean);
    den += (static_cast<double>(i) - mean) * (static_cast<double>(i) - mean);
  }
  return num / den;
}

// ---------------------------------------------------------------------------

void gradient_fidelity() {
  const auto t0 = Clock::now();
  GradCheckOptions opt;
  opt.tolerance = kGradTolerance;
  const EpisodeCheckShape shape;  // C=8, T=6, m=2, K=1
  const GradCheckReport r = episode_grad_check(derive_seed(0, "episode"), opt, shape);
  const double secs = seconds_since(t0);
  verdict(1, r.passed && r.max_rel_error < kGradTolerance && secs < kGradSeconds,
          fmt("full-episode gradient max rel err %.3e (< %.0e) over %zu blocks at C=%zu T=%zu m=%zu K=%zu in %.2f s (< %.0f s)", r.max_rel_error,
              kGradTolerance, r.blocks.size(), shape.embed_dim, shape.snippets, shape.heads, shape.k_shot, secs, kGradSeconds));
}

void qat_identity() {
  bool exact = true;
  Rng rng(11);
  for (int trial = 0; trial < 200 && exact; ++trial) {
    const std::size_t C = 4 + static_cast<std::size_t>(trial % 13), T = 3 + static_cast<std::size_t>(trial % 7);
    const ClassifierWeights phi{detail::random_matrix(1, C, rng, -2, 2), 10.0};
    const Matrix x = detail::random_matrix(T, C, rng, -2, 2);
    const QATParams zero = zero_qat_params(C, 8, 2);
    exact = qat_adapt(phi, x, zero).phi == phi.phi;
  }
  bool same_eval = true;
  for (std::uint64_t seed : kSeeds) {
    const RunConfig c = resolve_config({}, {{"seed", std::to_string(seed)}, {"tasks", "200"}});
    const DataSplits data = load_data(c);
    const QATParams zero = zero_qat_params(c.synth.dim, c.qat.latent_dim, c.qat.heads);
    const EvalResult a = evaluate(c, data.test, &zero), b = evaluate(c, data.test, nullptr);
    same_eval = same_eval && predictions_jsonl(a.episodes) == predictions_jsonl(b.episodes) &&
                episode_ap_csv(a.episodes, c.eval.tiou_grid) == episode_ap_csv(b.episodes, c.eval.tiou_grid) && a.report.map == b.report.map;
  }
  verdict(2, exact && same_eval,
          fmt("zero-weight transformer returns phi* bit-exactly (%s, 200 random cases); no-QVA and zero-weight QVA evaluations identical on seeds 0,1,2 (%s)",
              exact ? "yes" : "no", same_eval ? "yes" : "no"));
}

void loss_semantics() {
  const double worked = balanced_ce(Matrix(4, 1, 0.5), labels_from_mask({1, 1, 0, 0}), 1.0, Setting::untrimmed);
  // Trimmed: the loss must equal the foreground half computed by hand, whatever
  // the background scores are.
  Rng rng(5);
  std::uniform_real_distribution<double> u(1e-3, 1.0 - 1e-3);
  std::uniform_int_distribution<std::size_t> len(1, 40);
  double worst = 0.0;
  bool invariant = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t T = len(rng);
    Matrix p(T, 1);
    for (double& v : p.data) v = u(rng);
    const auto mask = detail::random_mask(T, rng);
    double nfg = 0.0, lfg = 0.0;
    for (std::size_t t = 0; t < T; ++t)
      if (mask[t]) {
        nfg += 1.0;
        lfg += std::log(p.data[t]);
      }
    const double fg_only = -0.5 * (static_cast<double>(T) / (1.0 + nfg)) * lfg;
    const double loss = balanced_ce(p, labels_from_mask(mask), 1.0, Setting::trimmed);
    worst = std::max(worst, std::abs(loss - fg_only) / std::max(1.0, std::abs(fg_only)));
    for (std::size_t t = 0; t < T; ++t)
      if (!mask[t]) p.data[t] = u(rng);
    invariant = invariant && balanced_ce(p, labels_from_mask(mask), 1.0, Setting::trimmed) == loss;
  }
  verdict(3, std::abs(worked - kWorkedLoss) <= kWorkedLossTol && worst <= 1e-12 && invariant,
          fmt("worked example loss %.6f (expected %.5f +/- %.0e); trimmed loss equals its foreground half (max rel diff %.1e) and ignores background "
              "scores (%s) over 1000 random inputs",
              worked, kWorkedLoss, kWorkedLossTol, worst, invariant ? "yes" : "no"));
}

std::vector<Candidate> random_candidates(Rng& rng) {
  std::uniform_int_distribution<std::size_t> count(0, 10);
  std::uniform_int_distribution<int> edge(0, 20);
  std::uniform_real_distribution<double> score(0.05, 1.0);
  std::vector<Candidate> out(count(rng));
  for (auto& c : out) {
    int a = edge(rng), b = edge(rng);
    if (a == b) ++b;
    if (a > b) std::swap(a, b);
    c = {static_cast<double>(a), static_cast<double>(b), std::round(score(rng) * 20.0) / 20.0};
  }
  return out;
}

void postprocessing_oracles() {
  Rng rng(4);
  std::size_t nms_mismatch = 0;
  double ap_err = 0.0;
  std::uniform_int_distribution<int> ngt(1, 3), edge(0, 20);
  for (std::size_t i = 0; i < kOracleInstances; ++i) {
    const auto c = random_candidates(rng);
    const double cutoff = i % 2 ? 0.0 : 0.3;
    if (soft_nms(c, 0.5, cutoff) != oracle::soft_nms(c, 0.5, cutoff)) ++nms_mismatch;
    std::vector<Segment> gts(static_cast<std::size_t>(ngt(rng)));
    for (auto& s : gts) {
      int a = edge(rng), b = edge(rng);
      if (a == b) ++b;
      if (a > b) std::swap(a, b);
      s = {static_cast<double>(a), static_cast<double>(b), "a"};
    }
    for (double th : {0.5, 0.6, 0.7, 0.8, 0.9}) ap_err = std::max(ap_err, std::abs(*average_precision(c, gts, th) - oracle::average_precision(c, gts, th)));
  }
  const auto dup = soft_nms({{0, 10, 0.9}, {0, 10, 0.8}}, 0.5, 0.0);
  const double decay = dup.size() == 2 ? dup[1].score : -1.0;
  verdict(4, nms_mismatch == 0 && ap_err <= kApTol && std::abs(decay - kDuplicateDecay) <= kDecayTol,
          fmt("soft-NMS mismatches %zu/%zu; AP max abs err %.1e (<= %.0e); duplicate decay %.5f (expected %.5f)", nms_mismatch, kOracleInstances,
              ap_err, kApTol, decay, kDuplicateDecay));
}

// ---------------------------------------------------------------------------

struct SeedRun {
  std::vector<double> qva, base;  // per-episode mean AP
  double qva_map = 0.0, base_map = 0.0;
  double rho = 0.0;
  fs::path checkpoint;
};

SeedRun train_and_score(std::uint64_t seed, std::size_t k) {
  const RunConfig c = resolve_config({}, {{"seed", std::to_string(seed)}, {"k_shot", std::to_string(k)}, {"tasks", std::to_string(kEvalTasks)}});
  const fs::path dir = g_out / fmt("k%zu_seed%llu", k, static_cast<unsigned long long>(seed));
  SeedRun s;
  const TrainResult tr = cmd_meta_train(c, dir / "train");
  s.checkpoint = dir / "train" / "checkpoint.qat";
  std::vector<double> loss;
  for (const auto& r : tr.log) loss.push_back(r.mean_loss);
  s.rho = spearman(loss);
  const EvalResult q = cmd_evaluate(c, s.checkpoint.string(), dir / "qva");
  RunConfig nc = c;
  nc.qva = false;
  const EvalResult b = cmd_evaluate(nc, "", dir / "no_qva");
  s.qva = episode_means(q.episodes);
  s.base = episode_means(b.episodes);
  s.qva_map = q.report.mean;
  s.base_map = b.report.mean;
  note(fmt("K=%zu seed %llu: QVA mean mAP %.4f, no-QVA %.4f, best epoch %zu, loss Spearman rho %.3f", k, static_cast<unsigned long long>(seed), s.qva_map,
           s.base_map, tr.best_epoch, s.rho));
  return s;
}

void ablation_and_shots() {
  const auto t0 = Clock::now();
  std::vector<SeedRun> five;
  for (auto seed : kSeeds) five.push_back(train_and_score(seed, 5));
  const double secs = seconds_since(t0);

  std::vector<double> diff;
  double qva = 0.0, base = 0.0;
  for (const auto& s : five) {
    for (std::size_t i = 0; i < s.qva.size(); ++i) diff.push_back(s.qva[i] - s.base[i]);
    qva += s.qva_map / 3.0;
    base += s.base_map / 3.0;
  }
  const auto [lo, hi] = bootstrap_ci(diff, 10000, 2024);
  verdict(5, lo > 0.0 && secs < kAblationSeconds,
          fmt("QVA %.4f vs no-QVA %.4f mean mAP (gain %+.4f, paired bootstrap 95%% CI [%+.4f, %+.4f] over %zu episodes); 3-seed run %.0f s (< %.0f s) on %zu "
              "worker(s)",
              qva, base, qva - base, lo, hi, diff.size(), secs, kAblationSeconds, worker_count()));
  bool downward = true;
  for (const auto& s : five) downward = downward && s.rho < 0.0;
  note(fmt("training loss trends downward on all seeds: %s", downward ? "yes" : "no"));

  // Cross-domain direction on the seed-0 checkpoint.
  {
    const RunConfig in = resolve_config({}, {{"seed", "0"}, {"tasks", std::to_string(kEvalTasks)}});
    const RunConfig shifted = resolve_config({}, {{"seed", "0"}, {"tasks", std::to_string(kEvalTasks)}, {"profile", "synthetic-shifted"}});
    const EvalResult x = cmd_cross_eval(in, shifted, five[0].checkpoint.string(), g_out / "cross_shifted");
    note(fmt("cross-domain synthetic -> synthetic-shifted mean mAP %.4f vs in-domain %.4f", x.report.mean, five[0].qva_map));
  }

  std::vector<SeedRun> one;
  for (auto seed : kSeeds) one.push_back(train_and_score(seed, 1));
  double q1 = 0.0, b1 = 0.0;
  for (const auto& s : one) {
    q1 += s.qva_map / 3.0;
    b1 += s.base_map / 3.0;
  }
  verdict(6, qva >= q1, fmt("5-shot mean mAP %.4f >= 1-shot %.4f (QVA, seeds 0,1,2); without QVA %.4f vs %.4f", qva, q1, base, b1));
}

// ---------------------------------------------------------------------------

bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::map<std::string, std::string> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file() && e.path().filename() != "timing.json") fa[fs::relative(e.path(), a).string()] = slurp(e.path());
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file() && e.path().filename() != "timing.json") fb[fs::relative(e.path(), b).string()] = slurp(e.path());
  if (fa.empty()) {
    why = "no output";
    return false;
  }
  if (fa != fb) {
    why = "outputs differ";
    return false;
  }
  return true;
}

void determinism() {
  const fs::path root = g_out / "determinism";
  fs::remove_all(root);
  const std::string small = "--seed 5 --set epochs=2 --set episodes_per_epoch=20 --set val_episodes=10";
  const std::vector<std::pair<std::string, std::string>> commands{
      {"meta-train", "meta-train " + small},
      {"evaluate", "evaluate --seed 5 --tasks 60 --checkpoint " + (root / "meta-train_a" / "checkpoint.qat").string()},
      {"evaluate-no-qva", "evaluate --seed 5 --tasks 60 --no-qva"},
      {"cross-eval", "cross-eval --seed 5 --tasks 60 --train-profile synthetic --test-profile synthetic-shifted --checkpoint " +
                         (root / "meta-train_a" / "checkpoint.qat").string()},
      {"gen-synthetic", "gen-synthetic --set synth.videos_per_class=4"},
  };
  bool ok = true;
  std::string detail;
  for (const auto& [name, args] : commands) {
    std::string why;
    const fs::path a = root / (name + "_a"), b = root / (name + "_b");
    const bool ran = run_cli(args + " --out " + a.string()) == 0 && run_cli(args + " --out " + b.string()) == 0;
    const bool same = ran && same_tree(a, b, why);
    if (!same) ok = false;
    detail += name + (same ? " identical; " : (ran ? " " + why + "; " : " failed to run; "));
  }
  {
    const fs::path a = root / "gradcheck_a", b = root / "gradcheck_b";
    run_cli("gradcheck --compositions 20 --out " + a.string());
    run_cli("gradcheck --compositions 20 --out " + b.string());
    std::string why;
    const bool same = same_tree(a, b, why);
    ok = ok && same;
    detail += std::string("gradcheck ") + (same ? "identical" : why);
  }
  verdict(7, ok, "byte-identical reruns: " + detail);
}

std::map<std::string, std::string> resolved_for(const std::string& profile) {
  const fs::path dir = g_out / "protocol" / profile;
  std::map<std::string, std::string> kv;
  if (run_cli("evaluate --no-qva --tasks 1 --profile " + profile + " --out " + dir.string()) != 0) return kv;
  std::istringstream is(slurp(dir / "config.resolved"));
  for (const auto& [k, v] : parse_key_values(is)) kv[k] = v;
  return kv;
}

void protocol_conformance() {
  struct Expect {
    std::string profile;
    std::map<std::string, std::string> values;
  };
  const std::map<std::string, std::string> shared{{"meta_lr", "0.004"},     {"epochs", "50"},
                                                  {"episodes_per_epoch", "200"}, {"qat.dim", "256"},
                                                  {"eval.tiou_grid", "0.5,0.6,0.7,0.8,0.9"}};
  const std::vector<Expect> expects{
      {"activitynet-like", {{"snippets", "100"}, {"eval.nms_threshold", "0.7"}, {"eval.top_n", "100"}}},
      {"thumos-like", {{"snippets", "256"}, {"eval.nms_threshold", "0.6"}, {"eval.top_n", "200"}}},
      {"synthetic", {{"snippets", "100"}, {"eval.nms_threshold", "0.7"}, {"eval.top_n", "100"}}},
  };
  bool ok = true;
  std::string bad;
  for (const auto& e : expects) {
    const auto kv = resolved_for(e.profile);
    auto want = e.values;
    want.insert(shared.begin(), shared.end());
    for (const auto& [k, v] : want) {
      const auto it = kv.find(k);
      if (it == kv.end() || it->second != v) {
        ok = false;
        bad += " " + e.profile + ":" + k + "=" + (it == kv.end() ? "<missing>" : it->second);
      }
    }
  }
  verdict(8, ok,
          ok ? "resolved configs carry T=100/256, NMS 0.7/0.6, top-100/200, lr 0.004, 50x200 episodes, d=256, mAP grid 0.5-0.9"
             : "mismatched constants:" + bad);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) g_out = argv[1];
  fs::create_directories(g_out);
  const auto t0 = Clock::now();
  try {
    gradient_fidelity();
    qat_identity();
    loss_semantics();
    postprocessing_oracles();
    ablation_and_shots();
    determinism();
    protocol_conformance();
  } catch (const std::exception& e) {
    std::printf("FAIL aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s: %d criterion/criteria failed; total %.0f s\n", g_failures ? "FAILED" : "ALL PASS", g_failures, seconds_since(t0));
  return g_failures ? 1 : 0;
}
