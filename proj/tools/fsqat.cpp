// fsqat command-line harness.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fsqat/fsqat.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> k_shot;
  std::optional<std::string> setting;
  std::optional<std::size_t> tasks;
  std::optional<std::string> profile;
  bool no_qva = false;
  std::string out = "out";
};

void add_common(CLI::App* cmd, CommonFlags& f, bool eval_flags) {
  cmd->add_option("--config", f.config, "key = value config file");
  cmd->add_option("--set", f.sets, "override one config key (key=value), repeatable");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--k-shot", f.k_shot, "support videos per episode")->check(CLI::IsMember({1, 5}));
  cmd->add_option("--setting", f.setting, "support labelling")->check(CLI::IsMember({"trimmed", "untrimmed"}));
  cmd->add_option("--profile", f.profile, "dataset profile");
  cmd->add_option("--out", f.out, "output directory");
  if (eval_flags) {
    cmd->add_option("--tasks", f.tasks, "number of evaluation episodes");
    cmd->add_flag("--no-qva", f.no_qva, "skip query adaptation and classify with the support-fitted weights");
  }
}

fsqat::KeyValues overrides_from(const CommonFlags& f) {
  fsqat::KeyValues kv;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw fsqat::ConfigError("--set expects key=value, got '" + s + "'");
    kv.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  if (f.profile) kv.emplace_back("profile", *f.profile);
  if (f.seed) kv.emplace_back("seed", std::to_string(*f.seed));
  if (f.k_shot) kv.emplace_back("k_shot", std::to_string(*f.k_shot));
  if (f.setting) kv.emplace_back("setting", *f.setting);
  if (f.tasks) kv.emplace_back("tasks", std::to_string(*f.tasks));
  if (f.no_qva) kv.emplace_back("qva", "false");
  return kv;
}

fsqat::RunConfig resolve(const CommonFlags& f, const std::string& profile_override = {}) {
  fsqat::KeyValues file;
  if (!f.config.empty()) file = fsqat::read_config_file(f.config);
  fsqat::KeyValues over = overrides_from(f);
  if (!profile_override.empty()) over.emplace_back("profile", profile_override);
  return fsqat::resolve_config(file, over);
}

void print_report(const fsqat::MapReport& r) {
  std::cout << fsqat::map_report_csv(r);
  if (r.excluded) std::cout << "# " << r.excluded << " episode(s) without ground truth excluded\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot temporal action localization with query-adaptive transformers"};
  app.require_subcommand(1);

  CommonFlags train_f, eval_f, cross_f, gen_f;
  std::string eval_ckpt, cross_ckpt, train_profile, test_profile;

  auto* train = app.add_subcommand("meta-train", "meta-train the query-adaptive transformer");
  add_common(train, train_f, false);

  auto* eval = app.add_subcommand("evaluate", "score a checkpoint on random test episodes");
  add_common(eval, eval_f, true);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file (optional with --no-qva)");

  auto* cross = app.add_subcommand("cross-eval", "score a checkpoint trained on one profile against another");
  add_common(cross, cross_f, true);
  cross->add_option("--checkpoint", cross_ckpt, "checkpoint trained on the train profile");
  cross->add_option("--train-profile", train_profile, "profile the checkpoint was trained on")->required();
  cross->add_option("--test-profile", test_profile, "profile supplying the test episodes")->required();

  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-6;
  std::size_t gc_compositions = 100;
  std::string gc_inject, gc_out;
  auto* gc = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  gc->add_option("--seed", gc_seed, "seed for the random checks");
  gc->add_option("--tol", gc_tol, "maximum relative error");
  gc->add_option("--compositions", gc_compositions, "number of random primitive compositions");
  gc->add_option("--inject-fault", gc_inject, "scale the analytic gradient of this block by 1.02");
  gc->add_option("--out", gc_out, "directory for gradcheck.txt");

  auto* gen = app.add_subcommand("gen-synthetic", "write the synthetic benchmark as a dataset directory");
  add_common(gen, gen_f, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      const auto cfg = resolve(train_f);
      auto tr = fsqat::cmd_meta_train(cfg, train_f.out, &std::cerr);
      std::cout << "best epoch " << tr.best_epoch << "; checkpoint written to " << train_f.out << "/checkpoint.qat\n";
    } else if (eval->parsed()) {
      print_report(fsqat::cmd_evaluate(resolve(eval_f), eval_ckpt, eval_f.out).report);
    } else if (cross->parsed()) {
      const auto train_cfg = resolve(cross_f, train_profile);
      const auto test_cfg = resolve(cross_f, test_profile);
      print_report(fsqat::cmd_cross_eval(train_cfg, test_cfg, cross_ckpt, cross_f.out).report);
    } else if (gc->parsed()) {
      const auto s = fsqat::cmd_gradcheck(gc_seed, gc_tol, gc_compositions, gc_inject);
      std::cout << s.text;
      if (!gc_out.empty()) {
        std::filesystem::create_directories(gc_out);
        fsqat::write_text(std::filesystem::path(gc_out) / "gradcheck.txt", s.text);
      }
      return s.passed ? 0 : 1;
    } else if (gen->parsed()) {
      const auto n = fsqat::cmd_gen_synthetic(resolve(gen_f), gen_f.out);
      std::cout << "wrote " << n << " videos to " << gen_f.out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
