// frsp: train with gradual channel pruning, dump channel scores, evaluate
// and compare checkpoints.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "frsp/checkpoint.hpp"
#include "frsp/config.hpp"
#include "frsp/cost.hpp"
#include "frsp/flops.hpp"
#include "frsp/scoring.hpp"
#include "frsp/simd.hpp"
#include "frsp/trainer.hpp"

namespace fs = std::filesystem;
using namespace frsp;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

RunConfig load(const Common& c) {
  RunConfig cfg = parse_config_file(c.config);
  if (c.seed_set) cfg.seed = c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  return cfg;
}

Checkpoint load_matching(const std::string& path, const RunConfig& cfg) {
  Checkpoint ck = load_checkpoint(path);
  if (!(ck.arch == cfg.arch)) {
    throw ConfigError(path + ": checkpoint architecture does not match [arch] of the config");
  }
  return ck;
}

void print_epoch(const EpochRecord& r) {
  std::fprintf(stderr, "epoch %3zu  lr %.5f  loss %.4f  test %.4f  params %llu%s  (%.1fs)\n",
               r.epoch, r.lr, r.train_loss, r.test_acc,
               static_cast<unsigned long long>(r.params), r.event ? "  [pruned]" : "",
               r.train_seconds);
}

void print_event(const PruneEvent& e) {
  if (e.executed) {
    std::fprintf(stderr, "  prune event at epoch %zu: %zu channels, rho %.3f, %.2fs\n", e.epoch,
                 e.victims.size(), e.effort.rho, e.effort.search_seconds);
  } else {
    std::fprintf(stderr, "  prune event at epoch %zu skipped: %s\n", e.epoch, e.failure.c_str());
  }
}

int cmd_train(const Common& c) {
  const RunConfig cfg = load(c);
  const DataSplits data = load_dataset(cfg.data);
  std::fprintf(stderr, "kernels: %s\n", std::string(simd::isa_name(simd::active().isa)).c_str());
  fs::create_directories(cfg.out_dir);
  { std::ofstream(fs::path(cfg.out_dir) / "config.cfg") << to_text(cfg); }
  const RunResult r = run(cfg, data, true, {print_epoch, print_event});
  std::printf("final test accuracy %.4f, params %llu -> %llu (%.2f%% drop), flops %llu -> %llu "
              "(%.2f%% drop)\n",
              r.history.back().test_acc, static_cast<unsigned long long>(r.baseline_params),
              static_cast<unsigned long long>(r.history.back().params),
              cost::percent_drop(r.baseline_params, r.history.back().params),
              static_cast<unsigned long long>(r.baseline_flops),
              static_cast<unsigned long long>(r.history.back().flops),
              cost::percent_drop(r.baseline_flops, r.history.back().flops));
  return 0;
}

int cmd_score(const Common& c, const std::string& checkpoint, const std::string& criterion) {
  RunConfig cfg = load(c);
  if (!criterion.empty()) cfg.prune.criterion = scoring::parse_criterion(criterion);
  const Checkpoint ck = load_matching(checkpoint, cfg);
  const DataSplits data = load_dataset(cfg.data);
  scoring::ScoringConfig sc;
  sc.criterion = cfg.prune.criterion;
  sc.lrp = cfg.prune.lrp();
  sc.weighting = cfg.prune.weighting;
  sc.subset = cfg.prune.subset;
  sc.seed = cfg.seed;
  sc.batch = cfg.prune.score_batch;
  const scoring::ScoreResult res = scoring::score_model(ck.model, data.train, sc);
  fs::create_directories(cfg.out_dir);
  const fs::path out = fs::path(cfg.out_dir) /
                       ("scores_" + std::string(scoring::criterion_name(sc.criterion)) + ".csv");
  std::ofstream f(out);
  f << "layer_id,channel,score,criterion\n";
  char buf[32];
  for (const scoring::ScoreEntry& e : res.table) {
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(e.score));
    f << e.ref.layer << ',' << e.ref.channel << ',' << buf << ','
      << scoring::criterion_name(sc.criterion) << '\n';
  }
  std::printf("%zu channels scored -> %s\n", res.table.size(), out.string().c_str());
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
  const RunConfig cfg = load(c);
  const Checkpoint ck = load_matching(checkpoint, cfg);
  const DataSplits data = load_dataset(cfg.data);
  const EvalResult r = evaluate(ck.model, data.test);
  std::printf("checkpoint %s (epoch %lld)\n", checkpoint.c_str(),
              static_cast<long long>(ck.epoch));
  std::printf("test accuracy %.4f\n", r.accuracy);
  for (std::size_t p = 0; p < r.per_class.size(); ++p) {
    std::printf("  class %zu  %.4f\n", p, r.per_class[p]);
  }
  return 0;
}

int cmd_report(const Common& c, const std::string& baseline, const std::string& pruned) {
  const RunConfig cfg = load(c);
  const Checkpoint b = load_matching(baseline, cfg);
  const Checkpoint p = load_matching(pruned, cfg);
  const cost::CostReport cb = cost::count_costs(b.model), cp = cost::count_costs(p.model);
  std::printf("%-10s %14s %14s %10s\n", "", "baseline", "pruned", "drop");
  std::printf("%-10s %14.4fM %13.4fM %9.2f%%\n", "params", double(cb.params) / 1e6,
              double(cp.params) / 1e6, cost::percent_drop(cb.params, cp.params));
  std::printf("%-10s %13.4fe9 %12.4fe9 %9.2f%%\n", "FLOPs", double(cb.flops) / 1e9,
              double(cp.flops) / 1e9, cost::percent_drop(cb.flops, cp.flops));

  const std::size_t train = cfg.data.train_size ? cfg.data.train_size : 50000;
  const std::size_t samples = cfg.prune.subset ? std::min(cfg.prune.subset, train) : train;
  const cost::EffortReport eb = cost::analytic_effort(b.model, cfg.prune.lrp(), samples, train);
  const cost::EffortReport ep = cost::analytic_effort(p.model, cfg.prune.lrp(), samples, train);
  std::printf("\neffort factor (scoring FLOPs / 3 x forward FLOPs per epoch)\n");
  std::printf("  analytic, baseline architecture  %.3f\n", eb.rho);
  std::printf("  analytic, pruned architecture    %.3f\n", ep.rho);

  const fs::path events = fs::path(cfg.out_dir) / "events.csv";
  std::ifstream ev(events);
  if (ev) {
    std::string line;
    std::getline(ev, line);
    while (std::getline(ev, line)) {
      std::stringstream ss(line);
      std::string epoch, status, removed, pa, fa, sf, rho;
      std::getline(ss, epoch, ',');
      std::getline(ss, status, ',');
      std::getline(ss, removed, ',');
      std::getline(ss, pa, ',');
      std::getline(ss, fa, ',');
      std::getline(ss, sf, ',');
      std::getline(ss, rho, ',');
      std::printf("  measured, event at epoch %-4s    %s (%s)\n", epoch.c_str(), rho.c_str(),
                  status.c_str());
    }
  }
  std::printf("  (reference GPU-measured range: 1.3 - 1.7)\n");
  return 0;
}

int cmd_compare(const Common& c, const std::string& seeds_text) {
  const RunConfig cfg = load(c);
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(seeds_text);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (!tok.empty()) seeds.push_back(std::stoull(tok));
  }
  if (seeds.empty()) seeds.push_back(cfg.seed);
  const DataSplits data = load_dataset(cfg.data);
  const std::vector<scoring::Criterion> criteria{
      scoring::Criterion::FeatureRelevance, scoring::Criterion::L1, scoring::Criterion::L2,
      scoring::Criterion::Random};
  RunHooks hooks;
  hooks.on_event = print_event;
  const auto rows = run_comparison(cfg, data, criteria, seeds, true, hooks);
  std::fputs(compare_csv(rows).c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Activation buffers are a few hundred KB; keep them off mmap so every
  // step does not page-fault fresh memory.
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 128 << 20);
#endif
  CLI::App app{"Gradual channel pruning driven by feature relevance"};
  app.require_subcommand(1);
  Common common;
  std::string checkpoint, criterion, baseline, pruned, seeds;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config, "run configuration file")->required()
        ->check(CLI::ExistingFile);
    sub->add_option("-o,--out", common.out, "output directory (overrides [run] out_dir)");
    sub->add_option("-s,--seed", common.seed, "seed (overrides [run] seed)")
        ->each([&](const std::string&) { common.seed_set = true; });
  };

  CLI::App* train = app.add_subcommand("train", "run training with prune events");
  add_common(train);
  CLI::App* score = app.add_subcommand("score", "dump channel scores of a checkpoint as CSV");
  add_common(score);
  score->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  score->add_option("--criterion", criterion, "feature_relevance | l1 | l2 | random");
  CLI::App* eval = app.add_subcommand("eval", "test accuracy of a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  CLI::App* report = app.add_subcommand("report", "cost and effort report for two checkpoints");
  add_common(report);
  report->add_option("--baseline", baseline)->required()->check(CLI::ExistingFile);
  report->add_option("--pruned", pruned)->required()->check(CLI::ExistingFile);
  CLI::App* compare = app.add_subcommand("compare", "every criterion plus baseline, per seed");
  add_common(compare);
  compare->add_option("--seeds", seeds, "comma-separated seeds (overrides [run] seed)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(common);
    if (*score) return cmd_score(common, checkpoint, criterion);
    if (*eval) return cmd_eval(common, checkpoint);
    if (*report) return cmd_report(common, baseline, pruned);
    if (*compare) return cmd_compare(common, seeds);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
