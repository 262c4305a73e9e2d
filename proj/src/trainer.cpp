#include "frsp/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "frsp/checkpoint.hpp"
#include "frsp/flops.hpp"

namespace frsp {

std::vector<std::size_t> PruneSchedule::event_epochs() const {
  std::vector<std::size_t> out;
  for (std::size_t e = 1; e <= epochs; ++e) {
    if (should_prune(e, *this)) out.push_back(e);
  }
  return out;
}

bool should_prune(std::size_t epoch, const PruneSchedule& s) {
  return s.every > 0 && epoch > 0 && epoch % s.every == 0 && epoch < s.until;
}

float LrSchedule::rate(std::size_t epoch) const {
  float lr = initial;
  for (std::size_t m : milestones) {
    if (epoch > m) lr /= divisor;
  }
  return lr;
}

double train_epoch(ModelGraph& model, OptimState& optim, const Dataset& data,
                   std::size_t batch, std::mt19937_64& rng, std::size_t crop_pad, bool flip) {
  if (data.size() == 0) throw std::invalid_argument("train_epoch: empty dataset");
  if (batch == 0) throw std::invalid_argument("train_epoch: batch must be positive");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  double loss_sum = 0.0;
  for (std::size_t at = 0; at < order.size(); at += batch) {
    const std::span<const std::size_t> idx(order.data() + at, std::min(batch, order.size() - at));
    Tensor x = data.batch(idx);
    augment(x, crop_pad, flip, rng);
    const std::vector<int> labels = data.batch_labels(idx);
    const ActivationTrace trace = forward_train(model, x);
    const ops::XentResult xent = ops::softmax_xent(trace.outputs.back(), labels);
    loss_sum += xent.loss * double(idx.size());
    const Gradients g = backward(model, trace, xent.grad);

    std::vector<ParamGrad> params;
    for (auto& [key, tensor] : model.parameters()) {
      const auto id = static_cast<std::size_t>(key.layer);
      const Tensor& grad = key.slot == ParamSlot::Weight ? g.weight[id] : g.bias[id];
      params.push_back({key, tensor, &grad});
    }
    sgd_step(params, optim);
  }
  return loss_sum / double(data.size());
}

EvalResult evaluate(const ModelGraph& model, const Dataset& data, std::size_t batch) {
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  EvalResult r;
  r.per_class = scoring::classwise_accuracy(model, data, batch);
  std::vector<std::size_t> count(model.classes(), 0);
  for (int y : data.labels) ++count[static_cast<std::size_t>(y)];
  double correct = 0.0;
  for (std::size_t p = 0; p < count.size(); ++p) correct += r.per_class[p] * double(count[p]);
  r.accuracy = correct / double(data.size());
  return r;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << text;
}

std::string victims_text(const PruneEvent& e) {
  std::string s;
  for (std::size_t i = 0; i < e.victims.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(e.victims[i].layer) + ":" + std::to_string(e.victims[i].channel);
  }
  return s;
}

}  // namespace

RunResult run(const RunConfig& cfg, const DataSplits& data, bool write_outputs,
              const RunHooks& hooks) {
  validate(cfg);
  const PruneSchedule schedule{cfg.optim.epochs, cfg.prune.until, cfg.prune.every,
                               cfg.prune.channels};
  const LrSchedule lr{cfg.optim.lr, cfg.optim.milestones, cfg.optim.lr_divisor};

  RunResult res;
  res.model = build_model(cfg.arch, cfg.seed);
  res.optim.hyper = {cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay};
  const cost::CostReport base = cost::count_costs(res.model);
  res.baseline_params = base.params;
  res.baseline_flops = base.flops;
  std::mt19937_64 rng(cfg.seed);

  const std::filesystem::path dir(cfg.out_dir);
  if (write_outputs) std::filesystem::create_directories(dir);
  std::string metrics = "epoch,lr,train_loss,test_acc,params,flops,event_flag\n";
  std::string events = "epoch,status,removed,params_after,flops_after,scoring_flops,rho,victims\n";
  std::string timing = "epoch,train_seconds,search_seconds\n";

  auto checkpoint = [&](const std::string& name, std::size_t epoch) {
    if (!write_outputs || !cfg.checkpoints) return;
    save_checkpoint((dir / name).string(), cfg.arch, res.model, &res.optim,
                    static_cast<std::int64_t>(epoch), rng_text(rng));
  };

  for (std::size_t epoch = 1; epoch <= cfg.optim.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr.rate(epoch);
    res.optim.hyper.lr = rec.lr;
    const auto t0 = Clock::now();
    rec.train_loss = train_epoch(res.model, res.optim, data.train, cfg.optim.batch, rng,
                                 cfg.data.crop_pad, cfg.data.flip);
    rec.train_seconds = seconds_since(t0);

    double search_seconds = 0.0;
    if (should_prune(epoch, schedule) && schedule.channels > 0) {
      rec.event = true;
      PruneEvent ev;
      ev.epoch = epoch;
      const auto s0 = Clock::now();
      const std::uint64_t fwd = cost::count_flops(res.model);
      scoring::ScoringConfig sc;
      sc.criterion = cfg.prune.criterion;
      sc.lrp = cfg.prune.lrp();
      sc.weighting = cfg.prune.weighting;
      sc.subset = cfg.prune.subset;
      sc.seed = cfg.seed * 1000003ULL + epoch;
      sc.batch = cfg.prune.score_batch;
      try {
        const FlopScope scope;
        const scoring::ScoreResult scores = scoring::score_model(res.model, data.train, sc);
        const std::uint64_t scoring_flops = scope.elapsed();
        ev.victims = scoring::select_prune_set(scores.table, schedule.channels, cfg.prune.ranking);
        for (const ChannelRef& v : ev.victims) {
          for (const scoring::ScoreEntry& e : scores.table) {
            if (e.ref == v) ev.victim_scores.push_back(e.score);
          }
        }
        surgery_remove_channels(res.model, ev.victims, &res.optim);
        ev.executed = true;
        search_seconds = seconds_since(s0);
        ev.effort = cost::effort_factor(scoring_flops, fwd, data.train.size(), search_seconds);
      } catch (const std::exception& e) {
        ev.failure = e.what();
        ev.victims.clear();
        ev.victim_scores.clear();
        search_seconds = seconds_since(s0);
      }
      const cost::CostReport after = cost::count_costs(res.model);
      ev.params_after = after.params;
      ev.flops_after = after.flops;
      events += std::to_string(epoch) + "," + (ev.executed ? "pruned" : "skipped") + "," +
                std::to_string(ev.victims.size()) + "," + std::to_string(ev.params_after) + "," +
                std::to_string(ev.flops_after) + "," + std::to_string(ev.effort.scoring_flops) +
                "," + fixed(ev.effort.rho) + "," + victims_text(ev) + "\n";
      if (hooks.on_event) hooks.on_event(ev);
      res.events.push_back(std::move(ev));
    }

    const cost::CostReport now = cost::count_costs(res.model);
    rec.params = now.params;
    rec.flops = now.flops;
    rec.test_acc = evaluate(res.model, data.test).accuracy;
    metrics += std::to_string(epoch) + "," + fixed(rec.lr, 8) + "," + fixed(rec.train_loss) +
               "," + fixed(rec.test_acc) + "," + std::to_string(rec.params) + "," +
               std::to_string(rec.flops) + "," + (rec.event ? "1" : "0") + "\n";
    timing += std::to_string(epoch) + "," + fixed(rec.train_seconds, 3) + "," +
              fixed(search_seconds, 3) + "\n";
    if (hooks.on_epoch) hooks.on_epoch(rec);
    res.history.push_back(rec);
    if (rec.event) checkpoint("epoch" + std::to_string(epoch) + ".frsp", epoch);
    if (write_outputs) {
      write_file(dir / "metrics.csv", metrics);
      write_file(dir / "events.csv", events);
      write_file(dir / "timing.csv", timing);
    }
  }
  checkpoint("final.frsp", cfg.optim.epochs);
  return res;
}

std::vector<CompareRow> run_comparison(const RunConfig& cfg, const DataSplits& data,
                                       const std::vector<scoring::Criterion>& criteria,
                                       const std::vector<std::uint64_t>& seeds,
                                       bool write_outputs, const RunHooks& hooks) {
  std::vector<CompareRow> rows;
  auto one = [&](const std::string& name, RunConfig rc, std::uint64_t seed) {
    rc.seed = seed;
    rc.out_dir = (std::filesystem::path(cfg.out_dir) / (name + "_s" + std::to_string(seed))).string();
    const RunResult r = run(rc, data, write_outputs, hooks);
    CompareRow row;
    row.criterion = name;
    row.seed = seed;
    row.final_acc = r.history.back().test_acc;
    row.params = r.history.back().params;
    row.flops = r.history.back().flops;
    for (const PruneEvent& e : r.events) row.removed += e.victims.size();
    rows.push_back(row);
  };
  for (std::uint64_t seed : seeds) {
    RunConfig base = cfg;
    base.prune.channels = 0;
    one("baseline", base, seed);
    for (scoring::Criterion c : criteria) {
      RunConfig rc = cfg;
      rc.prune.criterion = c;
      one(std::string(scoring::criterion_name(c)), rc, seed);
    }
  }
  if (write_outputs) write_file(std::filesystem::path(cfg.out_dir) / "compare.csv", compare_csv(rows));
  return rows;
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
  std::string s = "criterion,seed,final_acc,params,flops,removed\n";
  for (const CompareRow& r : rows) {
    s += r.criterion + "," + std::to_string(r.seed) + "," + fixed(r.final_acc) + "," +
         std::to_string(r.params) + "," + std::to_string(r.flops) + "," +
         std::to_string(r.removed) + "\n";
  }
  return s;
}

}  // namespace frsp
