#include "frsp/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace frsp {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Ctx {
  std::string source;
  std::size_t line = 0;
  std::string key;

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(source + ":" + std::to_string(line) + ": " + key + ": " + what);
  }
};

std::size_t as_size(const std::string& v, const Ctx& c) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    c.fail("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

float as_float(const std::string& v, const Ctx& c) {
  try {
    std::size_t used = 0;
    const float f = std::stof(v, &used);
    if (used != v.size() || !std::isfinite(f)) throw std::invalid_argument(v);
    return f;
  } catch (const std::exception&) {
    c.fail("expected a number, got '" + v + "'");
  }
}

bool as_bool(const std::string& v, const Ctx& c) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  c.fail("expected true or false, got '" + v + "'");
}

std::vector<std::string> as_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string tok; std::getline(ss, tok, ',');) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

std::vector<std::size_t> as_sizes(const std::string& v, const Ctx& c) {
  std::vector<std::size_t> out;
  for (const std::string& t : as_list(v)) out.push_back(as_size(t, c));
  return out;
}

std::vector<float> as_floats(const std::string& v, const Ctx& c) {
  std::vector<float> out;
  for (const std::string& t : as_list(v)) out.push_back(as_float(t, c));
  return out;
}

template <typename E>
E as_enum(const std::string& v, const Ctx& c, std::initializer_list<std::pair<const char*, E>> opts) {
  std::string names;
  for (const auto& [name, value] : opts) {
    if (v == name) return value;
    names += names.empty() ? name : std::string(" | ") + name;
  }
  c.fail("expected " + names + ", got '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const Ctx&)>;

const std::map<std::string, std::map<std::string, Setter>>& grammar() {
  static const std::map<std::string, std::map<std::string, Setter>> g = {
      {"arch",
       {
           {"family", [](RunConfig& r, const std::string& v, const Ctx&) { r.arch.family = v; }},
           {"depth", [](RunConfig& r, const std::string& v, const Ctx& c) { r.arch.depth = as_size(v, c); }},
           {"input", [](RunConfig& r, const std::string& v, const Ctx& c) { r.arch.input = as_sizes(v, c); }},
           {"classes", [](RunConfig& r, const std::string& v, const Ctx& c) { r.arch.classes = as_size(v, c); }},
           {"widths", [](RunConfig& r, const std::string& v, const Ctx& c) { r.arch.widths = as_sizes(v, c); }},
           {"plan", [](RunConfig& r, const std::string& v, const Ctx&) { r.arch.plan = v; }},
           {"block", [](RunConfig& r, const std::string& v, const Ctx&) { r.arch.block = v; }},
           {"batch_norm", [](RunConfig& r, const std::string& v, const Ctx& c) { r.arch.batch_norm = as_bool(v, c); }},
           {"conv_bias", [](RunConfig& r, const std::string& v, const Ctx& c) { r.arch.conv_bias = as_bool(v, c); }},
       }},
      {"data",
       {
           {"format", [](RunConfig& r, const std::string& v, const Ctx& c) {
              r.data.format = as_enum<DataFormat>(v, c, {{"synthetic", DataFormat::Synthetic},
                                                         {"idx", DataFormat::Idx},
                                                         {"cifar", DataFormat::CifarBinary}});
            }},
           {"train_path", [](RunConfig& r, const std::string& v, const Ctx&) { r.data.train_path = v; }},
           {"test_path", [](RunConfig& r, const std::string& v, const Ctx&) { r.data.test_path = v; }},
           {"seed", [](RunConfig& r, const std::string& v, const Ctx& c) { r.data.seed = as_size(v, c); }},
           {"train_size", [](RunConfig& r, const std::string& v, const Ctx& c) { r.data.train_size = as_size(v, c); }},
           {"test_size", [](RunConfig& r, const std::string& v, const Ctx& c) { r.data.test_size = as_size(v, c); }},
           {"shape", [](RunConfig& r, const std::string& v, const Ctx& c) { r.data.sample_shape = as_sizes(v, c); }},
           {"classes", [](RunConfig& r, const std::string& v, const Ctx& c) { r.data.classes = as_size(v, c); }},
           {"noise", [](RunConfig& r, const std::string& v, const Ctx& c) { r.data.noise = as_float(v, c); }},
           {"mean", [](RunConfig& r, const std::string& v, const Ctx& c) { r.data.mean = as_floats(v, c); }},
           {"std", [](RunConfig& r, const std::string& v, const Ctx& c) { r.data.stddev = as_floats(v, c); }},
           {"crop_pad", [](RunConfig& r, const std::string& v, const Ctx& c) { r.data.crop_pad = as_size(v, c); }},
           {"flip", [](RunConfig& r, const std::string& v, const Ctx& c) { r.data.flip = as_bool(v, c); }},
       }},
      {"optim",
       {
           {"lr", [](RunConfig& r, const std::string& v, const Ctx& c) { r.optim.lr = as_float(v, c); }},
           {"milestones", [](RunConfig& r, const std::string& v, const Ctx& c) { r.optim.milestones = as_sizes(v, c); }},
           {"lr_divisor", [](RunConfig& r, const std::string& v, const Ctx& c) { r.optim.lr_divisor = as_float(v, c); }},
           {"momentum", [](RunConfig& r, const std::string& v, const Ctx& c) { r.optim.momentum = as_float(v, c); }},
           {"weight_decay", [](RunConfig& r, const std::string& v, const Ctx& c) { r.optim.weight_decay = as_float(v, c); }},
           {"batch", [](RunConfig& r, const std::string& v, const Ctx& c) { r.optim.batch = as_size(v, c); }},
           {"epochs", [](RunConfig& r, const std::string& v, const Ctx& c) { r.optim.epochs = as_size(v, c); }},
       }},
      {"prune",
       {
           {"until", [](RunConfig& r, const std::string& v, const Ctx& c) { r.prune.until = as_size(v, c); }},
           {"every", [](RunConfig& r, const std::string& v, const Ctx& c) { r.prune.every = as_size(v, c); }},
           {"channels", [](RunConfig& r, const std::string& v, const Ctx& c) { r.prune.channels = as_size(v, c); }},
           {"criterion", [](RunConfig& r, const std::string& v, const Ctx& c) {
              try {
                r.prune.criterion = scoring::parse_criterion(v);
              } catch (const std::invalid_argument& e) {
                c.fail(e.what());
              }
            }},
           {"alpha", [](RunConfig& r, const std::string& v, const Ctx& c) { r.prune.alpha = as_float(v, c); }},
           {"beta", [](RunConfig& r, const std::string& v, const Ctx& c) { r.prune.beta = as_float(v, c); }},
           {"eps", [](RunConfig& r, const std::string& v, const Ctx& c) { r.prune.eps = as_float(v, c); }},
           {"pool_rule", [](RunConfig& r, const std::string& v, const Ctx& c) {
              r.prune.pool_rule = as_enum<lrp::PoolRule>(
                  v, c, {{"winner", lrp::PoolRule::WinnerTakeAll}, {"proportional", lrp::PoolRule::Proportional}});
            }},
           {"bn_handling", [](RunConfig& r, const std::string& v, const Ctx& c) {
              r.prune.bn_handling = as_enum<lrp::BnHandling>(
                  v, c, {{"fold", lrp::BnHandling::Fold}, {"identity", lrp::BnHandling::Identity}});
            }},
           {"weighting", [](RunConfig& r, const std::string& v, const Ctx& c) {
              r.prune.weighting = as_enum<scoring::Weighting>(
                  v, c, {{"accuracy", scoring::Weighting::Accuracy}, {"uniform", scoring::Weighting::Uniform}});
            }},
           {"ranking", [](RunConfig& r, const std::string& v, const Ctx& c) {
              r.prune.ranking = as_enum<scoring::Ranking>(
                  v, c, {{"signed", scoring::Ranking::Signed}, {"absolute", scoring::Ranking::Absolute}});
            }},
           {"subset", [](RunConfig& r, const std::string& v, const Ctx& c) { r.prune.subset = as_size(v, c); }},
           {"score_batch", [](RunConfig& r, const std::string& v, const Ctx& c) { r.prune.score_batch = as_size(v, c); }},
       }},
      {"run",
       {
           {"seed", [](RunConfig& r, const std::string& v, const Ctx& c) { r.seed = as_size(v, c); }},
           {"out_dir", [](RunConfig& r, const std::string& v, const Ctx&) { r.out_dir = v; }},
           {"checkpoints", [](RunConfig& r, const std::string& v, const Ctx& c) { r.checkpoints = as_bool(v, c); }},
       }},
  };
  return g;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string join_floats(const std::vector<float>& v) {
  std::ostringstream os;
  os.precision(9);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::string fmt(float f) {
  std::ostringstream os;
  os.precision(9);
  os << f;
  return os.str();
}

}  // namespace

void validate(const RunConfig& cfg, const std::string& source) {
  auto fail = [&](const std::string& what) { throw ConfigError(source + ": " + what); };
  try {
    (void)cfg.prune.lrp();
  } catch (const std::invalid_argument& e) {
    fail(std::string("prune.alpha/prune.beta: ") + e.what());
  }
  if (cfg.optim.epochs == 0) fail("optim.epochs must be at least 1");
  if (cfg.prune.until > cfg.optim.epochs) {
    fail("prune.until (" + std::to_string(cfg.prune.until) + ") exceeds optim.epochs (" +
         std::to_string(cfg.optim.epochs) + ")");
  }
  if (cfg.prune.every == 0) fail("prune.every must be at least 1");
  if (cfg.optim.batch == 0) fail("optim.batch must be at least 1");
  if (cfg.prune.score_batch == 0) fail("prune.score_batch must be at least 1");
  if (!(cfg.optim.lr > 0.0f)) fail("optim.lr must be positive");
  if (!(cfg.optim.lr_divisor > 0.0f)) fail("optim.lr_divisor must be positive");
  for (std::size_t i = 1; i < cfg.optim.milestones.size(); ++i) {
    if (cfg.optim.milestones[i] <= cfg.optim.milestones[i - 1]) {
      fail("optim.milestones must be strictly increasing");
    }
  }
  if (cfg.arch.classes != cfg.data.classes) {
    fail("arch.classes (" + std::to_string(cfg.arch.classes) + ") differs from data.classes (" +
         std::to_string(cfg.data.classes) + ")");
  }
  if (cfg.data.format == DataFormat::Synthetic && cfg.arch.input != cfg.data.sample_shape) {
    fail("arch.input " + shape_str(cfg.arch.input) + " differs from data.shape " +
         shape_str(cfg.data.sample_shape));
  }
}

RunConfig parse_config_text(const std::string& text, const std::string& source) {
  RunConfig cfg;
  // Keys omitted from the file keep the CIFAR defaults for optimizer and
  // prune blocks; an empty prune block therefore means x = 0.
  const auto& g = grammar();
  std::istringstream in(text);
  std::string section;
  std::set<std::string> seen;
  Ctx ctx{source, 0, ""};
  for (std::string raw; std::getline(in, raw);) {
    ++ctx.line;
    ctx.key.clear();
    std::string line = raw.substr(0, raw.find('#'));
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') ctx.fail("malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (!g.contains(section)) {
        ctx.key = "[" + section + "]";
        ctx.fail("unknown section");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) ctx.fail("expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    ctx.key = section.empty() ? key : section + "." + key;
    if (section.empty()) ctx.fail("entry outside any section");
    const auto& keys = g.at(section);
    const auto it = keys.find(key);
    if (it == keys.end()) ctx.fail("unknown key");
    if (!seen.insert(ctx.key).second) ctx.fail("duplicate key");
    it->second(cfg, value, ctx);
  }
  validate(cfg, source);
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

RunConfig cifar_default() {
  RunConfig r;
  r.arch.family = "resnet";
  r.arch.depth = 56;
  r.arch.input = {3, 32, 32};
  r.arch.classes = 10;
  r.data.format = DataFormat::CifarBinary;
  r.data.train_path =
      "data/cifar-10-batches-bin/data_batch_1.bin,data/cifar-10-batches-bin/data_batch_2.bin,"
      "data/cifar-10-batches-bin/data_batch_3.bin,data/cifar-10-batches-bin/data_batch_4.bin,"
      "data/cifar-10-batches-bin/data_batch_5.bin";
  r.data.test_path = "data/cifar-10-batches-bin/test_batch.bin";
  r.data.train_size = 0;
  r.data.test_size = 0;
  r.data.sample_shape = {3, 32, 32};
  r.data.mean = {0.4914f, 0.4822f, 0.4465f};
  r.data.stddev = {0.2470f, 0.2435f, 0.2616f};
  r.data.crop_pad = 4;
  r.data.flip = true;
  r.prune.channels = 42;
  r.out_dir = "runs/cifar10_resnet56";
  return r;
}

RunConfig toy_profile() {
  RunConfig r;
  r.arch.family = "toy";
  r.arch.input = {3, 16, 16};
  r.arch.classes = 10;
  r.arch.widths = {8, 8, 16, 16, 32, 32};
  r.data.format = DataFormat::Synthetic;
  r.data.seed = 7;
  r.data.train_size = 10000;
  r.data.test_size = 2000;
  r.data.sample_shape = {3, 16, 16};
  r.data.noise = 0.6f;
  r.optim.lr = 0.05f;
  r.optim.milestones = {15, 25};
  r.optim.batch = 64;
  r.optim.epochs = 30;
  r.prune.until = 21;
  r.prune.every = 3;
  r.prune.channels = 7;
  r.out_dir = "runs/toy";
  return r;
}

std::string to_text(const RunConfig& c) {
  auto enum_name = [](auto v, std::initializer_list<const char*> names) {
    return std::string(*(names.begin() + static_cast<int>(v)));
  };
  std::ostringstream os;
  os << "[arch]\n"
     << "family = " << c.arch.family << "\n"
     << "depth = " << c.arch.depth << "\n"
     << "input = " << join_sizes(c.arch.input) << "\n"
     << "classes = " << c.arch.classes << "\n"
     << "widths = " << join_sizes(c.arch.widths) << "\n"
     << "plan = " << c.arch.plan << "\n"
     << "block = " << c.arch.block << "\n"
     << "batch_norm = " << (c.arch.batch_norm ? "true" : "false") << "\n"
     << "conv_bias = " << (c.arch.conv_bias ? "true" : "false") << "\n\n"
     << "[data]\n"
     << "format = " << enum_name(c.data.format, {"synthetic", "idx", "cifar"}) << "\n"
     << "train_path = " << c.data.train_path << "\n"
     << "test_path = " << c.data.test_path << "\n"
     << "seed = " << c.data.seed << "\n"
     << "train_size = " << c.data.train_size << "\n"
     << "test_size = " << c.data.test_size << "\n"
     << "shape = " << join_sizes(c.data.sample_shape) << "\n"
     << "classes = " << c.data.classes << "\n"
     << "noise = " << fmt(c.data.noise) << "\n"
     << "mean = " << join_floats(c.data.mean) << "\n"
     << "std = " << join_floats(c.data.stddev) << "\n"
     << "crop_pad = " << c.data.crop_pad << "\n"
     << "flip = " << (c.data.flip ? "true" : "false") << "\n\n"
     << "[optim]\n"
     << "lr = " << fmt(c.optim.lr) << "\n"
     << "milestones = " << join_sizes(c.optim.milestones) << "\n"
     << "lr_divisor = " << fmt(c.optim.lr_divisor) << "\n"
     << "momentum = " << fmt(c.optim.momentum) << "\n"
     << "weight_decay = " << fmt(c.optim.weight_decay) << "\n"
     << "batch = " << c.optim.batch << "\n"
     << "epochs = " << c.optim.epochs << "\n\n"
     << "[prune]\n"
     << "until = " << c.prune.until << "\n"
     << "every = " << c.prune.every << "\n"
     << "channels = " << c.prune.channels << "\n"
     << "criterion = " << scoring::criterion_name(c.prune.criterion) << "\n"
     << "alpha = " << fmt(c.prune.alpha) << "\n"
     << "beta = " << fmt(c.prune.beta) << "\n"
     << "eps = " << fmt(c.prune.eps) << "\n"
     << "pool_rule = " << enum_name(c.prune.pool_rule, {"winner", "proportional"}) << "\n"
     << "bn_handling = " << enum_name(c.prune.bn_handling, {"fold", "identity"}) << "\n"
     << "weighting = " << enum_name(c.prune.weighting, {"accuracy", "uniform"}) << "\n"
     << "ranking = " << enum_name(c.prune.ranking, {"signed", "absolute"}) << "\n"
     << "subset = " << c.prune.subset << "\n"
     << "score_batch = " << c.prune.score_batch << "\n\n"
     << "[run]\n"
     << "seed = " << c.seed << "\n"
     << "out_dir = " << c.out_dir << "\n"
     << "checkpoints = " << (c.checkpoints ? "true" : "false") << "\n";
  return os.str();
}

}  // namespace frsp
