#include "frsp/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

namespace frsp {

namespace {

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (!tok.empty()) out.push_back(std::stoull(tok));
  }
  return out;
}

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }
  void tensor(const std::string& name, const Tensor& t) {
    bytes(name);
    u8(0);
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) u64(d);
    for (float f : t.values()) u32(std::bit_cast<std::uint32_t>(f));
  }
  void scalar_i64(const std::string& name, std::int64_t v) {
    bytes(name);
    u8(2);
    u32(1);
    u64(1);
    u64(static_cast<std::uint64_t>(v));
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[at_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(u8()) << (8 * i);
    return v;
  }
  std::string bytes() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = data_.substr(at_, n);
    at_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = data_.substr(at_, n);
    at_ += n;
    return s;
  }
  bool done() const { return at_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - at_ < n) throw CheckpointError(path_ + ": truncated checkpoint");
  }
  std::string data_, path_;
  std::size_t at_ = 0;
};

struct Entry {
  std::uint8_t dtype = 0;
  Shape shape;
  std::vector<float> f32;
  std::int64_t i64 = 0;
};

const char* slot_name(ParamSlot s) { return s == ParamSlot::Weight ? "weight" : "bias"; }

}  // namespace

std::string arch_to_text(const ArchConfig& a) {
  std::ostringstream os;
  os << "family=" << a.family << '\n'
     << "depth=" << a.depth << '\n'
     << "input=" << join(a.input) << '\n'
     << "classes=" << a.classes << '\n'
     << "widths=" << join(a.widths) << '\n'
     << "plan=" << a.plan << '\n'
     << "block=" << a.block << '\n'
     << "batch_norm=" << (a.batch_norm ? 1 : 0) << '\n'
     << "conv_bias=" << (a.conv_bias ? 1 : 0) << '\n';
  return os.str();
}

ArchConfig arch_from_text(const std::string& text) {
  ArchConfig a;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    try {
      if (k == "family") a.family = v;
      else if (k == "depth") a.depth = std::stoull(v);
      else if (k == "input") a.input = parse_list(v);
      else if (k == "classes") a.classes = std::stoull(v);
      else if (k == "widths") a.widths = parse_list(v);
      else if (k == "plan") a.plan = v;
      else if (k == "block") a.block = v;
      else if (k == "batch_norm") a.batch_norm = v == "1";
      else if (k == "conv_bias") a.conv_bias = v == "1";
      else throw CheckpointError("architecture echo: unknown key '" + k + "'");
    } catch (const std::logic_error&) {
      throw CheckpointError("architecture echo: bad value for '" + k + "'");
    }
  }
  return a;
}

void save_checkpoint(const std::string& path, const ArchConfig& arch, const ModelGraph& model,
                     const OptimState* optim, std::int64_t epoch,
                     const std::string& rng_state) {
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  for (const Layer& l : model.layers()) {
    const std::string p = "layer" + std::to_string(l.spec.id) + ".";
    if (!l.weight.empty()) tensors.emplace_back(p + "weight", &l.weight);
    if (!l.bias.empty()) tensors.emplace_back(p + "bias", &l.bias);
    if (!l.running_mean.empty()) tensors.emplace_back(p + "running_mean", &l.running_mean);
    if (!l.running_var.empty()) tensors.emplace_back(p + "running_var", &l.running_var);
  }
  if (optim) {
    for (const auto& [key, buf] : optim->momentum) {
      tensors.emplace_back("momentum" + std::to_string(key.layer) + "." + slot_name(key.slot),
                           &buf);
    }
  }
  Writer w;
  for (char c : std::string("FRSP")) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  w.bytes(arch_to_text(arch));
  w.bytes(rng_state);
  w.u32(static_cast<std::uint32_t>(tensors.size() + 1));
  for (const auto& [name, t] : tensors) w.tensor(name, *t);
  w.scalar_i64("epoch", epoch);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write '" + path + "'");
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw CheckpointError("write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path + "'");
  Reader r(std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()),
           path);
  if (r.raw(4) != "FRSP") throw CheckpointError(path + ": not an FRSP checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError(path + ": checkpoint version " + std::to_string(version) +
                          ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  ck.arch = arch_from_text(r.bytes());
  ck.rng_state = r.bytes();
  std::map<std::string, Entry> entries;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes();
    Entry e;
    e.dtype = r.u8();
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError(path + ": entry '" + name + "' has rank " + std::to_string(rank));
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(r.u64());
    const std::size_t n = shape_numel(e.shape);
    if (e.dtype == 0) {
      e.f32.resize(n);
      for (float& f : e.f32) f = std::bit_cast<float>(r.u32());
    } else if (e.dtype == 2) {
      if (n != 1) throw CheckpointError(path + ": i64 entry '" + name + "' must be a scalar");
      e.i64 = static_cast<std::int64_t>(r.u64());
    } else {
      throw CheckpointError(path + ": entry '" + name + "' has unknown dtype " +
                            std::to_string(e.dtype));
    }
    if (!entries.emplace(name, std::move(e)).second) {
      throw CheckpointError(path + ": duplicate entry '" + name + "'");
    }
  }
  if (!r.done()) throw CheckpointError(path + ": trailing bytes after the last entry");

  try {
    ck.model = build_model(ck.arch, 0);
  } catch (const std::exception& ex) {
    throw CheckpointError(path + ": architecture echo does not build: " + ex.what());
  }
  // Channel identity is immaterial here since every tensor gets overwritten;
  // dropping trailing channels only restores the pruned shapes.
  std::vector<ChannelRef> trim;
  for (int id : ck.model.conv_layers()) {
    const auto it = entries.find("layer" + std::to_string(id) + ".weight");
    if (it == entries.end() || it->second.shape.empty()) {
      throw CheckpointError(path + ": missing weight for conv layer " + std::to_string(id));
    }
    const std::size_t have = ck.model.layer(id).spec.out_channels;
    const std::size_t want = it->second.shape[0];
    if (want > have || want == 0) {
      throw CheckpointError(path + ": conv layer " + std::to_string(id) + " stores " +
                            std::to_string(want) + " channels, architecture allows " +
                            std::to_string(have));
    }
    for (std::size_t c = want; c < have; ++c) trim.push_back({id, c});
  }
  try {
    surgery_remove_channels(ck.model, trim, nullptr);
  } catch (const SurgeryError& ex) {
    throw CheckpointError(path + ": stored shapes are not a pruning of the architecture: " +
                          ex.what());
  }

  auto restore = [&](const std::string& name, Tensor& dst, bool required) {
    const auto it = entries.find(name);
    if (it == entries.end()) {
      if (required && !dst.empty()) throw CheckpointError(path + ": missing entry '" + name + "'");
      return;
    }
    if (it->second.dtype != 0 || it->second.shape != dst.shape()) {
      throw CheckpointError(path + ": entry '" + name + "' has shape " +
                            shape_str(it->second.shape) + ", model expects " +
                            shape_str(dst.shape()));
    }
    dst = Tensor(it->second.shape, std::move(it->second.f32));
    entries.erase(it);
  };
  for (std::size_t i = 0; i < ck.model.size(); ++i) {
    Layer& l = ck.model.layer(static_cast<int>(i));
    const std::string p = "layer" + std::to_string(i) + ".";
    restore(p + "weight", l.weight, true);
    restore(p + "bias", l.bias, true);
    restore(p + "running_mean", l.running_mean, true);
    restore(p + "running_var", l.running_var, true);
  }
  for (auto it = entries.begin(); it != entries.end();) {
    const std::string& name = it->first;
    if (name.rfind("momentum", 0) != 0) {
      ++it;
      continue;
    }
    const auto dot = name.find('.');
    int layer = -1;
    const std::string digits = name.substr(8, dot == std::string::npos ? dot : dot - 8);
    std::from_chars(digits.data(), digits.data() + digits.size(), layer);
    const std::string slot = dot == std::string::npos ? "" : name.substr(dot + 1);
    if (digits.empty() || layer < 0 || static_cast<std::size_t>(layer) >= ck.model.size() ||
        (slot != "weight" && slot != "bias")) {
      throw CheckpointError(path + ": unexpected entry '" + name + "'");
    }
    const ParamKey key{layer, slot == "weight" ? ParamSlot::Weight : ParamSlot::Bias};
    const Layer& l = ck.model.layer(layer);
    const Tensor& param = key.slot == ParamSlot::Weight ? l.weight : l.bias;
    if (it->second.dtype != 0 || it->second.shape != param.shape()) {
      throw CheckpointError(path + ": momentum entry '" + name + "' does not match its parameter");
    }
    ck.optim.momentum[key] = Tensor(it->second.shape, std::move(it->second.f32));
    it = entries.erase(it);
  }
  const auto ep = entries.find("epoch");
  if (ep == entries.end() || ep->second.dtype != 2) {
    throw CheckpointError(path + ": missing epoch entry");
  }
  ck.epoch = ep->second.i64;
  entries.erase(ep);
  if (!entries.empty()) {
    throw CheckpointError(path + ": unexpected entry '" + entries.begin()->first + "'");
  }
  return ck;
}

}  // namespace frsp
