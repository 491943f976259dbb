#include "cptr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "cptr/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace cptr {

namespace fs = std::filesystem;

namespace {

constexpr char kCkptMagic[8] = {'C', 'P', 'T', 'R', 'C', 'K', 'P', 'T'};
constexpr char kAttnMagic[8] = {'C', 'P', 'T', 'R', 'A', 'T', 'T', 'N'};
constexpr uint32_t kCkptVersion = 1;
constexpr uint32_t kAttnVersion = 1;

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path) {
    tmp_ = path + ".tmp";
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot write file: " + path);
  }

  void bytes(const void* p, size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u8(uint8_t v) { bytes(&v, 1); }
  void u16(uint16_t v) { bytes(&v, 2); }
  void u32(uint32_t v) { bytes(&v, 4); }
  void u64(uint64_t v) { bytes(&v, 8); }
  void i64(int64_t v) { bytes(&v, 8); }
  void f32s(const float* p, size_t n) { bytes(p, n * 4); }
  void str(const std::string& s) {
    if (s.size() > 0xFFFF) throw IoError("string too long for serialization");
    u16(static_cast<uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }

  void finish() {
    out_.flush();
    if (!out_) throw IoError("short write for file: " + path_);
    out_.close();
    std::error_code ec;
    fs::rename(tmp_, path_, ec);
    if (ec) {
      fs::remove(tmp_);
      throw IoError("cannot finalize file " + path_ + ": " + ec.message());
    }
  }

 private:
  std::string path_;
  std::string tmp_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open file: " + path);
  }

  void bytes(void* p, size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (in_.gcount() != static_cast<std::streamsize>(n)) throw IoError("truncated file: " + path_);
  }
  uint8_t u8() { uint8_t v; bytes(&v, 1); return v; }
  uint16_t u16() { uint16_t v; bytes(&v, 2); return v; }
  uint32_t u32() { uint32_t v; bytes(&v, 4); return v; }
  uint64_t u64() { uint64_t v; bytes(&v, 8); return v; }
  int64_t i64() { int64_t v; bytes(&v, 8); return v; }
  void f32s(float* p, size_t n) { bytes(p, n * 4); }
  std::string str() {
    std::string s(u16(), '\0');
    bytes(s.data(), s.size());
    return s;
  }
  bool at_eof() {
    in_.peek();
    return in_.eof();
  }

 private:
  std::string path_;
  std::ifstream in_;
};

void write_tensor(Writer& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u8(static_cast<uint8_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) w.u32(static_cast<uint32_t>(t.dim(i)));
  w.f32s(t.data(), static_cast<size_t>(t.size()));
}

}  // namespace

OptimizerState OptimizerState::zeros_like(const ParamSetT<float>& params) {
  OptimizerState s;
  s.m.reserve(params.items.size());
  s.v.reserve(params.items.size());
  for (const auto& [_, t] : params.items) {
    s.m.push_back(Tensor::zeros(t.shape()));
    s.v.push_back(Tensor::zeros(t.shape()));
  }
  return s;
}

void save_checkpoint(const std::string& path, const Model& model, const CheckpointExtras& extras) {
  Writer w(path);
  w.bytes(kCkptMagic, 8);
  w.u32(kCkptVersion);
  const std::string cfg = model_config_to_json(model.config);
  w.u32(static_cast<uint32_t>(cfg.size()));
  w.bytes(cfg.data(), cfg.size());
  w.u32(static_cast<uint32_t>(model.params.items.size()));
  for (const auto& [name, t] : model.params.items) write_tensor(w, name, t);

  if (extras.opt) {
    if (extras.opt->m.size() != model.params.items.size() || extras.opt->v.size() != model.params.items.size())
      throw ValueError("optimizer state does not match parameter count");
    w.u8(1);
    w.i64(extras.opt->step);
    for (size_t i = 0; i < model.params.items.size(); ++i) {
      w.f32s(extras.opt->m[i].data(), static_cast<size_t>(extras.opt->m[i].size()));
      w.f32s(extras.opt->v[i].data(), static_cast<size_t>(extras.opt->v[i].size()));
    }
  } else {
    w.u8(0);
  }
  if (extras.rng) {
    w.u8(1);
    w.u64(extras.rng->key);
    w.u64(extras.rng->counter);
  } else {
    w.u8(0);
  }
  if (extras.progress) {
    w.u8(1);
    w.u8(static_cast<uint8_t>(extras.progress->phase));
    w.u32(static_cast<uint32_t>(extras.progress->epochs_done));
  } else {
    w.u8(0);
  }
  w.finish();
}

Model load_checkpoint(const std::string& path, CheckpointExtras* extras) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kCkptMagic, 8) != 0) throw IoError("not a checkpoint file (bad magic): " + path);
  const uint32_t version = r.u32();
  if (version != kCkptVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  std::string cfg_json(r.u32(), '\0');
  r.bytes(cfg_json.data(), cfg_json.size());
  ModelConfig config;
  parse_model_config(cfg_json, config);
  config.validate();

  const auto expected = param_shapes(config);
  const uint32_t n_tensors = r.u32();
  if (n_tensors != expected.size())
    throw IoError("checkpoint tensor count " + std::to_string(n_tensors) + " does not match config (" +
                  std::to_string(expected.size()) + "): " + path);
  Model model;
  model.config = config;
  for (const auto& [want_name, want_shape] : expected) {
    const std::string name = r.str();
    if (name != want_name)
      throw IoError("checkpoint tensor '" + name + "' where '" + want_name + "' was expected: " + path);
    const int rank = r.u8();
    std::vector<int> shape(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) shape[static_cast<size_t>(i)] = static_cast<int>(r.u32());
    if (shape != want_shape)
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                    shape_str(want_shape) + ": " + path);
    Tensor t(shape);
    r.f32s(t.mutable_data(), static_cast<size_t>(t.size()));
    model.params.add(name, std::move(t));
  }

  CheckpointExtras local;
  CheckpointExtras& ex = extras ? *extras : local;
  ex = CheckpointExtras{};
  if (r.u8()) {
    OptimizerState opt;
    opt.step = r.i64();
    for (const auto& [name, t] : model.params.items) {
      Tensor m(t.shape()), v(t.shape());
      r.f32s(m.mutable_data(), static_cast<size_t>(m.size()));
      r.f32s(v.mutable_data(), static_cast<size_t>(v.size()));
      opt.m.push_back(std::move(m));
      opt.v.push_back(std::move(v));
    }
    ex.opt = std::move(opt);
  }
  if (r.u8()) {
    RngSnapshot snap;
    snap.key = r.u64();
    snap.counter = r.u64();
    ex.rng = snap;
  }
  if (r.u8()) {
    TrainProgress prog;
    prog.phase = static_cast<TrainPhase>(r.u8());
    prog.epochs_done = static_cast<int>(r.u32());
    ex.progress = prog;
  }
  return model;
}

long long checkpoint_file_size(const ModelConfig& config) {
  long long size = 8 + 4;                                              // magic + version
  size += 4 + static_cast<long long>(model_config_to_json(config).size()); // config blob
  size += 4;                                                           // tensor count
  for (const auto& [name, shape] : param_shapes(config)) {
    size += 2 + static_cast<long long>(name.size()) + 1 + 4 * static_cast<long long>(shape.size());
    long long n = 1;
    for (int d : shape) n *= d;
    size += 4 * n;
  }
  return size + 3; // presence bytes for opt/rng/progress
}

const AttentionDump::Entry* AttentionDump::find(uint8_t stack, int layer, int head) const {
  for (const Entry& e : entries)
    if (e.stack == stack && e.layer == layer && e.head == head) return &e;
  return nullptr;
}

AttentionDump dump_from_trace(const AttentionTrace& trace, const ModelConfig& config,
                              const std::vector<std::string>& caption_tokens) {
  AttentionDump d;
  d.res_h = config.res_h;
  d.res_w = config.res_w;
  d.patch_size = config.patch_size;
  d.tokens = caption_tokens;
  auto push_stack = [&d](uint8_t stack, const std::vector<std::vector<Tensor>>& maps) {
    for (size_t layer = 0; layer < maps.size(); ++layer) {
      for (size_t head = 0; head < maps[layer].size(); ++head) {
        const Tensor& w = maps[layer][head];
        AttentionDump::Entry e;
        e.stack = stack;
        e.layer = static_cast<int>(layer);
        e.head = static_cast<int>(head);
        e.n_q = w.dim(0);
        e.n_k = w.dim(1);
        e.data.assign(w.data(), w.data() + w.size());
        d.entries.push_back(std::move(e));
      }
    }
  };
  push_stack(AttentionDump::kEncoderSelf, trace.encoder_self);
  push_stack(AttentionDump::kDecoderSelf, trace.decoder_self);
  push_stack(AttentionDump::kDecoderCross, trace.decoder_cross);
  return d;
}

void save_attention_dump(const std::string& path, const AttentionDump& dump) {
  Writer w(path);
  w.bytes(kAttnMagic, 8);
  w.u32(kAttnVersion);
  w.u32(static_cast<uint32_t>(dump.res_h));
  w.u32(static_cast<uint32_t>(dump.res_w));
  w.u32(static_cast<uint32_t>(dump.patch_size));
  w.u32(static_cast<uint32_t>(dump.tokens.size()));
  for (const std::string& t : dump.tokens) w.str(t);
  w.u32(static_cast<uint32_t>(dump.entries.size()));
  for (const AttentionDump::Entry& e : dump.entries) {
    if (e.data.size() != static_cast<size_t>(e.n_q) * static_cast<size_t>(e.n_k))
      throw ValueError("attention dump entry data does not match its dimensions");
    w.u8(e.stack);
    w.u32(static_cast<uint32_t>(e.layer));
    w.u32(static_cast<uint32_t>(e.head));
    w.u32(static_cast<uint32_t>(e.n_q));
    w.u32(static_cast<uint32_t>(e.n_k));
    w.f32s(e.data.data(), e.data.size());
  }
  w.finish();
}

AttentionDump load_attention_dump(const std::string& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kAttnMagic, 8) != 0) throw IoError("not an attention dump (bad magic): " + path);
  const uint32_t version = r.u32();
  if (version != kAttnVersion)
    throw IoError("unsupported attention dump version " + std::to_string(version) + " in " + path);
  AttentionDump d;
  d.res_h = static_cast<int>(r.u32());
  d.res_w = static_cast<int>(r.u32());
  d.patch_size = static_cast<int>(r.u32());
  const uint32_t n_tokens = r.u32();
  for (uint32_t i = 0; i < n_tokens; ++i) d.tokens.push_back(r.str());
  const uint32_t n_entries = r.u32();
  for (uint32_t i = 0; i < n_entries; ++i) {
    AttentionDump::Entry e;
    e.stack = r.u8();
    e.layer = static_cast<int>(r.u32());
    e.head = static_cast<int>(r.u32());
    e.n_q = static_cast<int>(r.u32());
    e.n_k = static_cast<int>(r.u32());
    if (e.n_q <= 0 || e.n_k <= 0) throw IoError("attention dump entry has invalid dimensions: " + path);
    e.data.resize(static_cast<size_t>(e.n_q) * static_cast<size_t>(e.n_k));
    r.f32s(e.data.data(), e.data.size());
    d.entries.push_back(std::move(e));
  }
  return d;
}

}  // namespace cptr
