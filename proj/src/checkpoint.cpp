#include "residen/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "residen/expression.hpp"
#include "residen/fusion.hpp"
#include "residen/residen.hpp"
#include "residen/rng.hpp"

namespace residen {

namespace fs = std::filesystem;

std::unique_ptr<Network<float>> build_model(const ArchitectureConfig& arch, std::uint64_t seed) {
  arch.validate();
  switch (arch.kind) {
    case ModelKind::Residen:
      return std::make_unique<ResiDen<float>>(arch.residen, seed);
    case ModelKind::Expression:
      return std::make_unique<ExpressionNet<float>>(arch.expression, seed);
    case ModelKind::Fusion:
      return std::make_unique<FusionModel<float>>(arch.fusion, seed);
  }
  throw ConfigError("unknown model kind");
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const std::string& s) { buf_.append(s); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void floats(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return bytes(u32()); }
  std::vector<float> floats(std::size_t n) {
    need(n * 4);
    std::vector<float> v(n);
    for (auto& x : v) x = f32();
    return v;
  }
  bool done() const { return pos_ == data_.size(); }
  [[noreturn]] void fail(const std::string& msg) const { throw DataError(path_ + ": " + msg); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) fail("truncated file");
  }
  std::string data_;
  std::size_t pos_ = 0;
  std::string path_;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

std::string hex16(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return &p;
  return nullptr;
}

Checkpoint make_checkpoint(const RunConfig& cfg, Network<float>& model, const Adam* optimizer,
                           std::uint64_t epoch) {
  Checkpoint c;
  c.config = to_json(cfg);
  for (const auto& e : model.params()) {
    c.params.push_back({e.name, e.tensor.shape(), std::vector<float>(e.tensor.data().begin(), e.tensor.data().end()),
                        e.buffer});
  }
  if (optimizer) c.optimizer = OptimizerState{optimizer->steps(), optimizer->state()};
  c.rng_seed = cfg.training.seed;
  c.epoch = epoch;
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  Writer w;
  w.bytes("RSDN");
  w.u32(kCheckpointVersion);
  w.str(c.config.dump());
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& p : c.params) {
    w.str(p.name);
    w.u8(static_cast<std::uint8_t>(DType::Float32));
    w.u8(p.buffer ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(p.shape.size()));
    for (auto d : p.shape) w.u64(d);
    w.floats(p.data);
  }
  w.u8(c.optimizer ? 1 : 0);
  if (c.optimizer) {
    w.u64(c.optimizer->steps);
    // sorted so the bytes do not depend on hash-map order
    std::map<std::string, const Adam::Moments*> sorted;
    for (const auto& [k, v] : c.optimizer->moments) sorted[k] = &v;
    w.u32(static_cast<std::uint32_t>(sorted.size()));
    for (const auto& [k, v] : sorted) {
      w.str(k);
      w.u64(v->m.size());
      w.floats(v->m);
      w.floats(v->v);
    }
  }
  w.u64(c.rng_seed);
  w.u64(c.epoch);
  write_file_atomic(path, w.buffer());
}

Checkpoint load_checkpoint(const std::string& path) {
  Reader r(read_file(path), path);
  if (r.bytes(4) != "RSDN") r.fail("not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw ProtocolError(path + ": checkpoint format version " + std::to_string(version) + ", this build reads " +
                        std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  try {
    c.config = json::parse(r.str());
  } catch (const json::exception& e) {
    r.fail(std::string("corrupt config blob: ") + e.what());
  }
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    StoredTensor t;
    t.name = r.str();
    if (r.u8() != static_cast<std::uint8_t>(DType::Float32)) r.fail("tensor " + t.name + ": unsupported dtype");
    t.buffer = r.u8() != 0;
    const auto rank = r.u8();
    for (int d = 0; d < rank; ++d) t.shape.push_back(r.u64());
    t.data = r.floats(shape_numel(t.shape));
    c.params.push_back(std::move(t));
  }
  if (r.u8()) {
    OptimizerState s;
    s.steps = r.u64();
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      auto name = r.str();
      const auto len = r.u64();
      Adam::Moments m;
      m.m = r.floats(len);
      m.v = r.floats(len);
      s.moments.emplace(std::move(name), std::move(m));
    }
    c.optimizer = std::move(s);
  }
  c.rng_seed = r.u64();
  c.epoch = r.u64();
  if (!r.done()) r.fail("trailing bytes");
  return c;
}

std::string checkpoint_id(const std::string& path) { return hex16(fnv1a(read_file(path))); }

std::size_t load_parameters(ParamSet<float>& params, const Checkpoint& ckpt, const std::string& prefix,
                            bool partial) {
  std::size_t copied = 0;
  if (partial) {
    for (const auto& p : ckpt.params) {
      const std::string name = prefix + p.name;
      if (!params.contains(name)) continue;
      auto& t = params.at(name);
      if (t.shape() != p.shape) {
        throw ConfigError("parameter " + name + ": checkpoint shape " + shape_str(p.shape) + ", model " +
                          shape_str(t.shape()));
      }
      std::copy(p.data.begin(), p.data.end(), t.mutable_data().begin());
      ++copied;
    }
    return copied;
  }
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& p : ckpt.params) by_name[prefix + p.name] = &p;
  for (auto& e : params) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw ConfigError("checkpoint lacks parameter " + e.name);
    if (it->second->shape != e.tensor.shape()) {
      throw ConfigError("parameter " + e.name + ": checkpoint shape " + shape_str(it->second->shape) + ", model " +
                        shape_str(e.tensor.shape()));
    }
    std::copy(it->second->data.begin(), it->second->data.end(), e.tensor.mutable_data().begin());
    ++copied;
  }
  if (copied != ckpt.params.size()) throw ConfigError("checkpoint holds parameters the model does not have");
  return copied;
}

void restore_optimizer(Adam& adam, const Checkpoint& ckpt) {
  if (ckpt.optimizer) adam.restore(ckpt.optimizer->steps, ckpt.optimizer->moments);
}

LoadedModel load_model(const std::string& checkpoint_path) {
  auto ckpt = load_checkpoint(checkpoint_path);
  LoadedModel m;
  m.config = ckpt.run_config();
  m.model = build_model(m.config.architecture, m.config.training.seed);
  load_parameters(m.model->params(), ckpt);
  m.id = checkpoint_id(checkpoint_path);
  return m;
}

void FeatureCache::add(const std::string& id, std::span<const float> row) {
  if (row.size() != width_) {
    throw ConfigError("feature cache: row for " + id + " has width " + std::to_string(row.size()) + ", cache width " +
                      std::to_string(width_));
  }
  if (!index_.emplace(id, ids_.size()).second) throw DataError("feature cache: duplicate id " + id);
  ids_.push_back(id);
  values_.insert(values_.end(), row.begin(), row.end());
}

std::span<const float> FeatureCache::row(std::size_t i) const {
  return std::span<const float>(values_).subspan(i * width_, width_);
}

std::span<const float> FeatureCache::find(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return {};
  return row(it->second);
}

void save_feature_cache(const FeatureCache& cache, const std::string& path) {
  Writer w;
  w.bytes("RSFC");
  w.u32(kFeatureCacheVersion);
  w.u32(static_cast<std::uint32_t>(cache.width()));
  w.u64(cache.size());
  w.str(cache.source_id());
  for (std::size_t i = 0; i < cache.size(); ++i) {
    w.str(cache.ids()[i]);
    w.floats(cache.row(i));
  }
  write_file_atomic(path, w.buffer());
}

FeatureCache load_feature_cache(const std::string& path) {
  Reader r(read_file(path), path);
  if (r.bytes(4) != "RSFC") r.fail("not a feature cache (bad magic)");
  const auto version = r.u32();
  if (version != kFeatureCacheVersion) {
    throw ProtocolError(path + ": feature cache version " + std::to_string(version) + ", this build reads " +
                        std::to_string(kFeatureCacheVersion));
  }
  const auto width = r.u32();
  const auto count = r.u64();
  FeatureCache cache(width, r.str());
  for (std::uint64_t i = 0; i < count; ++i) {
    auto id = r.str();
    auto row = r.floats(width);
    cache.add(id, row);
  }
  if (!r.done()) r.fail("trailing bytes");
  return cache;
}

}  // namespace residen
