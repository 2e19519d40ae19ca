#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "residen/config.hpp"
#include "residen/network.hpp"
#include "residen/optim.hpp"

namespace residen {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kFeatureCacheVersion = 1;

/// Fresh model for an architecture; parameters initialized from `seed`.
std::unique_ptr<Network<float>> build_model(const ArchitectureConfig& arch, std::uint64_t seed);

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
  bool buffer = false;
};

struct OptimizerState {
  std::uint64_t steps = 0;
  std::unordered_map<std::string, Adam::Moments> moments;
};

/// Binary layout, little-endian: "RSDN", u32 version, config JSON, named f32
/// tensors, optional Adam state, RNG seed, epoch counter.
struct Checkpoint {
  json config;  // resolved RunConfig
  std::vector<StoredTensor> params;
  std::optional<OptimizerState> optimizer;
  std::uint64_t rng_seed = 0;
  std::uint64_t epoch = 0;

  RunConfig run_config() const { return run_config_from_json(config); }
  const StoredTensor* find(const std::string& name) const;
};

Checkpoint make_checkpoint(const RunConfig& cfg, Network<float>& model, const Adam* optimizer,
                           std::uint64_t epoch);
/// Writes through a temporary file and renames, so a crash never leaves a
/// truncated checkpoint behind.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
/// FNV-1a of the checkpoint file bytes, as 16 hex digits.
std::string checkpoint_id(const std::string& path);

/// Copies every parameter of `params` from `ckpt` (names prefixed with
/// `prefix` on the model side). Missing names or shape mismatches are
/// ConfigErrors unless `partial`, in which case only names present in the
/// checkpoint are required to fit. Returns the number of tensors copied.
std::size_t load_parameters(ParamSet<float>& params, const Checkpoint& ckpt, const std::string& prefix = "",
                            bool partial = false);
void restore_optimizer(Adam& adam, const Checkpoint& ckpt);

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<Network<float>> model;
  std::string id;
};
/// Rebuilds the model graph from the embedded config and loads its weights.
LoadedModel load_model(const std::string& checkpoint_path);

/// Feature rows keyed by sample id.
class FeatureCache {
 public:
  FeatureCache() = default;
  FeatureCache(std::size_t width, std::string source_id) : width_(width), source_id_(std::move(source_id)) {}

  std::size_t width() const { return width_; }
  std::size_t size() const { return ids_.size(); }
  const std::string& source_id() const { return source_id_; }
  const std::vector<std::string>& ids() const { return ids_; }

  /// DataError on a duplicate id, ConfigError on a width mismatch.
  void add(const std::string& id, std::span<const float> row);
  std::span<const float> row(std::size_t i) const;
  /// Empty span when the id is absent.
  std::span<const float> find(const std::string& id) const;

 private:
  std::size_t width_ = 0;
  std::string source_id_;
  std::vector<std::string> ids_;
  std::vector<float> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// "RSFC", u32 version, u32 width, u64 count, source checkpoint id, then
/// (id, width f32) records.
void save_feature_cache(const FeatureCache& cache, const std::string& path);
FeatureCache load_feature_cache(const std::string& path);

}  // namespace residen
