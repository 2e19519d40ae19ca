#pragma once

#include <optional>
#include <string>
#include <vector>

#include "residen/data.hpp"
#include "residen/expression.hpp"
#include "residen/fusion.hpp"
#include "residen/residen.hpp"

namespace residen {

enum class ModelKind { Residen, Expression, Fusion };
std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& s);

/// Only the section matching `kind` is used and persisted.
struct ArchitectureConfig {
  ModelKind kind = ModelKind::Residen;
  ResiDenConfig residen;
  ExpressionConfig expression;
  FusionConfig fusion;

  void validate() const;
  int input_size() const;
  /// AU heads report this many outputs; 0 for the expression classifier.
  int num_aus() const;
};

struct DataConfig {
  std::string manifest;  // relative paths resolve against the config file
  AuClassList aus = AuClassList::disfa();
  int intensity_threshold = 2;
  double forehead_margin = 0.25;
  AugmentSpec augment;
  /// Filled from the train split at the start of training.
  std::optional<std::vector<double>> channel_mean;
  /// Precomputed expression features for fusion training (frozen extractor).
  std::string feature_cache;
};

struct TrainingConfig {
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool joint_finetune = false;
  std::size_t patience = 10;
  /// Stop as soon as mean per-AU train accuracy reaches this value.
  std::optional<double> stop_at_train_accuracy;
  /// Expression checkpoint whose weights seed the fusion model's extractor.
  std::string expression_checkpoint;
  /// Standalone ResiDen checkpoint that seeds the fusion image branch.
  std::string image_checkpoint;
  /// Fusion only: start the image branch from random weights instead.
  bool image_from_scratch = false;
};

struct OutputConfig {
  std::string checkpoint_dir = "run";
  std::string report;
};

struct RunConfig {
  ArchitectureConfig architecture;
  DataConfig data;
  TrainingConfig training;
  OutputConfig output;

  void validate() const;
};

/// Strict parse: unknown keys anywhere are ConfigErrors.
RunConfig run_config_from_json(const json& j);
/// Every default materialized.
json to_json(const RunConfig& cfg);
/// Reads and parses a config file; relative paths inside become relative to
/// the file's directory.
RunConfig load_run_config(const std::string& path);

}  // namespace residen
