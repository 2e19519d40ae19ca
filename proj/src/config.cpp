#include "residen/config.hpp"

#include <filesystem>
#include <fstream>

namespace residen {

namespace fs = std::filesystem;

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::Residen:
      return "residen";
    case ModelKind::Expression:
      return "expression";
    case ModelKind::Fusion:
      return "fusion";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& s) {
  if (s == "residen") return ModelKind::Residen;
  if (s == "expression") return ModelKind::Expression;
  if (s == "fusion") return ModelKind::Fusion;
  throw ConfigError("architecture.kind: expected residen, expression or fusion, got '" + s + "'");
}

void ArchitectureConfig::validate() const {
  switch (kind) {
    case ModelKind::Residen:
      residen.validate();
      break;
    case ModelKind::Expression:
      expression.validate();
      break;
    case ModelKind::Fusion:
      fusion.validate();
      break;
  }
}

int ArchitectureConfig::input_size() const {
  switch (kind) {
    case ModelKind::Residen:
      return residen.input_size;
    case ModelKind::Expression:
      return expression.input_size();
    case ModelKind::Fusion:
      return fusion.image.input_size;
  }
  return 0;
}

int ArchitectureConfig::num_aus() const {
  switch (kind) {
    case ModelKind::Residen:
      return residen.num_aus;
    case ModelKind::Expression:
      return 0;
    case ModelKind::Fusion:
      return fusion.num_aus;
  }
  return 0;
}

void RunConfig::validate() const {
  architecture.validate();
  const int n = architecture.num_aus();
  if (n != 0 && static_cast<std::size_t>(n) != data.aus.size()) {
    throw ConfigError("architecture has " + std::to_string(n) + " AU outputs but data.aus lists " +
                      std::to_string(data.aus.size()));
  }
  if (data.intensity_threshold < 0 || data.intensity_threshold > 5)
    throw ConfigError("data.intensity_threshold must be in 0..5");
  if (data.forehead_margin < 0.0) throw ConfigError("data.forehead_margin must be >= 0");
  if (data.channel_mean && data.channel_mean->size() != 3) throw ConfigError("data.channel_mean needs 3 values");
  if (!(training.lr > 0.0)) throw ConfigError("training.lr must be > 0");
  if (training.batch_size == 0) throw ConfigError("training.batch_size must be > 0");
  if (training.beta1 < 0.0 || training.beta1 >= 1.0 || training.beta2 < 0.0 || training.beta2 >= 1.0)
    throw ConfigError("training betas must be in [0, 1)");
  if (!(training.eps > 0.0)) throw ConfigError("training.eps must be > 0");
  if (!data.feature_cache.empty() && architecture.kind != ModelKind::Fusion)
    throw ConfigError("data.feature_cache applies only to fusion models");
  if (!data.feature_cache.empty() && training.joint_finetune)
    throw ConfigError("data.feature_cache needs a frozen extractor; joint_finetune is on");
  if (architecture.kind != ModelKind::Fusion &&
      (!training.expression_checkpoint.empty() || !training.image_checkpoint.empty() || training.image_from_scratch))
    throw ConfigError("training.expression_checkpoint, image_checkpoint and image_from_scratch apply only to fusion models");
  if (!training.image_checkpoint.empty() && training.image_from_scratch)
    throw ConfigError("training.image_checkpoint and training.image_from_scratch are exclusive");
  if (output.checkpoint_dir.empty()) throw ConfigError("output.checkpoint_dir must not be empty");
}

namespace {

ArchitectureConfig architecture_from_json(const json& j) {
  reject_unknown_keys(j, {"kind", "residen", "expression", "fusion"}, "architecture");
  ArchitectureConfig a;
  std::string kind = "residen";
  read_opt(j, "kind", kind, "architecture");
  a.kind = parse_model_kind(kind);
  const char* section = a.kind == ModelKind::Residen ? "residen" : a.kind == ModelKind::Expression ? "expression"
                                                                                                   : "fusion";
  for (const char* other : {"residen", "expression", "fusion"}) {
    if (std::string(other) != section && j.contains(other))
      throw ConfigError(std::string("architecture.") + other + " given but kind is " + kind);
  }
  const json body = j.value(section, json::object());
  switch (a.kind) {
    case ModelKind::Residen:
      a.residen = residen_config_from_json(body);
      break;
    case ModelKind::Expression:
      a.expression = expression_config_from_json(body);
      break;
    case ModelKind::Fusion:
      a.fusion = fusion_config_from_json(body);
      break;
  }
  return a;
}

json to_json(const ArchitectureConfig& a) {
  json j{{"kind", to_string(a.kind)}};
  switch (a.kind) {
    case ModelKind::Residen:
      j["residen"] = to_json(a.residen);
      break;
    case ModelKind::Expression:
      j["expression"] = to_json(a.expression);
      break;
    case ModelKind::Fusion:
      j["fusion"] = to_json(a.fusion);
      break;
  }
  return j;
}

DataConfig data_from_json(const json& j) {
  reject_unknown_keys(j, {"manifest", "aus", "intensity_threshold", "forehead_margin", "augment", "channel_mean",
                          "feature_cache"},
                      "data");
  DataConfig d;
  read_opt(j, "manifest", d.manifest, "data");
  if (j.contains("aus")) d.aus = au_class_list_from_json(j.at("aus"));
  read_opt(j, "intensity_threshold", d.intensity_threshold, "data");
  read_opt(j, "forehead_margin", d.forehead_margin, "data");
  if (j.contains("augment")) d.augment = augment_spec_from_json(j.at("augment"));
  if (j.contains("channel_mean") && !j.at("channel_mean").is_null()) {
    std::vector<double> m;
    read_opt(j, "channel_mean", m, "data");
    d.channel_mean = m;
  }
  read_opt(j, "feature_cache", d.feature_cache, "data");
  return d;
}

json to_json(const DataConfig& d) {
  return json{{"manifest", d.manifest},
              {"aus", to_json(d.aus)},
              {"intensity_threshold", d.intensity_threshold},
              {"forehead_margin", d.forehead_margin},
              {"augment", to_json(d.augment)},
              {"channel_mean", d.channel_mean ? json(*d.channel_mean) : json(nullptr)},
              {"feature_cache", d.feature_cache}};
}

TrainingConfig training_from_json(const json& j) {
  reject_unknown_keys(j, {"lr", "batch_size", "epochs", "seed", "beta1", "beta2", "eps", "joint_finetune",
                          "patience", "stop_at_train_accuracy", "expression_checkpoint", "image_checkpoint",
                          "image_from_scratch"},
                      "training");
  TrainingConfig t;
  read_opt(j, "lr", t.lr, "training");
  read_opt(j, "batch_size", t.batch_size, "training");
  read_opt(j, "epochs", t.epochs, "training");
  read_opt(j, "seed", t.seed, "training");
  read_opt(j, "beta1", t.beta1, "training");
  read_opt(j, "beta2", t.beta2, "training");
  read_opt(j, "eps", t.eps, "training");
  read_opt(j, "joint_finetune", t.joint_finetune, "training");
  read_opt(j, "patience", t.patience, "training");
  if (j.contains("stop_at_train_accuracy") && !j.at("stop_at_train_accuracy").is_null()) {
    double v = 0;
    read_opt(j, "stop_at_train_accuracy", v, "training");
    t.stop_at_train_accuracy = v;
  }
  read_opt(j, "expression_checkpoint", t.expression_checkpoint, "training");
  read_opt(j, "image_checkpoint", t.image_checkpoint, "training");
  read_opt(j, "image_from_scratch", t.image_from_scratch, "training");
  return t;
}

json to_json(const TrainingConfig& t) {
  return json{{"lr", t.lr},
              {"batch_size", t.batch_size},
              {"epochs", t.epochs},
              {"seed", t.seed},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"eps", t.eps},
              {"joint_finetune", t.joint_finetune},
              {"patience", t.patience},
              {"stop_at_train_accuracy", t.stop_at_train_accuracy ? json(*t.stop_at_train_accuracy) : json(nullptr)},
              {"expression_checkpoint", t.expression_checkpoint},
              {"image_checkpoint", t.image_checkpoint},
              {"image_from_scratch", t.image_from_scratch}};
}

OutputConfig output_from_json(const json& j) {
  reject_unknown_keys(j, {"checkpoint_dir", "report"}, "output");
  OutputConfig o;
  read_opt(j, "checkpoint_dir", o.checkpoint_dir, "output");
  read_opt(j, "report", o.report, "output");
  return o;
}

json to_json(const OutputConfig& o) { return json{{"checkpoint_dir", o.checkpoint_dir}, {"report", o.report}}; }

std::string rebase(const std::string& p, const fs::path& dir) {
  if (p.empty() || fs::path(p).is_absolute()) return p;
  return (dir / p).lexically_normal().string();
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  reject_unknown_keys(j, {"architecture", "data", "training", "output"}, "config");
  RunConfig c;
  c.architecture = architecture_from_json(j.value("architecture", json::object()));
  c.data = data_from_json(j.value("data", json::object()));
  c.training = training_from_json(j.value("training", json::object()));
  c.output = output_from_json(j.value("output", json::object()));
  if (c.architecture.kind == ModelKind::Fusion) {
    const bool joint = c.training.joint_finetune || c.architecture.fusion.joint_finetune;
    c.training.joint_finetune = c.architecture.fusion.joint_finetune = joint;
  }
  c.validate();
  return c;
}

json to_json(const RunConfig& c) {
  return json{{"architecture", to_json(c.architecture)},
              {"data", to_json(c.data)},
              {"training", to_json(c.training)},
              {"output", to_json(c.output)}};
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  const fs::path dir = fs::path(path).parent_path();
  c.data.manifest = rebase(c.data.manifest, dir);
  c.data.feature_cache = rebase(c.data.feature_cache, dir);
  c.training.expression_checkpoint = rebase(c.training.expression_checkpoint, dir);
  c.training.image_checkpoint = rebase(c.training.image_checkpoint, dir);
  c.output.checkpoint_dir = rebase(c.output.checkpoint_dir, dir);
  c.output.report = rebase(c.output.report, dir);
  return c;
}

}  // namespace residen
