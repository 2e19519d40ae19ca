#include "residen/commands.hpp"

#include <filesystem>

#include "residen/expression.hpp"

namespace residen {

namespace fs = std::filesystem;

TrainResult cmd_train(const std::string& config_path, const TrainOverrides& overrides, std::ostream* progress) {
  RunConfig cfg = load_run_config(config_path);
  if (overrides.manifest) cfg.data.manifest = *overrides.manifest;
  if (overrides.checkpoint_dir) cfg.output.checkpoint_dir = *overrides.checkpoint_dir;
  if (overrides.seed) cfg.training.seed = *overrides.seed;
  if (overrides.joint_finetune) {
    if (cfg.architecture.kind != ModelKind::Fusion) throw ConfigError("--joint-finetune applies to fusion models");
    cfg.training.joint_finetune = cfg.architecture.fusion.joint_finetune = true;
  }
  return train_model(cfg, progress);
}

namespace {

const std::vector<double>& stored_mean(const RunConfig& cfg) {
  if (!cfg.data.channel_mean) throw ConfigError("checkpoint config has no data.channel_mean");
  return *cfg.data.channel_mean;
}

std::size_t manifest_au_width(const Manifest& m) {
  for (const auto& r : m.records)
    if (r.has_au_labels()) return r.au_count();
  return 0;
}

AuClassList resolve_manifest_aus(const Manifest& m, const AuClassList& source, const EvalOptions& options) {
  if (options.manifest_aus) return *options.manifest_aus;
  const std::size_t width = manifest_au_width(m);
  if (width == 0 || width == source.size()) return source;
  if (width == AuClassList::disfa().size()) return AuClassList::disfa();
  if (width == AuClassList::emotionet().size()) return AuClassList::emotionet();
  throw ConfigError("manifest has " + std::to_string(width) + " AU columns; name its AU list with --aus");
}

void write_outputs(const MetricsReport& report, const std::string& out) {
  if (out.empty()) return;
  const fs::path base(out);
  if (base.has_parent_path()) fs::create_directories(base.parent_path());
  fs::path json_path = base, csv_path = base;
  json_path.replace_extension(".json");
  csv_path.replace_extension(".csv");
  write_report(report, json_path.string(), ReportFormat::Json);
  if (!report.per_au.empty()) write_report(report, csv_path.string(), ReportFormat::Csv);
}

Manifest select(const std::string& manifest_path, const EvalOptions& options) {
  Manifest m = load_manifest(manifest_path);
  return options.split ? m.subset(*options.split) : m;
}

MetricsReport evaluate_expression_model(LoadedModel& lm, const Manifest& m, const EvalOptions& options) {
  auto set = load_labeled_set(m, lm.config, LabelKind::Emotion);
  auto pred = predict_classes(*lm.model, set, stored_mean(lm.config), options.batch_size);
  const auto& ec = lm.config.architecture.expression;
  const auto map = ec.merge_anger_disgust ? ClassMergeMap::anger_disgust(ec.class_order)
                                          : ClassMergeMap::identity(static_cast<int>(ec.class_order.size()));
  MetricsReport report;
  report.expression = evaluate_expression(pred, set.emotions, map.merged_names(ec.class_order));
  report.checkpoint_id = lm.id;
  report.samples = set.size();
  report.threshold = options.threshold;
  return report;
}

MetricsReport evaluate_aligned(LoadedModel& lm, const Manifest& m, const AuClassList& target,
                               const EvalOptions& options) {
  const AuClassList& source = lm.config.data.aus;
  const auto columns = au_alignment(source, target);
  RunConfig label_cfg = lm.config;
  label_cfg.data.aus = target;
  auto set = load_labeled_set(m, label_cfg, LabelKind::Aus);
  auto probs = predict_au_probabilities(*lm.model, set, stored_mean(lm.config), options.batch_size);
  std::vector<std::uint8_t> pred;
  pred.reserve(set.size() * target.size());
  for (std::size_t r = 0; r < set.size(); ++r)
    for (auto c : columns) pred.push_back(probs[r * source.size() + c] > options.threshold);
  auto report = evaluate_predictions(pred, set.aus, set.size(), target.labels(), options.cell_accuracy);
  report.dataset = target.name;
  report.checkpoint_id = lm.id;
  report.threshold = options.threshold;
  report.samples = set.size();
  for (int id : dropped_aus(source, target)) report.dropped_aus.push_back("AU" + std::to_string(id) + " " + au_name(id));
  return report;
}

}  // namespace

MetricsReport cmd_eval(const std::string& checkpoint, const std::string& manifest, const EvalOptions& options) {
  auto lm = load_model(checkpoint);
  const Manifest m = select(manifest, options);
  MetricsReport report;
  if (lm.config.architecture.kind == ModelKind::Expression) {
    report = evaluate_expression_model(lm, m, options);
  } else {
    const auto target = resolve_manifest_aus(m, lm.config.data.aus, options);
    if (!(target == lm.config.data.aus)) {
      std::string src, dst;
      for (auto s : lm.config.data.aus.labels()) src += " " + s;
      for (auto s : target.labels()) dst += " " + s;
      throw ProtocolError("checkpoint predicts" + src + " but the manifest is labelled with" + dst +
                          "; use cross-eval to align the AU lists");
    }
    report = evaluate_aligned(lm, m, target, options);
  }
  write_outputs(report, options.out);
  return report;
}

MetricsReport cmd_cross_eval(const std::string& checkpoint, const std::string& manifest, const EvalOptions& options) {
  auto lm = load_model(checkpoint);
  if (lm.config.architecture.kind == ModelKind::Expression)
    throw UsageError("cross-eval needs an AU checkpoint; " + checkpoint + " is an expression model");
  const Manifest m = select(manifest, options);
  const auto target = resolve_manifest_aus(m, lm.config.data.aus, options);
  auto report = evaluate_aligned(lm, m, target, options);
  write_outputs(report, options.out);
  return report;
}

FeatureCache cmd_extract_features(const std::string& checkpoint, const std::string& manifest, const std::string& out,
                                  const ExtractOptions& options) {
  auto lm = load_model(checkpoint);
  if (lm.config.architecture.kind != ModelKind::Expression)
    throw ConfigError(checkpoint + " is not an expression checkpoint");
  auto& net = dynamic_cast<ExpressionNet<float>&>(*lm.model);
  if (options.expected_width && *options.expected_width != net.feature_width()) {
    throw ConfigError("extractor feature width is " + std::to_string(net.feature_width()) + ", expected " +
                      std::to_string(*options.expected_width));
  }
  const auto set = load_labeled_set(load_manifest(manifest), lm.config, LabelKind::None);
  const auto& mean = stored_mean(lm.config);
  FeatureCache cache(net.feature_width(), lm.id);
  for (std::size_t start = 0; start < set.size(); start += options.batch_size) {
    const std::size_t end = std::min(set.size(), start + options.batch_size);
    std::vector<cv::Mat> images(set.images.begin() + static_cast<std::ptrdiff_t>(start),
                                set.images.begin() + static_cast<std::ptrdiff_t>(end));
    auto f = net.extract_features(to_tensor(images, mean));
    for (std::size_t i = start; i < end; ++i) cache.add(set.ids[i], f.data().subspan((i - start) * cache.width(), cache.width()));
  }
  if (!out.empty()) save_feature_cache(cache, out);
  return cache;
}

GradCheckReport cmd_gradcheck(std::ostream& out) {
  auto report = run_gradcheck_suite(default_gradcheck_cases());
  print_gradcheck_report(report, out);
  return report;
}

Manifest cmd_synth(const SynthSpec& spec, const std::string& out_dir) { return synth_generate(spec, out_dir); }

Heatmap cmd_saliency(const std::string& checkpoint, const std::string& manifest, const std::string& sample_id,
                     int au_id, const std::string& out, SaliencyMethod method) {
  auto lm = load_model(checkpoint);
  if (lm.config.architecture.kind == ModelKind::Expression)
    throw UsageError("saliency maps are computed for AU checkpoints");
  const auto& ids = lm.config.data.aus.ids;
  auto it = std::find(ids.begin(), ids.end(), au_id);
  if (it == ids.end()) throw UsageError("AU" + std::to_string(au_id) + " is not an output of " + checkpoint);
  const Manifest m = load_manifest(manifest);
  const SampleRecord* rec = nullptr;
  for (const auto& r : m.records)
    if (r.id == sample_id) rec = &r;
  if (!rec) throw DataError(manifest + ": no row with id " + sample_id);
  const auto img = crop_face(load_image(m.resolve(*rec), rec->id), *rec, lm.config.architecture.input_size(),
                             lm.config.data.forehead_margin);
  const auto x = to_tensor({img}, stored_mean(lm.config));
  const auto au = static_cast<std::size_t>(it - ids.begin());
  auto map = method == SaliencyMethod::Cam ? class_activation_map(*lm.model, x, au) : saliency_map(*lm.model, x, au);
  if (!out.empty()) {
    fs::path p(out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_heatmap_png(map, out);
    fs::path overlay = p.parent_path() / (p.stem().string() + "_overlay" + p.extension().string());
    write_heatmap_overlay_png(map, to_tensor({img}, {0.0, 0.0, 0.0}), overlay.string());
  }
  return map;
}

}  // namespace residen
