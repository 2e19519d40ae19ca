#include "residen/train.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "residen/fusion.hpp"
#include "residen/ops.hpp"
#include "residen/rng.hpp"

namespace residen {

namespace fs = std::filesystem;

void check_images_exist(const Manifest& manifest) {
  const auto missing = manifest.missing_images();
  if (missing.empty()) return;
  std::string list;
  for (std::size_t i = 0; i < missing.size() && i < 10; ++i) list += (i ? ", " : "") + missing[i];
  if (missing.size() > 10) list += ", ... (" + std::to_string(missing.size()) + " total)";
  throw DataError("missing image files for ids: " + list);
}

LabeledSet load_labeled_set(const Manifest& manifest, const RunConfig& cfg, LabelKind kind) {
  check_images_exist(manifest);
  const int size = cfg.architecture.input_size();
  LabeledSet set;
  set.num_aus = kind == LabelKind::Aus ? cfg.data.aus.size() : 0;
  std::optional<ClassMergeMap> merge;
  std::size_t num_raw_classes = 0;
  if (kind == LabelKind::Emotion) {
    const auto& ec = cfg.architecture.expression;
    num_raw_classes = ec.class_order.size();
    merge = ec.merge_anger_disgust ? ClassMergeMap::anger_disgust(ec.class_order)
                                   : ClassMergeMap::identity(static_cast<int>(num_raw_classes));
  }
  for (const auto& r : manifest.records) {
    if (kind == LabelKind::Aus) {
      auto labels = au_labels(r, cfg.data.intensity_threshold);
      if (labels.size() != set.num_aus) {
        throw DataError(r.id + ": " + std::to_string(labels.size()) + " AU labels, config lists " +
                        std::to_string(set.num_aus) + " AUs");
      }
      set.aus.insert(set.aus.end(), labels.begin(), labels.end());
    } else if (kind == LabelKind::Emotion) {
      if (!r.emotion) throw DataError(r.id + ": no emotion label");
      if (*r.emotion < 0 || static_cast<std::size_t>(*r.emotion) >= num_raw_classes) {
        throw LabelError(r.id + ": emotion " + std::to_string(*r.emotion) + " outside the " +
                         std::to_string(num_raw_classes) + " configured classes");
      }
      set.emotions.push_back((*merge)(*r.emotion));
    }
    auto img = load_image(manifest.resolve(r), r.id);
    set.images.push_back(crop_face(img, r, size, cfg.data.forehead_margin));
    set.ids.push_back(r.id);
  }
  return set;
}

namespace {

std::vector<cv::Mat> slice(const std::vector<cv::Mat>& v, const std::vector<std::size_t>& idx) {
  std::vector<cv::Mat> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

Tensor<float> cached_features(const FeatureCache& cache, const LabeledSet& set, const std::vector<std::size_t>& idx) {
  std::vector<float> values;
  values.reserve(idx.size() * cache.width());
  for (auto i : idx) {
    auto row = cache.find(set.ids[i]);
    if (row.empty()) throw DataError("feature cache has no row for " + set.ids[i]);
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor<float>({idx.size(), cache.width()}, std::move(values));
}

FusionModel<float>& as_fusion(Network<float>& model) {
  auto* f = dynamic_cast<FusionModel<float>*>(&model);
  if (!f) throw UsageError("feature cache given for a model that is not a fusion model");
  return *f;
}

Tensor<float> logits_for(Network<float>& model, const LabeledSet& set, const std::vector<std::size_t>& idx,
                         const std::vector<double>& mean, const ForwardContext& ctx, const FeatureCache* cache,
                         const std::vector<cv::Mat>* images = nullptr) {
  auto x = to_tensor(images ? *images : slice(set.images, idx), mean);
  if (cache) return as_fusion(model).run_with_expression(x, cached_features(*cache, set, idx), ctx).logits;
  return model.run(x, ctx).logits;
}

template <typename F>
void for_batches(std::size_t n, std::size_t batch, F&& f) {
  for (std::size_t start = 0; start < n; start += batch) {
    std::vector<std::size_t> idx(std::min(batch, n - start));
    std::iota(idx.begin(), idx.end(), start);
    f(idx);
  }
}

}  // namespace

std::vector<double> predict_au_probabilities(Network<float>& model, const LabeledSet& set,
                                             const std::vector<double>& channel_mean, std::size_t batch_size,
                                             const FeatureCache* cache) {
  std::vector<double> out;
  out.reserve(set.size() * model.num_outputs());
  for_batches(set.size(), batch_size, [&](const std::vector<std::size_t>& idx) {
    auto p = sigmoid(logits_for(model, set, idx, channel_mean, ForwardContext{Mode::Eval, 0}, cache));
    out.insert(out.end(), p.data().begin(), p.data().end());
  });
  return out;
}

std::vector<int> predict_classes(Network<float>& model, const LabeledSet& set,
                                 const std::vector<double>& channel_mean, std::size_t batch_size) {
  std::vector<int> out;
  const std::size_t k = model.num_outputs();
  for_batches(set.size(), batch_size, [&](const std::vector<std::size_t>& idx) {
    auto z = logits_for(model, set, idx, channel_mean, ForwardContext{Mode::Eval, 0}, nullptr);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto row = z.data().subspan(r * k, k);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  });
  return out;
}

SplitScores score_split(Network<float>& model, ModelKind kind, const LabeledSet& set,
                        const std::vector<double>& channel_mean, std::size_t batch_size, const FeatureCache* cache) {
  if (kind == ModelKind::Expression) {
    auto pred = predict_classes(model, set, channel_mean, batch_size);
    const int k = static_cast<int>(model.num_outputs());
    std::vector<ConfusionCounts> counts(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < pred.size(); ++i) {
      for (int c = 0; c < k; ++c) {
        const bool p = pred[i] == c, t = set.emotions[i] == c;
        auto& cc = counts[static_cast<std::size_t>(c)];
        (p ? (t ? cc.tp : cc.fp) : (t ? cc.fn : cc.tn))++;
      }
    }
    std::vector<double> fs;
    for (const auto& c : counts) fs.push_back(final_score(au_accuracy(c), f1(c)));
    return {expression_accuracy(pred, set.emotions), mean_over_aus(fs)};
  }
  auto probs = predict_au_probabilities(model, set, channel_mean, batch_size, cache);
  std::vector<std::uint8_t> pred(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) pred[i] = probs[i] > 0.5;
  std::vector<std::string> names(set.num_aus);
  auto report = evaluate_predictions(pred, set.aus, set.size(), names);
  return {report.mean_accuracy, report.mean_final_score};
}

namespace {

class DirLock {
 public:
  explicit DirLock(const fs::path& path) : path_(path) {
    fd_ = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      throw UsageError("checkpoint directory is in use (lock file " + path.string() +
                       " exists); remove it if no training process is running");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
  }
  ~DirLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string log_line(const EpochRecord& r) {
  std::string s = std::to_string(r.epoch) + "," + format_double(r.train_loss) + ",";
  if (r.val) s += format_double(r.val->mean_accuracy) + "," + format_double(r.val->mean_final_score);
  else s += ",";
  return s;
}

Tensor<float> au_targets(const LabeledSet& set, const std::vector<std::size_t>& idx) {
  std::vector<float> y;
  y.reserve(idx.size() * set.num_aus);
  for (auto i : idx)
    for (std::size_t a = 0; a < set.num_aus; ++a) y.push_back(set.aus[i * set.num_aus + a]);
  return Tensor<float>({idx.size(), set.num_aus}, std::move(y));
}

void init_fusion_extractor(Network<float>& model, const RunConfig& cfg) {
  auto ckpt = load_checkpoint(cfg.training.expression_checkpoint);
  auto src = ckpt.run_config();
  if (src.architecture.kind != ModelKind::Expression)
    throw ConfigError(cfg.training.expression_checkpoint + " is not an expression checkpoint");
  if (to_json(src.architecture.expression) != to_json(cfg.architecture.fusion.expression)) {
    throw ConfigError(cfg.training.expression_checkpoint +
                      ": expression architecture differs from architecture.fusion.expression");
  }
  const auto copied = load_parameters(model.params(), ckpt, "expression.", true);
  if (copied != ckpt.params.size()) throw ConfigError("expression checkpoint does not fit the fusion extractor");
}

void init_fusion_image_branch(Network<float>& model, const RunConfig& cfg) {
  if (cfg.training.image_from_scratch) return;
  if (cfg.training.image_checkpoint.empty()) {
    throw ConfigError("fusion training starts the image branch from a standalone checkpoint; set "
                      "training.image_checkpoint, or training.image_from_scratch for random weights");
  }
  auto ckpt = load_checkpoint(cfg.training.image_checkpoint);
  auto src = ckpt.run_config();
  if (src.architecture.kind != ModelKind::Residen)
    throw ConfigError(cfg.training.image_checkpoint + " is not a standalone ResiDen checkpoint");
  if (to_json(src.architecture.residen) != to_json(cfg.architecture.fusion.image)) {
    throw ConfigError(cfg.training.image_checkpoint + ": ResiDen architecture differs from architecture.fusion.image");
  }
  const auto copied = load_parameters(model.params(), ckpt, "image.", true);
  if (copied != ckpt.params.size()) throw ConfigError("standalone checkpoint does not fit the fusion image branch");
}

}  // namespace

TrainResult train_model(RunConfig cfg, std::ostream* progress) {
  cfg.validate();
  const auto kind = cfg.architecture.kind;
  const auto& tc = cfg.training;
  if (kind == ModelKind::Fusion && tc.expression_checkpoint.empty())
    throw ConfigError("fusion training needs training.expression_checkpoint (a trained expression extractor)");
  if (cfg.data.manifest.empty()) throw ConfigError("data.manifest is required for training");
  const Manifest manifest = load_manifest(cfg.data.manifest);
  const Manifest train_m = manifest.subset(Split::Train), val_m = manifest.subset(Split::Val);
  if (train_m.empty()) throw DataError(cfg.data.manifest + ": no train rows");
  {
    Manifest both = train_m;
    both.records.insert(both.records.end(), val_m.records.begin(), val_m.records.end());
    check_images_exist(both);
  }
  const LabeledSet train = load_labeled_set(train_m, cfg, label_kind(kind));
  const LabeledSet val = load_labeled_set(val_m, cfg, label_kind(kind));
  if (!cfg.data.channel_mean) cfg.data.channel_mean = channel_mean(train.images);
  const auto& mean = *cfg.data.channel_mean;

  std::optional<FeatureCache> cache;
  if (!cfg.data.feature_cache.empty()) {
    cache = load_feature_cache(cfg.data.feature_cache);
    if (cache->source_id() != checkpoint_id(cfg.training.expression_checkpoint)) {
      throw ConfigError(cfg.data.feature_cache + " was extracted by a different checkpoint than " +
                        cfg.training.expression_checkpoint);
    }
    if (cache->width() != static_cast<std::size_t>(cfg.architecture.fusion.expression.feature_width())) {
      throw ConfigError("feature cache width " + std::to_string(cache->width()) + " but the extractor emits " +
                        std::to_string(cfg.architecture.fusion.expression.feature_width()));
    }
  }
  const FeatureCache* cache_ptr = cache ? &*cache : nullptr;

  auto model = build_model(cfg.architecture, tc.seed);
  if (kind == ModelKind::Fusion) {
    init_fusion_extractor(*model, cfg);
    init_fusion_image_branch(*model, cfg);
  }
  Adam adam(AdamOptions{tc.lr, tc.beta1, tc.beta2, tc.eps});

  const fs::path dir(cfg.output.checkpoint_dir);
  fs::create_directories(dir);
  DirLock lock(dir / kLockFile);
  {
    std::ofstream out(dir / kResolvedConfig);
    out << to_json(cfg).dump(2) << "\n";
  }
  std::ofstream log(dir / kEpochLog, std::ios::trunc);
  if (!log) throw IoError("cannot write " + (dir / kEpochLog).string());
  log << kEpochLogHeader << "\n" << std::flush;

  TrainResult result;
  result.checkpoint_dir = dir.string();
  save_checkpoint(make_checkpoint(cfg, *model, &adam, 0), (dir / kLastCheckpoint).string());
  save_checkpoint(make_checkpoint(cfg, *model, &adam, 0), (dir / kBestCheckpoint).string());

  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const std::uint64_t epoch_seed = mix_seed(tc.seed, epoch);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(epoch_seed);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size, ++batch_index) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(order.size(), start + tc.batch_size)));
      std::vector<cv::Mat> images;
      for (auto i : idx) {
        std::mt19937_64 aug_rng(augment_seed(tc.seed, epoch, train.ids[i]));
        images.push_back(augment(train.images[i], sample_augment(cfg.data.augment, aug_rng)));
      }
      const ForwardContext ctx{Mode::Train, mix_seed(epoch_seed, batch_index)};
      Tape<float> tape;
      Tape<float>::Scope scope(tape);
      auto z = logits_for(*model, train, idx, mean, ctx, cache_ptr, &images);
      Tensor<float> loss;
      if (kind == ModelKind::Expression) {
        std::vector<int> labels;
        for (auto i : idx) labels.push_back(train.emotions[i]);
        loss = crossentropy_loss(z, labels);
      } else {
        loss = bce_multilabel_loss(sigmoid(z), au_targets(train, idx));
      }
      if (auto pen = model->penalty(); pen.defined()) loss = add(loss, pen);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index) + "; last good checkpoint kept at " +
                           (dir / kLastCheckpoint).string());
      }
      tape.backward(loss);
      adam.step(model->params());
      model->params().zero_grad();
      loss_sum += value * static_cast<double>(idx.size());
    }

    EpochRecord rec{epoch, loss_sum / static_cast<double>(train.size()), std::nullopt};
    if (!val.empty()) rec.val = score_split(*model, kind, val, mean, tc.batch_size, cache_ptr);
    result.log.push_back(rec);
    log << log_line(rec) << "\n" << std::flush;

    const auto ckpt = make_checkpoint(cfg, *model, &adam, epoch);
    save_checkpoint(ckpt, (dir / kLastCheckpoint).string());
    const double score = rec.val ? rec.val->mean_final_score : -rec.train_loss;
    if (!result.best_score || score > *result.best_score) {
      result.best_score = score;
      result.best_epoch = epoch;
      save_checkpoint(ckpt, (dir / kBestCheckpoint).string());
      stale = 0;
    } else {
      ++stale;
    }
    if (progress) *progress << "epoch " << epoch << " " << log_line(rec) << "\n";

    if (tc.stop_at_train_accuracy) {
      result.train_accuracy = score_split(*model, kind, train, mean, tc.batch_size, cache_ptr).mean_accuracy;
      if (*result.train_accuracy >= *tc.stop_at_train_accuracy) {
        result.stopped_early = true;
        break;
      }
    }
    if (rec.val && stale >= tc.patience) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace residen
