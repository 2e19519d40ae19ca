#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "residen/checkpoint.hpp"
#include "residen/config.hpp"
#include "residen/data.hpp"
#include "residen/metrics.hpp"

namespace residen {

/// Cropped images with their labels, in manifest order.
struct LabeledSet {
  std::vector<std::string> ids;
  std::vector<cv::Mat> images;       // RGB 8-bit, size x size
  std::size_t num_aus = 0;
  std::vector<std::uint8_t> aus;     // row-major [size, num_aus]; empty for emotion sets
  std::vector<int> emotions;         // merged class indices; empty for AU sets

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

enum class LabelKind { Aus, Emotion, None };

inline LabelKind label_kind(ModelKind kind) {
  return kind == ModelKind::Expression ? LabelKind::Emotion : LabelKind::Aus;
}

/// DataError listing the ids whose image files are missing.
void check_images_exist(const Manifest& manifest);

/// Loads and crops every record of `manifest`. Missing image files are
/// reported together in one DataError before anything is decoded.
LabeledSet load_labeled_set(const Manifest& manifest, const RunConfig& cfg, LabelKind kind);

/// Sigmoid AU probabilities, row-major [N, A], eval mode, in batches. A
/// fusion model reads its expression features from `cache` when given.
std::vector<double> predict_au_probabilities(Network<float>& model, const LabeledSet& set,
                                             const std::vector<double>& channel_mean, std::size_t batch_size,
                                             const FeatureCache* cache = nullptr);
/// Arg-max class per sample.
std::vector<int> predict_classes(Network<float>& model, const LabeledSet& set,
                                 const std::vector<double>& channel_mean, std::size_t batch_size);

/// Mean per-AU accuracy and final score, or for an expression model the
/// accuracy and the mean one-vs-rest final score over classes.
struct SplitScores {
  double mean_accuracy = 0.0;
  double mean_final_score = 0.0;
};
SplitScores score_split(Network<float>& model, ModelKind kind, const LabeledSet& set,
                        const std::vector<double>& channel_mean, std::size_t batch_size,
                        const FeatureCache* cache = nullptr);

inline constexpr const char* kEpochLogHeader = "epoch,train_loss,val_mean_accuracy,val_mean_final_score";

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::optional<SplitScores> val;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  std::optional<double> best_score;
  bool stopped_early = false;
  /// Mean per-AU train accuracy after the last epoch, when tracked.
  std::optional<double> train_accuracy;
  std::string checkpoint_dir;
};

/// Files written into the checkpoint directory.
inline constexpr const char* kBestCheckpoint = "best.ckpt";
inline constexpr const char* kLastCheckpoint = "last.ckpt";
inline constexpr const char* kEpochLog = "epoch_log.csv";
inline constexpr const char* kResolvedConfig = "resolved_config.json";
inline constexpr const char* kLockFile = "train.lock";

/// Full training run: seeded init, per-epoch seeded shuffling and
/// augmentation, Adam, early stopping on val final score. A non-finite
/// loss aborts with NumericError and leaves the previous last.ckpt intact.
TrainResult train_model(RunConfig cfg, std::ostream* progress = nullptr);

}  // namespace residen
