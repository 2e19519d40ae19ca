#pragma once

#include <optional>
#include <ostream>
#include <string>

#include "residen/checkpoint.hpp"
#include "residen/gradcheck_suite.hpp"
#include "residen/metrics.hpp"
#include "residen/synth.hpp"
#include "residen/train.hpp"

namespace residen {

struct TrainOverrides {
  std::optional<std::string> manifest;
  std::optional<std::string> checkpoint_dir;
  std::optional<std::uint64_t> seed;
  bool joint_finetune = false;
};

/// Loads the config file, applies command-line overrides and trains.
TrainResult cmd_train(const std::string& config_path, const TrainOverrides& overrides = {},
                      std::ostream* progress = nullptr);

struct EvalOptions {
  double threshold = 0.5;
  /// AU list of the manifest; defaults to the checkpoint's list when the
  /// widths agree, otherwise DISFA (12) or EmotioNet (11) by width.
  std::optional<AuClassList> manifest_aus;
  /// Restrict to one split; all rows when unset.
  std::optional<Split> split;
  bool cell_accuracy = false;
  std::size_t batch_size = 32;
  /// Writes <out>.json and, for AU models, <out>.csv when non-empty.
  std::string out;
};

/// Evaluates a checkpoint on a manifest with the same AU list. A different
/// AU list is a ProtocolError pointing at cross-eval.
MetricsReport cmd_eval(const std::string& checkpoint, const std::string& manifest, const EvalOptions& options = {});

/// Evaluates after aligning the checkpoint's AU outputs to the manifest's
/// AU list; AUs the manifest lacks are dropped and named in the report.
MetricsReport cmd_cross_eval(const std::string& checkpoint, const std::string& manifest,
                             const EvalOptions& options = {});

struct ExtractOptions {
  /// ConfigError unless the extractor's feature width equals this.
  std::optional<std::size_t> expected_width;
  std::size_t batch_size = 32;
};

/// Expression features for every manifest row, written to `out`.
FeatureCache cmd_extract_features(const std::string& checkpoint, const std::string& manifest,
                                  const std::string& out, const ExtractOptions& options = {});

/// Runs the f64 gradient-check table; the report says whether all passed.
GradCheckReport cmd_gradcheck(std::ostream& out);

Manifest cmd_synth(const SynthSpec& spec, const std::string& out_dir);

enum class SaliencyMethod { Gradient, Cam };

/// Heatmap for AU `au_id` on manifest row `sample_id`; writes a grayscale
/// PNG to `out` and an overlay next to it.
Heatmap cmd_saliency(const std::string& checkpoint, const std::string& manifest, const std::string& sample_id,
                     int au_id, const std::string& out, SaliencyMethod method = SaliencyMethod::Cam);

}  // namespace residen
