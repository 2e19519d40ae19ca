#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "residen/data.hpp"

namespace residen {

/// Pattern: AUs are independent draws and the emotion is the nearest
/// prototype. Latent: the emotion is drawn first and AUs follow it.
enum class SynthMode { Pattern, Latent };

struct SynthSpec {
  std::size_t n = 64;
  AuClassList aus = AuClassList::disfa();
  int num_emotions = 7;
  std::uint64_t seed = 0;
  SynthMode mode = SynthMode::Pattern;
  double au_prior = 0.3;     // pattern mode
  double latent_on = 0.9;    // latent mode: P(AU | AU in the emotion's prototype)
  double latent_off = 0.05;  // latent mode: P(AU | AU not in the prototype)
  double val_fraction = 0.2;
  int subjects = 8;
  int image_size = 128;
  double noise = 0.02;
};

/// What the renderer draws; intensities are per id in `aus`.
struct FaceSpec {
  std::vector<int> aus;
  std::vector<int> intensities;
  cv::Point2d offset{0, 0};
  double head_scale = 1.0;
  cv::Vec3d skin{0.85, 0.7, 0.6};
  cv::Vec3d background{0.45, 0.45, 0.45};
};

/// RGB 8-bit face sprite; same spec and noise seed give identical pixels.
cv::Mat render_face(const FaceSpec& face, int size, std::uint64_t noise_seed, double noise = 0.02);

/// AU ids characteristic of each class in default_emotion_classes() order.
const std::vector<std::vector<int>>& emotion_prototypes();

/// Nearest prototype (Hamming distance over `aus`) among the first
/// `num_emotions` classes; ties go to the lower index.
int pattern_emotion(const std::vector<std::uint8_t>& present, const AuClassList& aus, int num_emotions);

/// Draws the label side of a corpus without rendering.
struct SynthSample {
  std::string id;
  Split split = Split::Train;
  std::vector<int> intensities;
  int emotion = 0;
  FaceSpec face;
  std::uint64_t noise_seed = 0;
};
std::vector<SynthSample> synth_samples(const SynthSpec& spec);

/// Writes out_dir/images/<id>.png and out_dir/manifest.csv; returns the manifest.
Manifest synth_generate(const SynthSpec& spec, const std::string& out_dir);

}  // namespace residen
