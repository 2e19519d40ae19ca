#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "residen/json_util.hpp"
#include "residen/tensor.hpp"

namespace residen {

/// Ordered FACS action-unit identifiers for one dataset.
struct AuClassList {
  std::string name;
  std::vector<int> ids;

  static AuClassList disfa();
  static AuClassList emotionet();
  /// "disfa", "emotionet", or a comma list of ids such as "1,2,4".
  static AuClassList parse(const std::string& spec);
  static AuClassList from_ids(std::vector<int> ids, std::string name = "custom");

  std::size_t size() const { return ids.size(); }
  /// Column labels "AU1", "AU2", ...
  std::vector<std::string> labels() const;
  bool operator==(const AuClassList& o) const { return ids == o.ids; }
};

/// FACS name of an action unit, e.g. 15 -> "Lip corner depressor".
std::string au_name(int id);

json to_json(const AuClassList& aus);
AuClassList au_class_list_from_json(const json& j);

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct BBox {
  double x = 0, y = 0, w = 0, h = 0;
};

struct SampleRecord {
  std::string id;
  std::string image_path;  // as written in the manifest
  Split split = Split::Train;
  std::optional<std::vector<cv::Point2d>> landmarks;
  std::optional<BBox> bbox;
  std::optional<std::vector<int>> au_intensities;
  std::optional<std::vector<std::uint8_t>> au_binary;
  std::optional<int> emotion;

  bool has_au_labels() const { return au_intensities.has_value() || au_binary.has_value(); }
  std::size_t au_count() const;
};

struct Manifest {
  std::string base_dir;  // relative image paths resolve against this
  std::vector<SampleRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  std::string resolve(const SampleRecord& r) const;
  /// Records of one split, in manifest order.
  Manifest subset(Split split) const;
  /// Ids whose image files do not exist.
  std::vector<std::string> missing_images() const;
};

inline constexpr const char* kManifestHeader = "id,image_path,split,landmarks,bbox,au_intensities,au_binary,emotion";

/// Parses and validates every row; errors name the line number.
Manifest load_manifest(const std::string& path);
void write_manifest(const Manifest& manifest, const std::string& path);

/// bit i = 1 iff v[i] >= threshold.
std::vector<std::uint8_t> binarize_intensity(const std::vector<int>& v, int threshold = 2);

/// Binary AU labels of a record: intensities binarized when present,
/// otherwise the binary column. DataError when the record has neither.
std::vector<std::uint8_t> au_labels(const SampleRecord& r, int threshold = 2);

/// Index into `source` for every AU of `target`; ProtocolError listing any
/// target AU that `source` lacks.
std::vector<std::size_t> au_alignment(const AuClassList& source, const AuClassList& target);
/// AUs of `source` that `target` drops.
std::vector<int> dropped_aus(const AuClassList& source, const AuClassList& target);

template <typename V>
std::vector<V> align_au_classes(const std::vector<V>& pred, const AuClassList& source, const AuClassList& target) {
  if (pred.size() != source.size()) {
    throw DimensionError("align_au_classes: " + std::to_string(pred.size()) + " values for " +
                         std::to_string(source.size()) + " source AUs");
  }
  std::vector<V> out;
  for (std::size_t i : au_alignment(source, target)) out.push_back(pred[i]);
  return out;
}

/// Crop rectangle for a record: landmark extremes extended upward by
/// `forehead_margin` x face height, or the bounding box; clamped to the
/// image. A record with neither is treated as pre-cropped (whole image).
cv::Rect compute_crop_rect(const SampleRecord& r, cv::Size image_size, double forehead_margin = 0.25);

/// Crops and resizes to size x size.
cv::Mat crop_face(const cv::Mat& image, const SampleRecord& r, int size = 128, double forehead_margin = 0.25);

/// Reads an 8-bit image as RGB. DataError naming the id when unreadable.
cv::Mat load_image(const std::string& path, const std::string& id);

struct AugmentSpec {
  bool enabled = true;
  double rotation_deg = 15.0;  // angle ~ U[-rotation_deg, +rotation_deg]
  double max_scale = 1.1;      // zoom ~ U[1, max_scale]
};

json to_json(const AugmentSpec& s);
AugmentSpec augment_spec_from_json(const json& j);

struct AugmentParams {
  double angle_deg = 0.0;
  double scale = 1.0;
};

AugmentParams sample_augment(const AugmentSpec& spec, std::mt19937_64& rng);
/// Seed for one sample's augmentation; depends only on (seed, epoch, id).
std::uint64_t augment_seed(std::uint64_t seed, std::uint64_t epoch, const std::string& id);
/// Rotation about the centre combined with a centre zoom; bilinear,
/// edge-replicated border. Output keeps the input size.
cv::Mat augment(const cv::Mat& image, const AugmentParams& params);

/// Images (RGB, 8-bit or float in [0,1]) to [N,3,S,S] floats in [0,1]
/// minus the per-channel mean.
Tensor<float> to_tensor(const std::vector<cv::Mat>& images, const std::vector<double>& channel_mean);
/// Per-channel mean of images scaled to [0,1].
std::vector<double> channel_mean(const std::vector<cv::Mat>& images);

/// Assigns splits so that no subject straddles train and val. The subject
/// of a record is its id up to the first `separator`. Roughly
/// `val_fraction` of subjects (at least one when there are two or more)
/// go to val; Test rows are left alone.
Manifest split_by_subject(const Manifest& manifest, double val_fraction, std::uint64_t seed,
                          char separator = '_');

}  // namespace residen
