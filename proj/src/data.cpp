#include "residen/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "residen/rng.hpp"

namespace fs = std::filesystem;

namespace residen {

AuClassList AuClassList::disfa() {
  return {"disfa", {1, 2, 4, 5, 6, 9, 12, 15, 17, 20, 25, 26}};
}

AuClassList AuClassList::emotionet() {
  return {"emotionet", {1, 2, 4, 5, 6, 9, 12, 17, 20, 25, 26}};
}

AuClassList AuClassList::from_ids(std::vector<int> ids, std::string name) {
  if (ids.empty()) throw ConfigError("AU class list must not be empty");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 1) throw ConfigError("AU ids must be positive, got " + std::to_string(ids[i]));
    if (i > 0 && ids[i] <= ids[i - 1]) throw ConfigError("AU ids must be unique and ascending");
  }
  return {std::move(name), std::move(ids)};
}

AuClassList AuClassList::parse(const std::string& spec) {
  if (spec == "disfa") return disfa();
  if (spec == "emotionet") return emotionet();
  std::vector<int> ids;
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      ids.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("bad AU list '" + spec + "': expected disfa, emotionet, or ids like 1,2,4");
    }
  }
  return from_ids(std::move(ids));
}

std::vector<std::string> AuClassList::labels() const {
  std::vector<std::string> out;
  for (int id : ids) out.push_back("AU" + std::to_string(id));
  return out;
}

std::string au_name(int id) {
  static const std::map<int, std::string> names{
      {1, "Inner brow raiser"},     {2, "Outer brow raiser"},    {4, "Brow lowerer"},
      {5, "Upper lid raiser"},      {6, "Cheek raiser"},         {7, "Lid tightener"},
      {9, "Nose wrinkler"},         {10, "Upper lip raiser"},    {12, "Lip corner puller"},
      {14, "Dimpler"},              {15, "Lip corner depressor"}, {17, "Chin raiser"},
      {20, "Lip stretcher"},        {23, "Lip tightener"},       {24, "Lip pressor"},
      {25, "Lips part"},            {26, "Jaw drop"},            {43, "Eyes closed"}};
  auto it = names.find(id);
  return it == names.end() ? "AU" + std::to_string(id) : it->second;
}

json to_json(const AuClassList& aus) {
  return json{{"name", aus.name}, {"ids", aus.ids}};
}

AuClassList au_class_list_from_json(const json& j) {
  if (j.is_string()) return AuClassList::parse(j.get<std::string>());
  if (j.is_array()) return AuClassList::from_ids(j.get<std::vector<int>>());
  reject_unknown_keys(j, {"name", "ids"}, "data.au_classes");
  std::vector<int> ids;
  std::string name = "custom";
  read_opt(j, "ids", ids, "data.au_classes");
  read_opt(j, "name", name, "data.au_classes");
  return AuClassList::from_ids(std::move(ids), std::move(name));
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw DataError("unknown split '" + s + "' (expected train, val or test)");
}

std::size_t SampleRecord::au_count() const {
  if (au_intensities) return au_intensities->size();
  if (au_binary) return au_binary->size();
  return 0;
}

std::string Manifest::resolve(const SampleRecord& r) const {
  fs::path p(r.image_path);
  if (p.is_absolute() || base_dir.empty()) return p.string();
  return (fs::path(base_dir) / p).string();
}

Manifest Manifest::subset(Split split) const {
  Manifest m{base_dir, {}};
  for (const auto& r : records) {
    if (r.split == split) m.records.push_back(r);
  }
  return m;
}

std::vector<std::string> Manifest::missing_images() const {
  std::vector<std::string> missing;
  for (const auto& r : records) {
    if (!fs::exists(resolve(r))) missing.push_back(r.id);
  }
  return missing;
}

namespace {

std::vector<std::string> split_str(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(what + ": '" + s + "' is not a number");
  }
}

int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(what + ": '" + s + "' is not an integer");
  }
}

std::string fmt_num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

SampleRecord parse_row(const std::vector<std::string>& cells) {
  SampleRecord r;
  r.id = cells[0];
  if (r.id.empty()) throw DataError("empty id");
  r.image_path = cells[1];
  if (r.image_path.empty()) throw DataError("empty image_path");
  r.split = parse_split(cells[2]);
  if (!cells[3].empty()) {
    std::vector<cv::Point2d> pts;
    for (const auto& p : split_str(cells[3], ';')) {
      auto xy = split_str(p, ':');
      if (xy.size() != 2) throw DataError("landmark '" + p + "' is not x:y");
      pts.emplace_back(parse_double(xy[0], "landmark x"), parse_double(xy[1], "landmark y"));
    }
    r.landmarks = std::move(pts);
  }
  if (!cells[4].empty()) {
    auto b = split_str(cells[4], ';');
    if (b.size() != 4) throw DataError("bbox must be x;y;w;h");
    BBox box{parse_double(b[0], "bbox x"), parse_double(b[1], "bbox y"), parse_double(b[2], "bbox w"),
             parse_double(b[3], "bbox h")};
    if (box.w <= 0 || box.h <= 0) throw DataError("bbox width and height must be positive");
    r.bbox = box;
  }
  if (!cells[5].empty()) {
    std::vector<int> v;
    for (const auto& s : split_str(cells[5], '|')) {
      int x = parse_int(s, "au intensity");
      if (x < 0 || x > 5) throw DataError("AU intensity " + std::to_string(x) + " outside [0,5]");
      v.push_back(x);
    }
    r.au_intensities = std::move(v);
  }
  if (!cells[6].empty()) {
    std::vector<std::uint8_t> v;
    for (const auto& s : split_str(cells[6], '|')) {
      int x = parse_int(s, "au binary");
      if (x != 0 && x != 1) throw DataError("AU binary value " + std::to_string(x) + " is not 0 or 1");
      v.push_back(static_cast<std::uint8_t>(x));
    }
    r.au_binary = std::move(v);
  }
  if (r.au_intensities && r.au_binary && r.au_intensities->size() != r.au_binary->size()) {
    throw DataError("au_intensities and au_binary list different AU counts");
  }
  if (!cells[7].empty()) {
    int e = parse_int(cells[7], "emotion");
    if (e < 0) throw DataError("emotion index must be >= 0");
    r.emotion = e;
  }
  if (!r.has_au_labels() && !r.emotion) throw DataError("row carries neither AU labels nor an emotion");
  return r;
}

}  // namespace

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  Manifest m;
  m.base_dir = fs::path(path).parent_path().string();
  std::string line;
  std::size_t lineno = 0;
  auto strip = [](std::string& s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
  };
  if (!std::getline(in, line)) throw DataError(path + ": empty file, expected header '" + kManifestHeader + "'");
  ++lineno;
  strip(line);
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  if (line != kManifestHeader) {
    throw DataError(path + ":1: bad header '" + line + "', expected '" + kManifestHeader + "'");
  }
  std::set<std::string> ids;
  std::size_t au_width = 0;
  while (std::getline(in, line)) {
    ++lineno;
    strip(line);
    if (line.empty()) continue;
    auto cells = split_str(line, ',');
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    if (cells.size() != 8) {
      throw DataError(where + "expected 8 columns, found " + std::to_string(cells.size()));
    }
    SampleRecord r;
    try {
      r = parse_row(cells);
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
    if (!ids.insert(r.id).second) throw DataError(where + "duplicate id '" + r.id + "'");
    if (r.has_au_labels()) {
      if (au_width == 0) au_width = r.au_count();
      if (r.au_count() != au_width) {
        throw DataError(where + "row lists " + std::to_string(r.au_count()) + " AUs, earlier rows " +
                        std::to_string(au_width));
      }
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

void write_manifest(const Manifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest '" + path + "'");
  out << kManifestHeader << "\n";
  for (const auto& r : manifest.records) {
    out << r.id << "," << r.image_path << "," << to_string(r.split) << ",";
    if (r.landmarks) {
      for (std::size_t i = 0; i < r.landmarks->size(); ++i) {
        out << (i ? ";" : "") << fmt_num((*r.landmarks)[i].x) << ":" << fmt_num((*r.landmarks)[i].y);
      }
    }
    out << ",";
    if (r.bbox) out << fmt_num(r.bbox->x) << ";" << fmt_num(r.bbox->y) << ";" << fmt_num(r.bbox->w) << ";" << fmt_num(r.bbox->h);
    out << ",";
    if (r.au_intensities) {
      for (std::size_t i = 0; i < r.au_intensities->size(); ++i) out << (i ? "|" : "") << (*r.au_intensities)[i];
    }
    out << ",";
    if (r.au_binary) {
      for (std::size_t i = 0; i < r.au_binary->size(); ++i) out << (i ? "|" : "") << int((*r.au_binary)[i]);
    }
    out << ",";
    if (r.emotion) out << *r.emotion;
    out << "\n";
  }
  if (!out) throw IoError("failed writing manifest '" + path + "'");
}

std::vector<std::uint8_t> binarize_intensity(const std::vector<int>& v, int threshold) {
  std::vector<std::uint8_t> out;
  out.reserve(v.size());
  for (int x : v) {
    if (x < 0 || x > 5) throw DataError("AU intensity " + std::to_string(x) + " outside [0,5]");
    out.push_back(x >= threshold ? 1 : 0);
  }
  return out;
}

std::vector<std::uint8_t> au_labels(const SampleRecord& r, int threshold) {
  if (r.au_intensities) return binarize_intensity(*r.au_intensities, threshold);
  if (r.au_binary) return *r.au_binary;
  throw DataError("sample '" + r.id + "' has no AU labels");
}

std::vector<std::size_t> au_alignment(const AuClassList& source, const AuClassList& target) {
  std::vector<std::size_t> idx;
  std::vector<int> missing;
  for (int id : target.ids) {
    auto it = std::find(source.ids.begin(), source.ids.end(), id);
    if (it == source.ids.end()) {
      missing.push_back(id);
    } else {
      idx.push_back(static_cast<std::size_t>(it - source.ids.begin()));
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (int id : missing) list += (list.empty() ? "" : ", ") + std::string("AU") + std::to_string(id);
    throw ProtocolError("target AUs missing from the source model: " + list);
  }
  return idx;
}

std::vector<int> dropped_aus(const AuClassList& source, const AuClassList& target) {
  std::vector<int> out;
  for (int id : source.ids) {
    if (std::find(target.ids.begin(), target.ids.end(), id) == target.ids.end()) out.push_back(id);
  }
  return out;
}

cv::Rect compute_crop_rect(const SampleRecord& r, cv::Size image_size, double forehead_margin) {
  double x0 = 0, y0 = 0, x1 = image_size.width, y1 = image_size.height;
  if (r.landmarks && !r.landmarks->empty()) {
    x0 = x1 = (*r.landmarks)[0].x;
    y0 = y1 = (*r.landmarks)[0].y;
    for (const auto& p : *r.landmarks) {
      x0 = std::min(x0, p.x);
      x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y);
      y1 = std::max(y1, p.y);
    }
    y0 -= forehead_margin * (y1 - y0);
  } else if (r.bbox) {
    x0 = r.bbox->x;
    y0 = r.bbox->y;
    x1 = r.bbox->x + r.bbox->w;
    y1 = r.bbox->y + r.bbox->h;
  }
  const int left = std::clamp(static_cast<int>(std::floor(x0)), 0, image_size.width);
  const int top = std::clamp(static_cast<int>(std::floor(y0)), 0, image_size.height);
  const int right = std::clamp(static_cast<int>(std::ceil(x1)), 0, image_size.width);
  const int bottom = std::clamp(static_cast<int>(std::ceil(y1)), 0, image_size.height);
  if (right <= left || bottom <= top) {
    throw DataError("sample '" + r.id + "': face crop has zero area");
  }
  return {left, top, right - left, bottom - top};
}

cv::Mat crop_face(const cv::Mat& image, const SampleRecord& r, int size, double forehead_margin) {
  const cv::Rect rect = compute_crop_rect(r, image.size(), forehead_margin);
  cv::Mat out;
  const cv::Mat roi = image(rect);
  if (roi.cols == size && roi.rows == size) {
    out = roi.clone();
  } else {
    cv::resize(roi, out, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
  }
  return out;
}

cv::Mat load_image(const std::string& path, const std::string& id) {
  cv::Mat bgr = cv::imread(path, cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("sample '" + id + "': cannot read image '" + path + "'");
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

json to_json(const AugmentSpec& s) {
  return json{{"enabled", s.enabled}, {"rotation_deg", s.rotation_deg}, {"max_scale", s.max_scale}};
}

AugmentSpec augment_spec_from_json(const json& j) {
  reject_unknown_keys(j, {"enabled", "rotation_deg", "max_scale"}, "data.augment");
  AugmentSpec s;
  read_opt(j, "enabled", s.enabled, "data.augment");
  read_opt(j, "rotation_deg", s.rotation_deg, "data.augment");
  read_opt(j, "max_scale", s.max_scale, "data.augment");
  if (s.rotation_deg < 0 || s.rotation_deg > 180) throw ConfigError("data.augment.rotation_deg must lie in [0,180]");
  if (s.max_scale < 1.0) throw ConfigError("data.augment.max_scale must be >= 1");
  return s;
}

AugmentParams sample_augment(const AugmentSpec& spec, std::mt19937_64& rng) {
  AugmentParams p;
  if (!spec.enabled) return p;
  p.angle_deg = uniform(rng, -spec.rotation_deg, spec.rotation_deg);
  p.scale = uniform(rng, 1.0, spec.max_scale);
  return p;
}

std::uint64_t augment_seed(std::uint64_t seed, std::uint64_t epoch, const std::string& id) {
  return mix_seed(mix_seed(seed, epoch), fnv1a(id));
}

cv::Mat augment(const cv::Mat& image, const AugmentParams& params) {
  if (params.angle_deg == 0.0 && params.scale == 1.0) return image.clone();
  const cv::Point2f centre((image.cols - 1) * 0.5f, (image.rows - 1) * 0.5f);
  const cv::Mat m = cv::getRotationMatrix2D(centre, params.angle_deg, params.scale);
  cv::Mat out;
  cv::warpAffine(image, out, m, image.size(), cv::INTER_LINEAR, cv::BORDER_REPLICATE);
  return out;
}

Tensor<float> to_tensor(const std::vector<cv::Mat>& images, const std::vector<double>& channel_mean) {
  if (images.empty()) throw UsageError("to_tensor: no images");
  if (channel_mean.size() != 3) throw UsageError("to_tensor: channel mean needs 3 entries");
  const int S = images[0].rows;
  const std::size_t plane = static_cast<std::size_t>(S) * S;
  std::vector<float> data(images.size() * 3 * plane);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const cv::Mat& img = images[n];
    if (img.rows != S || img.cols != S || img.channels() != 3) {
      throw DimensionError("to_tensor: every image must be " + std::to_string(S) + "x" + std::to_string(S) + "x3");
    }
    cv::Mat f;
    if (img.depth() == CV_8U) {
      img.convertTo(f, CV_32FC3, 1.0 / 255.0);
    } else {
      img.convertTo(f, CV_32FC3);
    }
    for (int y = 0; y < S; ++y) {
      const auto* row = f.ptr<cv::Vec3f>(y);
      for (int x = 0; x < S; ++x) {
        for (std::size_t c = 0; c < 3; ++c) {
          data[(n * 3 + c) * plane + static_cast<std::size_t>(y) * S + x] =
              row[x][static_cast<int>(c)] - static_cast<float>(channel_mean[c]);
        }
      }
    }
  }
  return Tensor<float>({images.size(), 3, static_cast<std::size_t>(S), static_cast<std::size_t>(S)},
                       std::move(data));
}

std::vector<double> channel_mean(const std::vector<cv::Mat>& images) {
  std::vector<double> mean(3, 0.0);
  if (images.empty()) return mean;
  double count = 0;
  for (const auto& img : images) {
    const double scale = img.depth() == CV_8U ? 1.0 / 255.0 : 1.0;
    const cv::Scalar s = cv::sum(img);
    for (int c = 0; c < 3; ++c) mean[static_cast<std::size_t>(c)] += s[c] * scale;
    count += static_cast<double>(img.rows) * img.cols;
  }
  for (auto& m : mean) m /= count;
  return mean;
}

Manifest split_by_subject(const Manifest& manifest, double val_fraction, std::uint64_t seed, char separator) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0,1)");
  auto subject_of = [separator](const std::string& id) { return id.substr(0, id.find(separator)); };
  std::vector<std::string> subjects;
  for (const auto& r : manifest.records) {
    if (r.split == Split::Test) continue;
    const auto s = subject_of(r.id);
    if (std::find(subjects.begin(), subjects.end(), s) == subjects.end()) subjects.push_back(s);
  }
  std::sort(subjects.begin(), subjects.end());
  std::mt19937_64 rng(seed);
  std::shuffle(subjects.begin(), subjects.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(subjects.size())));
  if (val_fraction > 0.0 && n_val == 0 && subjects.size() >= 2) n_val = 1;
  const std::set<std::string> val(subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(n_val));
  Manifest out = manifest;
  for (auto& r : out.records) {
    if (r.split == Split::Test) continue;
    r.split = val.count(subject_of(r.id)) ? Split::Val : Split::Train;
  }
  return out;
}

}  // namespace residen
