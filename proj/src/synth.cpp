#include "residen/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "residen/expression.hpp"
#include "residen/rng.hpp"

namespace fs = std::filesystem;

namespace residen {

namespace {

constexpr int kShift = 4;
constexpr double kFix = 1 << kShift;

// Visible strength for an intensity; 1 renders faintly, 5 fully.
double amplitude(int intensity) {
  return intensity <= 0 ? 0.0 : 0.25 + 0.75 * (intensity - 1) / 4.0;
}

struct Canvas {
  cv::Mat img;  // CV_64FC3, RGB in [0,1]
  double s;     // pixels per reference unit (reference canvas is 128)
  cv::Point2d off;

  cv::Point p(double x, double y) const {
    return {static_cast<int>(std::lround((x + off.x) * s * kFix)), static_cast<int>(std::lround((y + off.y) * s * kFix))};
  }
  int len(double v) const { return std::max(1, static_cast<int>(std::lround(v * s * kFix))); }
  int thick(double v) const { return std::max(1, static_cast<int>(std::lround(v * s))); }
  static cv::Scalar col(const cv::Vec3d& c) { return {c[0], c[1], c[2]}; }

  void line(double x0, double y0, double x1, double y1, const cv::Vec3d& c, double t) {
    cv::line(img, p(x0, y0), p(x1, y1), col(c), thick(t), cv::LINE_AA, kShift);
  }
  void ellipse(double cx, double cy, double ax, double ay, const cv::Vec3d& c, int thickness = -1,
               double a0 = 0, double a1 = 360) {
    cv::ellipse(img, p(cx, cy), cv::Size(len(ax), len(ay)), 0, a0, a1, col(c),
                thickness < 0 ? cv::FILLED : thick(thickness), cv::LINE_AA, kShift);
  }
  void polyline(const std::vector<cv::Point2d>& pts, const cv::Vec3d& c, double t) {
    std::vector<cv::Point> q;
    for (const auto& v : pts) q.push_back(p(v.x, v.y));
    cv::polylines(img, q, false, col(c), thick(t), cv::LINE_AA, kShift);
  }
  void fill(const std::vector<cv::Point2d>& pts, const cv::Vec3d& c) {
    std::vector<cv::Point> q;
    for (const auto& v : pts) q.push_back(p(v.x, v.y));
    cv::fillPoly(img, std::vector<std::vector<cv::Point>>{q}, col(c), cv::LINE_AA, kShift);
  }
};

cv::Vec3d mix(const cv::Vec3d& a, const cv::Vec3d& b, double t) {
  return a * (1.0 - t) + b * t;
}

std::vector<cv::Point2d> quad_curve(cv::Point2d a, cv::Point2d ctrl, cv::Point2d b, int steps = 16) {
  std::vector<cv::Point2d> pts;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    pts.push_back(a * ((1 - t) * (1 - t)) + ctrl * (2 * (1 - t) * t) + b * (t * t));
  }
  return pts;
}

}  // namespace

cv::Mat render_face(const FaceSpec& face, int size, std::uint64_t noise_seed, double noise) {
  if (size < 16) throw ConfigError("synthetic faces need at least 16x16 pixels");
  auto a = [&face](int id) {
    for (std::size_t i = 0; i < face.aus.size(); ++i) {
      if (face.aus[i] == id) return amplitude(face.intensities[i]);
    }
    return 0.0;
  };
  Canvas cv_{cv::Mat(size, size, CV_64FC3, Canvas::col(face.background)), size / 128.0, face.offset};
  const cv::Vec3d dark{0.15, 0.1, 0.08}, white{0.97, 0.97, 0.97}, lip{0.65, 0.25, 0.25}, pink{0.95, 0.45, 0.5};
  const cv::Vec3d shade = mix(face.skin, dark, 0.35);

  cv_.ellipse(64, 66, 46 * face.head_scale, 56 * face.head_scale, face.skin);

  // cheeks
  if (a(6) > 0) {
    const cv::Vec3d c = mix(face.skin, pink, 0.6 * a(6));
    cv_.ellipse(38, 74, 8, 7, c);
    cv_.ellipse(90, 74, 8, 7, c);
  }

  // brows
  const double inner_y = 42 - 6 * a(1) + 4 * a(4), outer_y = 42 - 6 * a(2) + 4 * a(4);
  const double pinch = 3 * a(4);
  cv_.line(36, outer_y, 56 + pinch, inner_y, dark, 3);
  cv_.line(72 - pinch, inner_y, 92, outer_y, dark, 3);

  // eyes
  const double open = 3 + 3 * a(5);
  for (double cx : {47.0, 81.0}) {
    cv_.ellipse(cx, 54, 8, open, white);
    cv_.ellipse(cx, 54, 2.2, 2.2, dark);
  }

  // nose
  cv_.line(64, 58, 64, 74, shade, 2);
  cv_.line(58, 76, 70, 76, shade, 2);
  if (a(9) > 0) {
    const cv::Vec3d c = mix(face.skin, dark, 0.8 * a(9));
    cv_.line(59, 62, 69, 62, c, 1);
    cv_.line(59, 66, 69, 66, c, 1);
  }

  // mouth
  const double hw = 14 + 5 * a(20);
  const double corner_y = 92 - 5 * a(12) + 5 * a(15);
  const double gap = 5 * a(25) + 8 * a(26);
  const cv::Point2d lc(64 - hw, corner_y), rc(64 + hw, corner_y);
  auto upper = quad_curve(lc, {64, 90}, rc);
  auto lower = quad_curve(lc, {64, 92 + 2 * gap}, rc);
  if (gap > 0) {
    std::vector<cv::Point2d> poly = upper;
    poly.insert(poly.end(), lower.rbegin(), lower.rend());
    cv_.fill(poly, {0.25, 0.05, 0.05});
  }
  cv_.polyline(upper, lip, 2);
  cv_.polyline(lower, lip, 2);

  // chin
  if (a(17) > 0) cv_.ellipse(64, 112, 9, 2 + 2 * a(17), mix(face.skin, dark, 0.6 * a(17)), 2, 0, 180);

  cv::Mat img = cv_.img;
  if (noise > 0) {
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> gauss(0.0, noise);
    for (int y = 0; y < img.rows; ++y) {
      auto* row = img.ptr<cv::Vec3d>(y);
      for (int x = 0; x < img.cols; ++x) {
        for (int c = 0; c < 3; ++c) row[x][c] += gauss(rng);
      }
    }
  }
  cv::Mat out;
  img.convertTo(out, CV_8UC3, 255.0);
  return out;
}

const std::vector<std::vector<int>>& emotion_prototypes() {
  static const std::vector<std::vector<int>> p{
      {1, 2, 5, 26},         // surprise
      {1, 2, 4, 5, 20, 25},  // fear
      {9, 15, 17},           // disgust
      {6, 12, 25},           // happiness
      {1, 4, 15, 17},        // sadness
      {4, 5, 17},            // anger
      {}};                   // neutral
  return p;
}

int pattern_emotion(const std::vector<std::uint8_t>& present, const AuClassList& aus, int num_emotions) {
  const auto& protos = emotion_prototypes();
  if (num_emotions < 1 || num_emotions > static_cast<int>(protos.size())) {
    throw ConfigError("num_emotions must lie in [1, " + std::to_string(protos.size()) + "]");
  }
  int best = 0;
  std::size_t best_d = SIZE_MAX;
  for (int e = 0; e < num_emotions; ++e) {
    std::size_t d = 0;
    for (std::size_t i = 0; i < aus.size(); ++i) {
      const bool in = std::find(protos[e].begin(), protos[e].end(), aus.ids[i]) != protos[e].end();
      d += (present[i] != 0) != in;
    }
    if (d < best_d) {
      best_d = d;
      best = e;
    }
  }
  return best;
}

std::vector<SynthSample> synth_samples(const SynthSpec& spec) {
  if (spec.n < 1) throw ConfigError("synth: n must be >= 1");
  if (spec.subjects < 1) throw ConfigError("synth: subjects must be >= 1");
  if (!(spec.val_fraction >= 0.0 && spec.val_fraction < 1.0)) throw ConfigError("synth: val_fraction must lie in [0,1)");
  const auto& protos = emotion_prototypes();
  if (spec.num_emotions < 1 || spec.num_emotions > static_cast<int>(protos.size())) {
    throw ConfigError("synth: num_emotions must lie in [1, 7]");
  }
  std::mt19937_64 rng(mix_seed(spec.seed, 0x5e7));
  // Per-subject identity: skin tone and head shape.
  std::vector<cv::Vec3d> skins;
  std::vector<double> scales;
  for (int s = 0; s < spec.subjects; ++s) {
    const double t = uniform01(rng);
    skins.push_back(mix({0.93, 0.78, 0.68}, {0.55, 0.38, 0.28}, t));
    scales.push_back(uniform(rng, 0.95, 1.03));
  }
  const std::size_t n_train = static_cast<std::size_t>(std::llround(spec.n * (1.0 - spec.val_fraction)));
  std::vector<SynthSample> out;
  for (std::size_t i = 0; i < spec.n; ++i) {
    SynthSample s;
    const int subject = static_cast<int>(i % static_cast<std::size_t>(spec.subjects));
    char buf[48];
    std::snprintf(buf, sizeof buf, "s%02d_%05zu", subject, i);
    s.id = buf;
    s.split = i < n_train ? Split::Train : Split::Val;
    std::vector<std::uint8_t> present(spec.aus.size());
    if (spec.mode == SynthMode::Latent) {
      s.emotion = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.num_emotions));
      const auto& proto = protos[static_cast<std::size_t>(s.emotion)];
      for (std::size_t k = 0; k < spec.aus.size(); ++k) {
        const bool in = std::find(proto.begin(), proto.end(), spec.aus.ids[k]) != proto.end();
        present[k] = uniform01(rng) < (in ? spec.latent_on : spec.latent_off);
      }
    } else {
      for (auto& p : present) p = uniform01(rng) < spec.au_prior;
      s.emotion = pattern_emotion(present, spec.aus, spec.num_emotions);
    }
    for (std::size_t k = 0; k < spec.aus.size(); ++k) {
      s.intensities.push_back(present[k] ? 2 + static_cast<int>(rng() % 4) : (uniform01(rng) < 0.3 ? 1 : 0));
    }
    s.face.aus = spec.aus.ids;
    s.face.intensities = s.intensities;
    s.face.offset = {uniform(rng, -2, 2), uniform(rng, -2, 2)};
    s.face.head_scale = scales[static_cast<std::size_t>(subject)];
    s.face.skin = skins[static_cast<std::size_t>(subject)];
    const double g = uniform(rng, 0.3, 0.6);
    s.face.background = {g, g, g * uniform(rng, 0.9, 1.1)};
    s.noise_seed = rng();
    out.push_back(std::move(s));
  }
  return out;
}

Manifest synth_generate(const SynthSpec& spec, const std::string& out_dir) {
  auto samples = synth_samples(spec);
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw IoError("synth: cannot create '" + out_dir + "': " + ec.message());
  Manifest m;
  m.base_dir = out_dir;
  for (const auto& s : samples) {
    const std::string rel = "images/" + s.id + ".png";
    cv::Mat rgb = render_face(s.face, spec.image_size, s.noise_seed, spec.noise), bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    const std::string path = (fs::path(out_dir) / rel).string();
    bool ok = false;
    try {
      ok = cv::imwrite(path, bgr);
    } catch (const cv::Exception&) {
      ok = false;
    }
    if (!ok) throw IoError("synth: cannot write '" + path + "'");
    SampleRecord r;
    r.id = s.id;
    r.image_path = rel;
    r.split = s.split;
    r.bbox = BBox{0, 0, static_cast<double>(spec.image_size), static_cast<double>(spec.image_size)};
    r.au_intensities = s.intensities;
    r.au_binary = binarize_intensity(s.intensities, 2);
    r.emotion = s.emotion;
    m.records.push_back(std::move(r));
  }
  write_manifest(m, (fs::path(out_dir) / "manifest.csv").string());
  return m;
}

}  // namespace residen
