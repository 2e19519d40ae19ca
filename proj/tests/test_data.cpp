#include <map>
#include <set>
#include <filesystem>
#include <fstream>
#include <random>

#include <opencv2/imgproc.hpp>

#include "doctest.h"
#include "residen/data.hpp"
#include "residen/synth.hpp"

using namespace residen;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("residen_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream(p) << s;
}

cv::Mat checkerboard(int size, int cell) {
  cv::Mat m(size, size, CV_8UC3);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const std::uint8_t v = ((x / cell + y / cell) % 2) ? 220 : 30;
      m.at<cv::Vec3b>(y, x) = {v, static_cast<std::uint8_t>(255 - v), v};
    }
  return m;
}

}  // namespace

TEST_CASE("AU class lists") {
  CHECK(AuClassList::disfa().size() == 12);
  CHECK(AuClassList::emotionet().size() == 11);
  CHECK(AuClassList::parse("1,2,4").ids == std::vector<int>{1, 2, 4});
  CHECK_THROWS_AS(AuClassList::parse("2,1"), ConfigError);
  CHECK_THROWS_AS(AuClassList::parse("1,1"), ConfigError);
  CHECK_THROWS_AS(AuClassList::parse("1,x"), ConfigError);
  CHECK(au_name(15) == "Lip corner depressor");
  CHECK(au_class_list_from_json(to_json(AuClassList::emotionet())) == AuClassList::emotionet());
  CHECK(AuClassList::disfa().labels()[7] == "AU15");
}

TEST_CASE("binarize_intensity") {
  CHECK(binarize_intensity({0, 0, 0}) == std::vector<std::uint8_t>{0, 0, 0});
  CHECK(binarize_intensity({5}) == std::vector<std::uint8_t>{1});
  CHECK(binarize_intensity({1, 2, 3}, 2) == std::vector<std::uint8_t>{0, 1, 1});
  CHECK_THROWS_AS(binarize_intensity({6}), DataError);
  CHECK_THROWS_AS(binarize_intensity({-1}), DataError);
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> v(12);
    for (auto& x : v) x = static_cast<int>(rng() % 6);
    for (int t = 0; t < 6; ++t) {
      auto lo = binarize_intensity(v, t), hi = binarize_intensity(v, t + 1);
      for (std::size_t i = 0; i < v.size(); ++i) CHECK(hi[i] <= lo[i]);
    }
  }
}

TEST_CASE("align_au_classes") {
  auto d = AuClassList::disfa(), e = AuClassList::emotionet();
  std::vector<double> pred;
  for (int i = 0; i < 12; ++i) pred.push_back(i * 0.1);
  auto out = align_au_classes(pred, d, e);
  REQUIRE(out.size() == 11);
  CHECK(dropped_aus(d, e) == std::vector<int>{15});
  for (std::size_t i = 0; i < 11; ++i) {
    const auto src = std::find(d.ids.begin(), d.ids.end(), e.ids[i]) - d.ids.begin();
    CHECK(out[i] == pred[static_cast<std::size_t>(src)]);
  }
  CHECK(std::find(out.begin(), out.end(), pred[7]) == out.end());
  CHECK(align_au_classes(pred, d, d) == pred);
  std::vector<int> e_pred{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
  CHECK(align_au_classes(e_pred, e, e) == e_pred);
  try {
    align_au_classes(e_pred, e, d);
    FAIL("expected a protocol error");
  } catch (const ProtocolError& err) {
    CHECK(std::string(err.what()).find("AU15") != std::string::npos);
  }
}

TEST_CASE("manifest load, validate and round trip") {
  auto dir = temp_dir("manifest");
  const std::string header = kManifestHeader;
  write_text(dir / "empty.csv", header + "\n");
  CHECK(load_manifest((dir / "empty.csv").string()).empty());

  const std::string body = header + "\n"
                                    "a_1,img/a.png,train,10:20;30:40;20:60,,0|2|5,,3\n"
                                    "a_2,img/b.png,val,,1.5;2;100;120,,1|0|1,\n"
                                    "b_1,/abs/c.png,test,,,,,5\n";
  write_text(dir / "m.csv", body);
  auto m = load_manifest((dir / "m.csv").string());
  REQUIRE(m.size() == 3);
  CHECK(m.records[0].landmarks->size() == 3);
  CHECK((*m.records[0].au_intensities)[2] == 5);
  CHECK(m.records[1].bbox->w == 100);
  CHECK(m.records[1].split == Split::Val);
  CHECK_FALSE(m.records[2].has_au_labels());
  CHECK(*m.records[2].emotion == 5);
  CHECK(m.resolve(m.records[0]) == (dir / "img/a.png").string());
  CHECK(m.resolve(m.records[2]) == "/abs/c.png");
  CHECK(m.missing_images().size() == 3);

  write_manifest(m, (dir / "m2.csv").string());
  auto m2 = load_manifest((dir / "m2.csv").string());
  write_manifest(m2, (dir / "m3.csv").string());
  std::ifstream f2(dir / "m2.csv"), f3(dir / "m3.csv");
  std::string s2((std::istreambuf_iterator<char>(f2)), {}), s3((std::istreambuf_iterator<char>(f3)), {});
  CHECK(s2 == s3);
  CHECK(s2 == body);

  write_text(dir / "bad.csv", header + "\nx,i.png,train,,,0|1,,\nx2,i.png,train,,,0|7,,\n");
  try {
    load_manifest((dir / "bad.csv").string());
    FAIL("expected a data error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }
  write_text(dir / "dup.csv", header + "\nx,i.png,train,,,0|1,,\nx,i.png,train,,,0|1,,\n");
  CHECK_THROWS_AS(load_manifest((dir / "dup.csv").string()), DataError);
  write_text(dir / "hdr.csv", "id,path\n");
  CHECK_THROWS_AS(load_manifest((dir / "hdr.csv").string()), DataError);
  write_text(dir / "nolabel.csv", header + "\nx,i.png,train,,,,,\n");
  CHECK_THROWS_AS(load_manifest((dir / "nolabel.csv").string()), DataError);
  write_text(dir / "width.csv", header + "\nx,i.png,train,,,0|1,,\ny,i.png,train,,,0|1|1,,\n");
  CHECK_THROWS_AS(load_manifest((dir / "width.csv").string()), DataError);
  CHECK_THROWS_AS(load_manifest((dir / "missing.csv").string()), IoError);
}

TEST_CASE("au_labels prefers intensities") {
  SampleRecord r;
  r.id = "x";
  r.au_intensities = std::vector<int>{0, 3};
  r.au_binary = std::vector<std::uint8_t>{1, 1};
  CHECK(au_labels(r, 2) == std::vector<std::uint8_t>{0, 1});
  r.au_intensities.reset();
  CHECK(au_labels(r, 2) == std::vector<std::uint8_t>{1, 1});
  r.au_binary.reset();
  CHECK_THROWS_AS(au_labels(r), DataError);
}

TEST_CASE("crop rectangles") {
  SampleRecord r;
  r.id = "face";
  CHECK(compute_crop_rect(r, {200, 100}) == cv::Rect(0, 0, 200, 100));
  r.bbox = BBox{0, 0, 200, 100};
  CHECK(compute_crop_rect(r, {200, 100}) == cv::Rect(0, 0, 200, 100));

  // eyebrow row 60, chin row 140: face height 80, margin 20 -> top 40
  r.bbox.reset();
  r.landmarks = std::vector<cv::Point2d>{{50, 60}, {150, 60}, {100, 140}};
  CHECK(compute_crop_rect(r, {200, 200}, 0.25) == cv::Rect(50, 40, 100, 100));

  r.landmarks = std::vector<cv::Point2d>{{-10, 5}, {250, 5}, {100, 120}};
  auto rect = compute_crop_rect(r, {200, 100}, 0.25);
  CHECK(rect == cv::Rect(0, 0, 200, 100));

  r.landmarks = std::vector<cv::Point2d>{{300, 300}, {320, 330}};
  CHECK_THROWS_AS(compute_crop_rect(r, {200, 100}), DataError);

  cv::Mat img(100, 200, CV_8UC3, cv::Scalar(10, 20, 30));
  r.landmarks.reset();
  auto c = crop_face(img, r, 128);
  CHECK(c.rows == 128);
  CHECK(c.cols == 128);
}

TEST_CASE("augmentation") {
  auto board = checkerboard(128, 16);
  auto same = augment(board, AugmentParams{0.0, 1.0});
  CHECK(cv::norm(same, board, cv::NORM_INF) <= 1.0);

  cv::Mat blurred;
  cv::GaussianBlur(board, blurred, cv::Size(0, 0), 3.0);
  auto there = augment(augment(blurred, {15.0, 1.0}), {-15.0, 1.0});
  // compare away from the replicated border
  cv::Rect inner(32, 32, 64, 64);
  cv::Mat diff;
  cv::absdiff(there(inner), blurred(inner), diff);
  CHECK(cv::mean(diff)[0] <= 3.0);

  AugmentSpec spec;
  std::mt19937_64 rng(augment_seed(1, 2, "sample"));
  std::mt19937_64 rng2(augment_seed(1, 2, "sample"));
  for (int i = 0; i < 100; ++i) {
    auto p = sample_augment(spec, rng);
    auto q = sample_augment(spec, rng2);
    CHECK(p.angle_deg == q.angle_deg);
    CHECK((p.angle_deg >= -15.0 && p.angle_deg <= 15.0));
    CHECK((p.scale >= 1.0 && p.scale <= 1.1));
    auto out = augment(board, p);
    CHECK(out.rows == 128);
    CHECK(out.cols == 128);
  }
  CHECK(augment_seed(1, 2, "a") != augment_seed(1, 3, "a"));
  CHECK(augment_seed(1, 2, "a") != augment_seed(1, 2, "b"));
  AugmentSpec off;
  off.enabled = false;
  auto p = sample_augment(off, rng);
  CHECK((p.angle_deg == 0.0 && p.scale == 1.0));
  CHECK_THROWS_AS(augment_spec_from_json(json{{"max_scale", 0.5}}), ConfigError);
  CHECK_THROWS_AS(augment_spec_from_json(json{{"flip", true}}), ConfigError);
}

TEST_CASE("tensorization keeps [0,1] before mean subtraction") {
  std::vector<cv::Mat> imgs{checkerboard(8, 2), cv::Mat(8, 8, CV_8UC3, cv::Scalar(255, 0, 128))};
  auto t = to_tensor(imgs, {0, 0, 0});
  CHECK(t.shape() == Shape{2, 3, 8, 8});
  for (float v : t.data()) CHECK((v >= 0.0f && v <= 1.0f));
  CHECK(t.data()[64 * 3] == 1.0f);
  auto mean = channel_mean(imgs);
  auto centred = to_tensor(imgs, mean);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 64; ++i) s += centred.data()[(n * 3 + c) * 64 + i];
    CHECK(std::abs(s / 128) < 1e-6);
  }
}

TEST_CASE("subject-disjoint split") {
  Manifest m;
  for (int s = 0; s < 10; ++s)
    for (int k = 0; k < 5; ++k) {
      SampleRecord r;
      r.id = "subj" + std::to_string(s) + "_" + std::to_string(k);
      r.image_path = "x.png";
      r.emotion = 0;
      m.records.push_back(r);
    }
  auto out = split_by_subject(m, 0.2, 3);
  std::map<std::string, std::set<Split>> seen;
  std::size_t val = 0;
  for (const auto& r : out.records) {
    seen[r.id.substr(0, r.id.find('_'))].insert(r.split);
    val += r.split == Split::Val;
  }
  for (const auto& [s, splits] : seen) CHECK(splits.size() == 1);
  CHECK(val == 10);
  auto again = split_by_subject(m, 0.2, 3);
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(again.records[i].split == out.records[i].split);
}

TEST_CASE("synthetic corpus") {
  auto dir = temp_dir("synth");
  SynthSpec spec;
  spec.n = 24;
  spec.seed = 5;
  auto m = synth_generate(spec, (dir / "a").string());
  synth_generate(spec, (dir / "b").string());
  auto loaded = load_manifest((dir / "a" / "manifest.csv").string());
  CHECK(loaded.size() == 24);
  CHECK(loaded.missing_images().empty());
  for (const auto& r : loaded.records) {
    std::ifstream fa(dir / "a" / r.image_path, std::ios::binary), fb(dir / "b" / r.image_path, std::ios::binary);
    std::string a((std::istreambuf_iterator<char>(fa)), {}), b((std::istreambuf_iterator<char>(fb)), {});
    CHECK(a == b);
    CHECK(*r.au_binary == binarize_intensity(*r.au_intensities));
    auto img = load_image(loaded.resolve(r), r.id);
    CHECK(img.rows == 128);
    CHECK(img.channels() == 3);
    // pattern mode: emotion is the nearest prototype of the AU pattern
    CHECK(*r.emotion == pattern_emotion(*r.au_binary, spec.aus, spec.num_emotions));
  }
  std::size_t val = 0;
  for (const auto& r : loaded.records) val += r.split == Split::Val;
  CHECK(val == 5);
}

TEST_CASE("toggling lips-part changes only the mouth rows") {
  FaceSpec f;
  f.aus = AuClassList::disfa().ids;
  f.intensities.assign(12, 0);
  auto off = render_face(f, 128, 9);
  for (int level : {2, 5}) {
    f.intensities[10] = level;  // AU25
    auto on = render_face(f, 128, 9);
    cv::Mat diff;
    cv::absdiff(on, off, diff);
    cv::Mat any;
    cv::cvtColor(diff, any, cv::COLOR_RGB2GRAY);
    int changed = 0;
    for (int y = 0; y < 128; ++y)
      for (int x = 0; x < 128; ++x) {
        if (any.at<std::uint8_t>(y, x) == 0) continue;
        ++changed;
        CHECK((y >= 80 && y < 110));
        CHECK((x >= 40 && x < 88));
      }
    CHECK(changed > 20);
  }
}

TEST_CASE("label marginals track configured priors") {
  SynthSpec spec;
  spec.n = 1000;
  spec.seed = 11;
  auto samples = synth_samples(spec);
  std::vector<double> rate(12, 0.0);
  for (const auto& s : samples)
    for (std::size_t k = 0; k < 12; ++k) rate[k] += s.intensities[k] >= 2;
  for (double r : rate) CHECK(std::abs(r / 1000 - spec.au_prior) <= 0.1);

  spec.mode = SynthMode::Latent;
  auto latent = synth_samples(spec);
  std::vector<int> counts(7, 0);
  for (const auto& s : latent) ++counts[static_cast<std::size_t>(s.emotion)];
  for (int c : counts) CHECK(std::abs(c / 1000.0 - 1.0 / 7) <= 0.1);
}
