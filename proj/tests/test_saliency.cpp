#include <filesystem>

#include "doctest.h"
#include "residen/commands.hpp"

using namespace residen;
namespace fs = std::filesystem;

namespace {

struct Trained {
  fs::path dir;
  LoadedModel model;
  LabeledSet set;
};

// Desk-scale ResiDen overfit on 64 synthetic faces with six AUs.
Trained& trained() {
  static Trained t = [] {
    Trained out;
    out.dir = fs::temp_directory_path() / "residen_saliency";
    fs::remove_all(out.dir);
    SynthSpec spec;
    spec.n = 64;
    spec.seed = 3;
    spec.aus = AuClassList::parse("1,2,4,12,25,26");
    spec.val_fraction = 0.0;
    synth_generate(spec, (out.dir / "corpus").string());

    RunConfig cfg;
    auto& r = cfg.architecture.residen;
    r.input_size = 64;
    r.stem_channels = 16;
    r.blocks = {{4, 8}, {4, 8}, {6, 8}};
    r.trunk_channels = 32;
    r.post_convs = {32, 64};
    r.head_units = {64, 128, 256};
    r.head_dropout = {0.0, 0.0, 0.0};
    r.num_aus = 6;
    cfg.data.manifest = (out.dir / "corpus" / "manifest.csv").string();
    cfg.data.aus = spec.aus;
    cfg.data.augment.enabled = false;
    cfg.training.epochs = 60;
    cfg.training.batch_size = 16;
    cfg.training.seed = 1;
    cfg.training.stop_at_train_accuracy = 0.95;
    cfg.output.checkpoint_dir = (out.dir / "run").string();
    auto result = train_model(cfg);
    REQUIRE(result.train_accuracy.value_or(0.0) >= 0.95);
    out.model = load_model((out.dir / "run" / kLastCheckpoint).string());
    out.set = load_labeled_set(load_manifest(cfg.data.manifest), out.model.config, LabelKind::Aus);
    return out;
  }();
  return t;
}

// Mouth box and the two upper background corners, in 64x64 map coordinates.
double mouth(const Heatmap& m) { return region_mean(m, 40, 56, 20, 44); }
double background(const Heatmap& m) {
  return 0.5 * (region_mean(m, 0, 12, 0, 12) + region_mean(m, 0, 12, 52, 64));
}

}  // namespace

TEST_CASE("gradient saliency of lips-part concentrates on the mouth") {
  auto& t = trained();
  const std::size_t au25 = 4;
  std::size_t samples = 0;
  for (std::size_t i = 0; i < t.set.size(); ++i) {
    if (!t.set.aus[i * 6 + au25]) continue;
    auto x = to_tensor({t.set.images[i]}, *t.model.config.data.channel_mean);
    auto map = saliency_map(*t.model.model, x, au25);
    CHECK(map.size == 64);
    CHECK(map.max() == doctest::Approx(1.0f));
    CHECK(mouth(map) > background(map));
    ++samples;
  }
  CHECK(samples >= 10);
}

TEST_CASE("class activation maps of the trained model are rectified and deterministic") {
  auto& t = trained();
  auto x = to_tensor({t.set.images[0]}, *t.model.config.data.channel_mean);
  auto a = class_activation_map(*t.model.model, x, 4);
  auto b = class_activation_map(*t.model.model, x, 4);
  CHECK(a.values == b.values);
  for (float v : a.values) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("saliency command writes the map and an overlay") {
  auto& t = trained();
  const auto out = t.dir / "maps" / "s.png";
  auto map = cmd_saliency((t.dir / "run" / kLastCheckpoint).string(), (t.dir / "corpus" / "manifest.csv").string(),
                          t.set.ids[0], 25, out.string(), SaliencyMethod::Gradient);
  CHECK(map.size == 64);
  CHECK(fs::exists(out));
  CHECK(fs::exists(t.dir / "maps" / "s_overlay.png"));
  CHECK_THROWS_AS(cmd_saliency((t.dir / "run" / kLastCheckpoint).string(),
                               (t.dir / "corpus" / "manifest.csv").string(), t.set.ids[0], 15, ""),
                  UsageError);
}
