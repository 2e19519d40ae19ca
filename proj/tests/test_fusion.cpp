#include <random>

#include "doctest.h"
#include "residen/fusion.hpp"
#include "residen/grad_check.hpp"
#include "residen/optim.hpp"
#include "test_helpers.hpp"

using namespace residen;
using residen::testing::probe;
using residen::testing::random_tensor;
using residen::testing::tiny_fusion;

namespace {

std::vector<float> snapshot(ParamSet<float>& params, const std::string& prefix) {
  std::vector<float> out;
  for (auto& e : params) {
    if (e.name.starts_with(prefix)) out.insert(out.end(), e.tensor.data().begin(), e.tensor.data().end());
  }
  return out;
}

double train_step(FusionModel<float>& model, Adam& adam, const Tensor<float>& x, const Tensor<float>& y) {
  model.params().zero_grad();
  Tape<float> tape;
  Tape<float>::Scope scope(tape);
  auto loss = add(bce_multilabel_loss(model.forward_fusion(x, ForwardContext{Mode::Train, 1}), y), model.penalty());
  tape.backward(loss);
  adam.step(model.params());
  return loss.item();
}

}  // namespace

TEST_CASE("paper-constant fusion widths") {
  FusionConfig cfg;
  CHECK(cfg.concat_width() == 4352);
  FusionModel<float> model(cfg, 1);
  std::mt19937_64 rng(1);
  auto x = random_tensor<float>({1, 3, 128, 128}, rng, 0, 1);
  auto p = model.forward_fusion(x, ForwardContext{});
  CHECK(p.shape() == Shape{1, 12});
  for (float v : p.data()) CHECK((v > 0.0f && v < 1.0f));
  CHECK(model.params().at("head.fc1.weight").shape() == Shape{4352, 512});
  CHECK(model.params().at("reducer.fc1.weight").shape() == Shape{2048, 512});
}

TEST_CASE("fusion config consistency") {
  auto cfg = tiny_fusion();
  cfg.image_feature_width += 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_fusion();
  cfg.reducer_units = {4, 5};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_fusion();
  CHECK(to_json(fusion_config_from_json(to_json(cfg))) == to_json(cfg));
}

TEST_CASE("fuse_features") {
  std::mt19937_64 rng(2);
  auto img = random_tensor({2, 4096}, rng);
  auto expr = random_tensor({2, 256}, rng);
  auto z = fuse_features(img, expr, 4096, 256);
  CHECK(z.shape() == Shape{2, 4352});
  for (std::size_t n = 0; n < 2; ++n) {
    CHECK(std::equal(img.data().begin() + n * 4096, img.data().begin() + (n + 1) * 4096,
                     z.data().begin() + n * 4352));
    CHECK(std::equal(expr.data().begin() + n * 256, expr.data().begin() + (n + 1) * 256,
                     z.data().begin() + n * 4352 + 4096));
  }
  CHECK_THROWS_AS(fuse_features(img, random_tensor({2, 255}, rng), 4096, 256), DimensionError);
  CHECK_THROWS_AS(fuse_features(img, random_tensor({3, 256}, rng), 4096, 256), DimensionError);

  auto a = random_tensor({2, 5}, rng), b = random_tensor({2, 3}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto up = random_tensor({2, 8}, rng);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    tape.backward(sum(mul(fuse_features(a, b, 5, 3), up)));
  }
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 5; ++i) CHECK(a.grad()[n * 5 + i] == up.data()[n * 8 + i]);
    for (std::size_t i = 0; i < 3; ++i) CHECK(b.grad()[n * 3 + i] == up.data()[n * 8 + 5 + i]);
  }
}

TEST_CASE("forward_fusion") {
  FusionModel<float> model(tiny_fusion(), 3);
  std::mt19937_64 rng(3);
  auto x = random_tensor<float>({4, 3, 16, 16}, rng, 0, 1);
  auto a = model.forward_fusion(x, ForwardContext{});
  auto b = model.forward_fusion(x, ForwardContext{});
  CHECK(a.shape() == Shape{4, 3});
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  auto live = model.run(x, ForwardContext{}).logits;
  auto feats = model.expression_branch().extract_features(x);
  auto cached = model.run_with_expression(x, feats, ForwardContext{}).logits;
  CHECK(std::equal(live.data().begin(), live.data().end(), cached.data().begin()));

  auto zeroed = model.run_with_expression(x, Tensor<float>::zeros(feats.shape()), ForwardContext{}).logits;
  CHECK(zeroed.shape() == live.shape());
  CHECK_FALSE(std::equal(live.data().begin(), live.data().end(), zeroed.data().begin()));
  CHECK_THROWS_AS(model.run_with_expression(x, Tensor<float>::zeros({4, 2}), ForwardContext{}), ConfigError);
}

TEST_CASE("frozen extractor stays bitwise unchanged; joint mode updates it") {
  std::mt19937_64 rng(4);
  auto x = random_tensor<float>({4, 3, 16, 16}, rng, 0, 1);
  Tensor<float> y({4, 3}, {1, 0, 1, 0, 1, 0, 1, 1, 0, 0, 0, 1});

  FusionModel<float> frozen(tiny_fusion(), 4);
  auto before = snapshot(frozen.params(), "expression.");
  auto image_before = snapshot(frozen.params(), "image.");
  Adam adam;
  train_step(frozen, adam, x, y);
  CHECK(snapshot(frozen.params(), "expression.") == before);
  CHECK(snapshot(frozen.params(), "image.") != image_before);

  FusionModel<float> joint(tiny_fusion(), 4);
  joint.set_joint_finetune(true);
  Adam adam2;
  train_step(joint, adam2, x, y);
  CHECK(snapshot(joint.params(), "expression.") != before);
}

TEST_CASE("five small steps on a fixed batch lower the fusion loss") {
  std::mt19937_64 rng(5);
  auto x = random_tensor<float>({8, 3, 16, 16}, rng, 0, 1);
  std::vector<float> labels(24);
  for (auto& v : labels) v = static_cast<float>(rng() % 2);
  Tensor<float> y({8, 3}, labels);
  FusionModel<float> model(tiny_fusion(), 5);
  Adam adam(AdamOptions{1e-4});
  std::vector<double> losses;
  for (int i = 0; i < 6; ++i) losses.push_back(train_step(model, adam, x, y));
  for (std::size_t i = 1; i < losses.size(); ++i) CHECK(losses[i] < losses[i - 1]);
}

TEST_CASE("joint fine-tuning gradient flows through the fusion into both branches") {
  auto cfg = tiny_fusion();
  cfg.joint_finetune = true;
  FusionModel<double> model(cfg, 6);
  std::mt19937_64 rng(6);
  auto x = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  Tensor<double> y({2, 3}, {1, 0, 1, 0, 1, 1});
  std::vector<Tensor<double>> wrt{model.params().at("image.post1.conv.weight"),
                                  model.params().at("image.block3.layer0.conv.weight"),
                                  model.params().at("expression.fc2.weight"),
                                  model.params().at("expression.conv1.weight"),
                                  model.params().at("reducer.fc1.weight"),
                                  model.params().at("head.fc1.weight")};
  auto f = [&] { return bce_multilabel_loss(model.forward_fusion(x, ForwardContext{Mode::Train, 2}), y); };
  CHECK(grad_check(f, wrt).max_rel_error < 1e-4);
}

TEST_CASE("predict_aus thresholds") {
  Tensor<float> p({1, 2}, {0.9f, 0.1f});
  auto r = threshold_probabilities(p, 0.5);
  CHECK(r.at(0, 0));
  CHECK_FALSE(r.at(0, 1));
  auto all = threshold_probabilities(p, 0.0);
  CHECK((all.at(0, 0) && all.at(0, 1)));

  std::mt19937_64 rng(7);
  auto probs = random_tensor<float>({16, 5}, rng, 0, 1);
  std::vector<std::uint8_t> prev(80, 1);
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    auto cur = threshold_probabilities(probs, t);
    for (std::size_t i = 0; i < 80; ++i) CHECK(cur.present[i] <= prev[i]);
    prev = cur.present;
  }

  FusionModel<float> model(tiny_fusion(), 8);
  auto x = random_tensor<float>({2, 3, 16, 16}, rng, 0, 1);
  auto pred = predict_aus(model, x);
  CHECK(pred.rows == 2);
  CHECK(pred.cols == 3);
}
