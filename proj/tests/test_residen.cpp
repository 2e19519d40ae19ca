#include <cmath>
#include <random>

#include "doctest.h"
#include "residen/grad_check.hpp"
#include "residen/optim.hpp"
#include "residen/residen.hpp"
#include "test_helpers.hpp"

using namespace residen;
using residen::testing::probe;
using residen::testing::random_tensor;
using residen::testing::tiny_residen;

TEST_CASE("dense block channel arithmetic") {
  CHECK(dense_block_out_channels({12, 32}, 48) == 432);
  CHECK(dense_block_out_channels({36, 32}, 256) == 1408);
  CHECK(dense_block_out_channels({12, 32}, 256) == 640);
}

TEST_CASE("dense block with zero conv weights appends a zero channel") {
  ParamSet<double> params;
  LayerFactory<double> factory(params, 1);
  DenseBlock<double> block(factory, "b", {1, 1}, 1, true, 0.1, 1e-5);
  for (auto& e : params) {
    if (e.name.ends_with(".weight")) std::fill(e.tensor.mutable_data().begin(), e.tensor.mutable_data().end(), 0.0);
  }
  std::mt19937_64 rng(1);
  auto x = random_tensor({2, 1, 4, 4}, rng);
  auto y = block(x, Mode::Train);
  REQUIRE(y.shape() == Shape{2, 2, 4, 4});
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(y.data()[n * 32 + i] == x.data()[n * 16 + i]);
      CHECK(y.data()[n * 32 + 16 + i] == 0.0);
    }
  }
}

TEST_CASE("transition shapes") {
  ParamSet<float> params;
  LayerFactory<float> factory(params, 2);
  std::mt19937_64 rng(2);
  Transition<float> t1(factory, "t1", {256}, 432, 0.1, 1e-5);
  CHECK(t1(random_tensor<float>({1, 432, 64, 64}, rng), Mode::Eval).shape() == Shape{1, 256, 32, 32});
  Transition<float> t2(factory, "t2", {256}, 640, 0.1, 1e-5);
  CHECK(t2(random_tensor<float>({1, 640, 32, 32}, rng), Mode::Eval).shape() == Shape{1, 256, 16, 16});
}

TEST_CASE("transition with identity 1x1 conv reduces to pool(swish(bn(x)))") {
  ParamSet<double> params;
  LayerFactory<double> factory(params, 3);
  Transition<double> t(factory, "t", {3}, 3, 0.1, 1e-5);
  auto w = t.conv().weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t c = 0; c < 3; ++c) w[c * 3 + c] = 1.0;
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3, 4, 4}, rng);
  auto y = t(x, Mode::Eval);
  auto g = Tensor<double>::full({3}, 1.0);
  auto b = Tensor<double>::zeros({3});
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::full({3}, 1.0);
  auto expect = maxpool2d(swish(batchnorm2d(x, g, b, rm, rv, Mode::Eval)), 2, 2);
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == expect.data()[i]);
}

TEST_CASE("paper-constant ResiDen trace") {
  ResiDenConfig cfg;
  CHECK(cfg.flatten_width() == 4096);
  CHECK(cfg.feature_width() == 2048);
  const auto sites = cfg.skip_sites();
  REQUIRE(sites.size() == 1);
  CHECK(sites[0].block == 2);
  CHECK(sites[0].transition_output == Shape{1, 256, 16, 16});
  CHECK(sites[0].skip_source == sites[0].transition_output);

  ResiDen<float> net(cfg, 7);
  CHECK(net.blocks()[0].out_channels() == 432);
  CHECK(net.blocks()[1].out_channels() == 640);
  CHECK(net.blocks()[2].out_channels() == 1408);
  CHECK(net.params().count_elements(true) == cfg.parameter_count());

  std::mt19937_64 rng(4);
  auto x = random_tensor<float>({2, 3, 128, 128}, rng, 0, 1);
  auto tr = net.trace(x, ForwardContext{});
  CHECK(tr.block_inputs[0].shape() == Shape{2, 48, 64, 64});
  CHECK(tr.block_inputs[1].shape() == Shape{2, 256, 32, 32});
  CHECK(tr.block_inputs[2].shape() == Shape{2, 256, 16, 16});
  CHECK(tr.last_conv.shape() == Shape{2, 256, 4, 4});
  CHECK(tr.features.shape() == Shape{2, 4096});
  CHECK(tr.head_features.shape() == Shape{2, 2048});
  CHECK(tr.logits.shape() == Shape{2, 12});
  auto probs = sigmoid(tr.logits);
  for (float p : probs.data()) CHECK((p > 0.0f && p < 1.0f));
}

TEST_CASE("forward_features") {
  auto cfg = tiny_residen(32);
  ResiDen<float> net(cfg, 5);
  std::mt19937_64 rng(5);
  auto x = random_tensor<float>({2, 3, 32, 32}, rng, 0, 1);
  auto a = net.forward_features(x, ForwardContext{});
  auto b = net.forward_features(x, ForwardContext{});
  CHECK(a.shape() == Shape{2, static_cast<std::size_t>(cfg.flatten_width())});
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  for (float v : a.data()) CHECK(std::isfinite(v));

  auto zeros = net.forward_features(Tensor<float>::zeros({1, 3, 32, 32}), ForwardContext{});
  for (float v : zeros.data()) CHECK(v == 0.0f);

  CHECK_THROWS_AS(net.forward_features(Tensor<float>::zeros({1, 3, 16, 16}), ForwardContext{}), DimensionError);
  CHECK_THROWS_AS(net.forward_features(Tensor<float>::zeros({1, 1, 32, 32}), ForwardContext{}), DimensionError);
}

TEST_CASE("skip connections change values but not shapes") {
  auto on = tiny_residen(32);
  auto off = on;
  off.skip_connections = false;
  CHECK(off.skip_sites().empty());
  ResiDen<float> a(on, 6), b(off, 6);
  std::mt19937_64 rng(6);
  auto x = random_tensor<float>({1, 3, 32, 32}, rng, 0, 1);
  auto fa = a.forward_features(x, ForwardContext{});
  auto fb = b.forward_features(x, ForwardContext{});
  CHECK(fa.shape() == fb.shape());
  CHECK_FALSE(std::equal(fa.data().begin(), fa.data().end(), fb.data().begin()));
}

TEST_CASE("parameter count is a pure function of the config") {
  auto cfg = tiny_residen();
  CHECK(cfg.parameter_count() == cfg.parameter_count());
  ResiDen<float> net(cfg, 1);
  CHECK(net.params().count_elements(true) == cfg.parameter_count());
  cfg.block_batchnorm = false;
  ResiDen<float> nobn(cfg, 1);
  CHECK(nobn.params().count_elements(true) == cfg.parameter_count());
}

TEST_CASE("config validation") {
  auto cfg = tiny_residen();
  cfg.input_size = 24;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_residen();
  cfg.head_dropout = {0.0};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_residen();
  cfg.blocks[1].growth_rate = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(residen_config_from_json(json{{"stem", 3}}), ConfigError);
  auto round = residen_config_from_json(to_json(tiny_residen()));
  CHECK(to_json(round) == to_json(tiny_residen()));
}

TEST_CASE("skip-site gradient: total equals through-block path plus avgpool skip") {
  // B2 input is 8x8 with a 32x32 image.
  ResiDen<double> net(tiny_residen(32), 8);
  auto& b2 = net.blocks()[1];
  auto& t2 = net.transitions()[1];
  auto& b3 = net.blocks()[2];
  std::mt19937_64 rng(8);
  auto x = random_tensor({2, 4, 8, 8}, rng);

  auto total = [&](bool with_skip) {
    Tensor<double> next = t2(b2(x, Mode::Train), Mode::Train);
    if (with_skip) next = residual_add(next, avgpool2d(x, 2, 2));
    return probe(b3(next, Mode::Train));
  };
  CHECK(grad_check([&] { return total(true); }, {x}).max_rel_error < 1e-5);

  // Decompose: the path gradient is d/dx with the sum's value held fixed,
  // the skip gradient is avgpool-backward of the upstream gradient at the sum.
  auto grad_of = [&](const std::function<Tensor<double>()>& f) {
    Tensor<double> xr = x.clone();
    x.set_requires_grad(true);
    x.clear_grad();
    Tape<double> tape;
    {
      Tape<double>::Scope scope(tape);
      tape.backward(f());
    }
    std::vector<double> g(x.grad().begin(), x.grad().end());
    x.clear_grad();
    x.set_requires_grad(false);
    return g;
  };
  auto g_total = grad_of([&] { return total(true); });

  Tensor<double> sum_value;
  {
    Tensor<double> next = t2(b2(x, Mode::Train), Mode::Train);
    sum_value = residual_add(next, avgpool2d(x, 2, 2)).clone();
  }
  // upstream gradient at the sum
  sum_value.set_requires_grad(true);
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.backward(probe(b3(sum_value, Mode::Train)));
  }
  Tensor<double> upstream(sum_value.shape(), std::vector<double>(sum_value.grad().begin(), sum_value.grad().end()));
  auto g_path = grad_of([&] { return sum(mul(t2(b2(x, Mode::Train), Mode::Train), upstream)); });
  auto g_skip = grad_of([&] { return sum(mul(avgpool2d(x, 2, 2), upstream)); });
  for (std::size_t i = 0; i < g_total.size(); ++i) {
    CHECK(g_total[i] == doctest::Approx(g_path[i] + g_skip[i]).epsilon(1e-10));
  }
}

TEST_CASE("whole-network gradient check on a tiny config") {
  ResiDen<double> net(tiny_residen(16), 9);
  std::mt19937_64 rng(9);
  auto x = random_tensor({2, 3, 16, 16}, rng, 0, 1);
  Tensor<double> y({2, 3}, {1, 0, 1, 0, 0, 1});
  std::vector<Tensor<double>> wrt{x, net.params().at("stem.conv.weight"), net.params().at("block2.layer0.conv.weight"),
                                  net.params().at("transition2.conv.weight"), net.params().at("post1.conv.weight"),
                                  net.params().at("head.out.weight")};
  auto f = [&] {
    auto logits = net.run(x, ForwardContext{Mode::Train, 3}).logits;
    return add(bce_multilabel_loss(sigmoid(logits), y), net.penalty());
  };
  CHECK(grad_check(f, wrt).max_rel_error < 1e-5);
}

TEST_CASE("full forward and backward produces finite grads for every parameter") {
  ResiDen<float> net(tiny_residen(32, 6), 10);
  std::mt19937_64 rng(10);
  auto x = random_tensor<float>({4, 3, 32, 32}, rng, 0, 1);
  auto y = Tensor<float>({4, 6}, std::vector<float>{1, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0, 1, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0});
  Tape<float> tape;
  Tape<float>::Scope scope(tape);
  auto loss = add(bce_multilabel_loss(net.forward_standalone(x, ForwardContext{Mode::Train, 1}), y), net.penalty());
  tape.backward(loss);
  for (auto& e : net.params()) {
    if (e.buffer) continue;
    REQUIRE_MESSAGE(e.tensor.has_grad(), e.name);
    for (float g : e.tensor.grad()) REQUIRE(std::isfinite(g));
  }
}

TEST_CASE("a few small Adam steps on one batch lower its loss monotonically") {
  ResiDen<float> net(tiny_residen(32, 4), 11);
  std::mt19937_64 rng(11);
  auto x = random_tensor<float>({8, 3, 32, 32}, rng, 0, 1);
  std::vector<float> labels(32);
  for (auto& v : labels) v = static_cast<float>(rng() % 2);
  Tensor<float> y({8, 4}, labels);
  Adam adam(AdamOptions{1e-4});
  std::vector<double> losses;
  for (int step = 0; step < 6; ++step) {
    net.params().zero_grad();
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    auto loss = add(bce_multilabel_loss(net.forward_standalone(x, ForwardContext{Mode::Train, 1}), y), net.penalty());
    losses.push_back(loss.item());
    tape.backward(loss);
    adam.step(net.params());
  }
  for (std::size_t i = 1; i < losses.size(); ++i) CHECK(losses[i] < losses[i - 1]);
}

TEST_CASE("property: block channel law, transition halving and skip-site equality") {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> small(1, 4);
  for (int trial = 0; trial < 200; ++trial) {
    ParamSet<float> params;
    LayerFactory<float> factory(params, trial);
    const int in = small(rng), L = small(rng), k = small(rng), trunk = small(rng);
    const std::size_t s = 2u << (rng() % 3);
    DenseBlock<float> block(factory, "b", {L, k}, in, trial % 2 == 0, 0.1, 1e-5);
    auto out = block(random_tensor<float>({2, static_cast<std::size_t>(in), s, s}, rng), Mode::Train);
    CHECK(out.dim(1) == static_cast<std::size_t>(in + L * k));
    Transition<float> t(factory, "t", {trunk}, in + L * k, 0.1, 1e-5);
    CHECK(t(out, Mode::Train).shape() == Shape{2, static_cast<std::size_t>(trunk), s / 2, s / 2});

    ResiDenConfig cfg;
    const int nblocks = 1 + static_cast<int>(rng() % 4);
    cfg.blocks.clear();
    for (int b = 0; b < nblocks; ++b) cfg.blocks.push_back({small(rng), small(rng)});
    cfg.stem_channels = small(rng);
    cfg.trunk_channels = small(rng);
    cfg.post_convs = {small(rng)};
    cfg.head_units = {3};
    cfg.head_dropout = {0.0};
    cfg.input_size = 1 << (nblocks + 1);
    cfg.validate();
    std::size_t expected_sites = nblocks >= 3 ? nblocks - 2 : 0;
    CHECK(cfg.skip_sites().size() == expected_sites);
    for (const auto& site : cfg.skip_sites()) CHECK(site.transition_output == site.skip_source);
  }
}
