#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "crossmpi/errors.hpp"
#include "crossmpi/model.hpp"
#include "test_support.hpp"

namespace crossmpi {
namespace {

using testing::random_tiny_model;
using testing::tiny_config;
using testing::tiny_image;

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("crossmpi_model_test_" + name);
}

TEST(ModelConfig, RejectsBadDivisibility) {
  ModelConfig c;
  c.n_heads = 3;
  c.d_l = 64;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  ModelConfig d;
  d.patch_size = 5;
  EXPECT_THROW(d.validate(), std::invalid_argument);
  ModelConfig e;
  e.n_lm_layers = 4;
  EXPECT_THROW(e.validate(), std::invalid_argument);
  EXPECT_NO_THROW(ModelConfig{}.validate());
}

TEST(InitModel, DeterministicAndSeedSensitive) {
  EXPECT_EQ(init_model(tiny_config(3)), init_model(tiny_config(3)));
  EXPECT_NE(init_model(tiny_config(3)).params(), init_model(tiny_config(4)).params());
}

TEST(InitModel, LayerNormGainsOneBiasesZero) {
  const ToyVLM m = init_model(tiny_config(2));
  for (std::size_t i = 0; i < m.names().size(); ++i) {
    const std::string& n = m.names()[i];
    if (n.ends_with("ln1.g") || n.ends_with("ln2.g") || n.ends_with("ln.g"))
      for (double v : m.params()[i].data()) EXPECT_EQ(v, 1.0) << n;
    if (n.ends_with(".b"))
      for (double v : m.params()[i].data()) EXPECT_EQ(v, 0.0) << n;
  }
}

TEST(Forward, ZeroModelGivesUniformLogits) {
  const ToyVLM m(tiny_config());
  const TokenSequence prompt = {1, 2, 3};
  const ForwardResult r = forward(m, prompt, tiny_image(1));
  EXPECT_EQ(r.logits.shape(), (Shape{4 + 3, 8}));
  for (double v : r.logits.data()) EXPECT_EQ(v, r.logits[0]);
}

TEST(Forward, HiddenStateShapes) {
  const ToyVLM m = random_tiny_model(5);
  const TokenSequence prompt = {1, 2};
  const ForwardResult r = forward(m, prompt, tiny_image(2));
  ASSERT_EQ(r.hidden.size(), 8u);
  for (const auto& h : r.hidden) EXPECT_EQ(h.shape(), (Shape{6, 8}));
  EXPECT_EQ(r.hidden_last(3).shape(), Shape{8});
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(r.hidden_last(3)[j], r.hidden[3](5, j));
}

TEST(Forward, StatelessAcrossCallOrder) {
  const ToyVLM m = random_tiny_model(5);
  const TokenSequence p1 = {1, 2}, p2 = {3, 4, 5};
  const Tensor a = tiny_image(1), b = tiny_image(2);
  const ForwardResult r1 = forward(m, p1, a);
  const ForwardResult r2 = forward(m, p2, b);
  EXPECT_EQ(forward(m, p2, b).logits, r2.logits);
  EXPECT_EQ(forward(m, p1, a).logits, r1.logits);
}

TEST(Forward, Causality) {
  const ToyVLM m = random_tiny_model(6);
  const Tensor img = tiny_image(3);
  const TokenSequence a = {1, 2, 3, 4};
  TokenSequence b = a;
  b[2] = 6;
  const Tensor la = forward(m, a, img).logits, lb = forward(m, b, img).logits;
  const std::size_t changed_row = 4 + 2;
  for (std::size_t i = 0; i < changed_row; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(la(i, j), lb(i, j)) << "row " << i;
  bool differs = false;
  for (std::size_t j = 0; j < 8; ++j) differs |= la(changed_row, j) != lb(changed_row, j);
  EXPECT_TRUE(differs);
}

TEST(Forward, SequenceOverflowRejected) {
  const ToyVLM m(tiny_config());
  const TokenSequence prompt(13, 1);  // 4 visual + 13 > 16
  EXPECT_THROW(forward(m, prompt, tiny_image(1)), std::length_error);
}

TEST(Forward, TapsDoNotChangeLogits) {
  const ToyVLM m = random_tiny_model(7);
  const TokenSequence prompt = {1, 2, 3};
  const Tensor img = tiny_image(4);
  Tape tape;
  const BoundModel bound = bind(tape, m, false);
  const ForwardOutput full = forward(bound, tape.constant(img), prompt);
  const ForwardOutput tail = forward(bound, tape.constant(img), prompt, 6);
  const Tensor expect = forward(m, prompt, img).logits;
  EXPECT_EQ(full.logits.value(), expect);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(tail.logits.value()(0, j), expect(6, j));
}

TEST(NllLoss, ZeroModelThreeLnEight) {
  const ToyVLM m(tiny_config());
  const TokenSequence prompt = {1, 2}, answer = {3, 4, 7};
  const double oracle = 3.0 * std::log(8.0);
  EXPECT_NEAR(oracle, 6.23832, 1e-5);
  EXPECT_NEAR(nll_loss(m, prompt, tiny_image(1), answer), oracle, 1e-12);
}

TEST(NllLoss, NonNegativeAndZeroWhenForced) {
  ToyVLM m(tiny_config());
  const TokenSequence prompt = {1}, answer = {5, 5};
  // A huge head bias on token 5 drives P(5) to 1 at every position.
  m.param("lm.head.b")[5] = 1e3;
  EXPECT_NEAR(nll_loss(m, prompt, tiny_image(1), answer), 0.0, 1e-12);
  const ToyVLM r = random_tiny_model(8);
  for (int t = 0; t < 8; ++t) EXPECT_GE(nll_loss(r, prompt, tiny_image(t), TokenSequence{t, 7}), 0.0);
}

TEST(NllLoss, ImageGradientMatchesFiniteDifferences) {
  const ToyVLM m = random_tiny_model(9);
  const TokenSequence prompt = {1, 2}, answer = {3, 7};
  for (std::uint64_t s = 1; s <= 3; ++s) {
    auto f = [&](Tape& tape, const Var& image) {
      const BoundModel bound = bind(tape, m, false);
      return nll_loss(bound, prompt, image, answer);
    };
    EXPECT_LT(grad_check(f, tiny_image(s), 1e-6), 1e-4);
  }
}

TEST(PackedNll, EqualsSumOfPairs) {
  const ToyVLM m = random_tiny_model(10);
  const Tensor img = tiny_image(5);
  const std::vector<QaSegment> segs = {{{1, 2}, {3, 7}}, {{4}, {5, 6, 7}}, {{2, 2, 2}, {1}}};
  Tape tape;
  const BoundModel bound = bind(tape, m, false);
  const double packed = packed_nll_loss(bound, tape.constant(img), segs).value().item();
  double separate = 0;
  for (const auto& s : segs) separate += nll_loss(m, s.prompt, img, s.answer);
  EXPECT_NEAR(packed, separate, 1e-10);
}

TEST(GreedyDecode, ZeroModelEmitsLowestId) {
  const ToyVLM m(tiny_config());
  const TokenSequence prompt = {1, 2};
  EXPECT_EQ(greedy_decode(m, prompt, tiny_image(1), 4), (TokenSequence{0, 0, 0, 0}));
}

TEST(GreedyDecode, StopsAtEndToken) {
  ToyVLM m(tiny_config());
  m.param("lm.head.b")[7] = 1.0;
  const TokenSequence prompt = {1};
  EXPECT_EQ(greedy_decode(m, prompt, tiny_image(1), 5), TokenSequence{7});
}

TEST(GreedyDecode, Deterministic) {
  const ToyVLM m = random_tiny_model(11);
  const TokenSequence prompt = {1, 3};
  EXPECT_EQ(greedy_decode(m, prompt, tiny_image(2), 5), greedy_decode(m, prompt, tiny_image(2), 5));
  EXPECT_THROW(greedy_decode(m, prompt, tiny_image(2), 0), std::invalid_argument);
}

std::vector<TrainingSample> one_sample() { return {{{1, 2}, tiny_image(3), {4, 7}}}; }

TEST(Train, OverfitsSingleSample) {
  ToyVLM m = init_model(tiny_config(12));
  TrainOptions o;
  o.epochs = 300;
  o.lr = 1e-2;
  o.batch_size = 1;
  o.warmup_fraction = 0;
  const auto data = one_sample();
  train(m, data, o);
  EXPECT_LT(nll_loss(m, data[0].prompt, data[0].image, data[0].answer), 0.1);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  ToyVLM m = init_model(tiny_config(13));
  const ToyVLM before = m;
  TrainOptions o;
  o.epochs = 3;
  o.lr = 0;
  train(m, one_sample(), o);
  EXPECT_EQ(m, before);
  TrainOptions h = o;
  h.optimizer = Optimizer::kMomentum;
  train(m, one_sample(), h);
  EXPECT_EQ(m, before);
}

TEST(Train, SameSeedSameCurve) {
  std::vector<TrainingSample> data;
  for (int i = 0; i < 6; ++i) data.push_back({{1, i % 3 + 1}, tiny_image(static_cast<std::uint64_t>(i)), {i % 5, 7}});
  TrainOptions o;
  o.epochs = 4;
  o.batch_size = 2;
  ToyVLM a = init_model(tiny_config(14)), b = init_model(tiny_config(14));
  const TrainReport ra = train(a, data, o), rb = train(b, data, o);
  EXPECT_EQ(ra.loss_curve, rb.loss_curve);
  EXPECT_EQ(a, b);
  EXPECT_EQ(ra.loss_curve.size(), 4u);
}

TEST(Train, NonFiniteLossNamesBatch) {
  ToyVLM m = init_model(tiny_config(15));
  m.param("lm.head.b")[0] = std::numeric_limits<double>::quiet_NaN();
  TrainOptions o;
  o.epochs = 1;
  try {
    train(m, one_sample(), o);
    FAIL() << "expected Error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNumeric);
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripBitIdentical) {
  const ToyVLM m = random_tiny_model(16);
  const auto path = temp_path("rt.ckpt");
  save_checkpoint(m, path);
  EXPECT_EQ(load_checkpoint(path), m);
  EXPECT_TRUE(std::filesystem::exists(path.string() + ".json"));
}

TEST(Checkpoint, VersionMismatchAndMissingFile) {
  const auto path = temp_path("ver.ckpt");
  save_checkpoint(init_model(tiny_config()), path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const char bumped[4] = {99, 0, 0, 0};
    f.write(bumped, 4);
  }
  try {
    load_checkpoint(path);
    FAIL() << "expected version error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCheckpointVersion);
  }
  try {
    load_checkpoint(temp_path("absent.ckpt"));
    FAIL() << "expected missing model error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingModel);
  }
}

}  // namespace
}  // namespace crossmpi
