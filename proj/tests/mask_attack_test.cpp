#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "crossmpi/attack.hpp"
#include "crossmpi/mask.hpp"
#include "grad_cases.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace crossmpi {
namespace {

using testing::random_tensor;
using testing::random_tiny_model;
using testing::tiny_config;
using testing::tiny_image;

// ---- budget mask ----

TEST(BudgetMask, WorkedExampleMatchesOracle) {
  const double eps = 16.0 / 255.0;
  const BudgetMask m = build_budget_mask(Tensor::from_rows({{4, 2}, {2, 0}}), eps, 0.3, 25.0);
  const testing::MaskOracle o = testing::oracle_2x2(0.3);
  ASSERT_EQ(m.support.size(), 1u);
  EXPECT_EQ(m.support[0], (std::pair<std::size_t, std::size_t>{0, 0}));
  EXPECT_NEAR(m.centroid_row, 0.0, 1e-12);
  EXPECT_NEAR(m.centroid_col, 0.0, 1e-12);
  EXPECT_NEAR(m.w_mean, o.wbar, 1e-6);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_NEAR(m.r(i, j), o.r[i][j], 1e-6);
      EXPECT_NEAR(m.d(i, j), o.d[i][j], 1e-6);
      EXPECT_NEAR(m.w(i, j), o.w[i][j], 1e-6);
      EXPECT_NEAR(m.budget(i, j) / eps, o.ratio[i][j], 1e-6);
    }
  // The published rounded values agree with the oracle.
  EXPECT_NEAR(o.wbar, 1.07322, 1e-5);
  EXPECT_NEAR(o.ratio[0][0], 1.25907, 1e-5);
  EXPECT_NEAR(o.ratio[0][1], 1.02047, 1e-5);
  EXPECT_NEAR(o.ratio[1][1], 0.70000, 1e-5);
  EXPECT_NEAR(o.d[0][1], 0.70711, 1e-5);
  EXPECT_NEAR(o.w[0][1], 1.14645, 1e-5);
}

TEST(BudgetMask, ConservationOverRandomMaps) {
  std::mt19937_64 rng(21);
  const double eps = 16.0 / 255.0;
  for (int t = 0; t < 100; ++t) {
    const Tensor s = random_tensor({9, 11}, rng, 0.0, 3.0);
    for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      const BudgetMask m = build_budget_mask(s, eps, lambda, 5.0);
      double mean = 0;
      for (double v : m.budget.data()) mean += v;
      mean /= static_cast<double>(m.budget.size());
      EXPECT_NEAR(mean, eps, 1e-9 * eps);
      for (double v : m.budget.data()) EXPECT_GE(v, 0.0);
      double rmax = 0, dmax = 0;
      for (double v : m.r.data()) rmax = std::max(rmax, v);
      for (double v : m.d.data()) dmax = std::max(dmax, v);
      EXPECT_EQ(rmax, 1.0);
      EXPECT_EQ(dmax, 1.0);
      for (double v : m.w.data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 2.0);
      }
    }
  }
}

TEST(BudgetMask, LambdaZeroIsExactlyUniform) {
  std::mt19937_64 rng(2);
  const BudgetMask m = build_budget_mask(random_tensor({6, 6}, rng, 0.0, 1.0), 0.05, 0.0, 10.0);
  for (double v : m.budget.data()) EXPECT_EQ(v, 0.05);
}

TEST(BudgetMask, UniformSaliencyGivesUniformBudget) {
  for (double lambda : {0.0, 0.3, 1.0}) {
    const BudgetMask m = build_budget_mask(Tensor({4, 5}, 0.7), 0.1, lambda, 5.0);
    for (double v : m.w.data()) EXPECT_EQ(v, 2.0);
    for (double v : m.budget.data()) EXPECT_NEAR(v, 0.1, 1e-15);
  }
}

TEST(BudgetMask, MonotoneInWeight) {
  std::mt19937_64 rng(7);
  const BudgetMask m = build_budget_mask(random_tensor({8, 8}, rng, 0.0, 1.0), 0.06, 0.4, 5.0);
  for (std::size_t a = 0; a < 64; ++a)
    for (std::size_t b = 0; b < 64; ++b)
      if (m.w[a] > m.w[b]) EXPECT_GT(m.budget[a], m.budget[b]);
}

TEST(BudgetMask, ScaleInvariant) {
  std::mt19937_64 rng(8);
  const Tensor s = random_tensor({7, 7}, rng, 0.0, 1.0);
  Tensor s4 = s;
  for (auto& v : s4.storage()) v *= 4.0;  // exact in binary floating point
  const BudgetMask a = build_budget_mask(s, 0.06, 0.3, 5.0), b = build_budget_mask(s4, 0.06, 0.3, 5.0);
  EXPECT_EQ(a.r, b.r);
  EXPECT_EQ(a.support, b.support);
  EXPECT_EQ(a.budget, b.budget);
}

TEST(BudgetMask, TiesAtCutoffIncluded) {
  const Tensor s = Tensor::from_rows({{1, 1, 1}, {1, 0, 0}});
  const BudgetMask m = build_budget_mask(s, 0.1, 0.3, 20.0);  // one pixel requested, four tied
  EXPECT_EQ(m.support.size(), 4u);
}

TEST(BudgetMask, RejectsBadArguments) {
  const Tensor s = Tensor::from_rows({{4, 2}, {2, 0}});
  EXPECT_THROW(build_budget_mask(s, 0.1, -0.1, 5.0), std::invalid_argument);
  EXPECT_THROW(build_budget_mask(s, 0.1, 1.1, 5.0), std::invalid_argument);
  EXPECT_THROW(build_budget_mask(s, 0.0, 0.3, 5.0), std::invalid_argument);
  EXPECT_THROW(build_budget_mask(s, 0.1, 0.3, 0.0), std::invalid_argument);
  EXPECT_THROW(build_budget_mask(s, 0.1, 0.3, 10.0), std::invalid_argument);  // selects zero pixels
  EXPECT_THROW(build_budget_mask(Tensor({2, 2}, 0.0), 0.1, 0.3, 50.0), std::invalid_argument);
  const BudgetMask fallback = build_budget_mask(Tensor({2, 2}, 0.0), 0.1, 0.3, 50.0, true);
  EXPECT_TRUE(fallback.degenerate);
  for (double v : fallback.budget.data()) EXPECT_EQ(v, 0.1);
}

TEST(Saliency, ZeroModelIsDegenerate) {
  const ToyVLM m(tiny_config());
  const SaliencyMap s = compute_saliency(m, tiny_image(1), {1, 2}, {3, 7});
  for (double v : s.scores.data()) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(build_budget_mask(s, MaskSettings{}).degenerate);
}

TEST(Saliency, ShapeDeterminismAndChannelMax) {
  ModelConfig c = tiny_config(3);
  c.channels = 3;
  ToyVLM m(c);
  std::mt19937_64 rng(3);
  for (auto& p : m.params())
    for (auto& v : p.storage()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  const Tensor img = random_tensor({3, 8, 8}, rng, 0.0, 1.0);
  const SaliencyMap a = compute_saliency(m, img, {1, 2}, {3, 7});
  const SaliencyMap b = compute_saliency(m, img, {1, 2}, {3, 7});
  EXPECT_EQ(a.scores.shape(), (Shape{8, 8}));
  EXPECT_EQ(a.scores, b.scores);
  for (double v : a.scores.data()) EXPECT_GE(v, 0.0);
  EXPECT_EQ(a.source, SaliencySource::kGradient);
}

// ---- attack losses ----

TEST(LossOut, ZeroModelTwoLnSixtyFour) {
  const ToyVLM m{ModelConfig{}};
  Tape tape;
  const BoundModel b = bind(tape, m, false);
  const Var img = tape.constant(Tensor({1, 32, 32}, 0.5));
  const double v = loss_out(b, {1, 2, 3}, img, {5, 9}).value().item();
  EXPECT_NEAR(2 * std::log(64.0), 8.3178, 1e-4);
  EXPECT_NEAR(v, 2 * std::log(64.0), 1e-12);
}

TEST(LossOut, ForcedTargetIsZeroAndMonotone) {
  ToyVLM m(tiny_config());
  auto eval = [&](const ToyVLM& model) {
    Tape t;
    return loss_out(bind(t, model, false), {1}, t.constant(tiny_image(1)), {4, 4}).value().item();
  };
  const double base = eval(m);
  m.param("lm.head.b")[4] = 0.5;
  EXPECT_LT(eval(m), base);
  m.param("lm.head.b")[4] = 1e3;
  EXPECT_NEAR(eval(m), 0.0, 1e-12);
}

TEST(LossFuse, IdenticalPairIsZeroAndAdditive) {
  const ToyVLM m = random_tiny_model(4);
  const TokenSequence p = {1, 2};
  const Tensor img = tiny_image(2);
  const auto ref = fuse_reference(m, p, img, {2, 5}, false);
  Tape tape;
  const BoundModel b = bind(tape, m, false);
  EXPECT_EQ(loss_fuse(b, p, tape.constant(img), {2, 5}, ref, false).value().item(), 0.0);

  const auto ref2 = fuse_reference(m, {3}, tiny_image(3), {2, 5}, false);
  const double both = loss_fuse(b, p, tape.constant(img), {2, 5}, ref2, false).value().item();
  const auto ref_dup = fuse_reference(m, {3}, tiny_image(3), {2, 2, 5}, false);
  const double dup = loss_fuse(b, p, tape.constant(img), {2, 2, 5}, ref_dup, false).value().item();
  const auto ref_one = fuse_reference(m, {3}, tiny_image(3), {2}, false);
  const double one = loss_fuse(b, p, tape.constant(img), {2}, ref_one, false).value().item();
  EXPECT_GT(both, 0.0);
  EXPECT_NEAR(dup - both, one, 1e-12);
}

TEST(LossFreq, GoldenValues) {
  Tensor impulse({1, 4, 4}, 0.0);
  impulse(0, 0, 0) = 0.5;
  EXPECT_NEAR(loss_freq(impulse, 0.25), 0.5, 1e-12);
  EXPECT_EQ(loss_freq(Tensor({1, 8, 8}, 0.0), 0.25), 0.0);
  EXPECT_NEAR(loss_freq(Tensor({2, 8, 8}, 0.3), 0.25), 0.0, 1e-12);
}

TEST(GradCheck, LossTermsFiveSeeds) {
  for (const auto& r : testing::loss_grad_errors()) EXPECT_LT(r.error, 1e-4) << r.name << " seed " << r.seed;
}

AttackSpec tiny_spec(std::uint64_t seed) {
  AttackSpec s;
  s.benign_prompt = {1, 2};
  s.image = tiny_image(seed);
  s.target_prompt = {3};
  s.target_image = s.image;
  s.target_keywords = {5};
  s.layers = {3, 4};
  s.steps = 5;
  s.seed = seed;
  return s;
}

// ---- augmentation ----

TEST(Augment, IdentityViewsAreExact) {
  std::mt19937_64 rng(1);
  const Tensor img = random_tensor({1, 8, 8}, rng, 0, 1);
  ViewDraw draw;
  draw.noise = Tensor({1, 8, 8}, 0.0);
  Tape tape;
  const Var x = tape.constant(img);
  EXPECT_EQ(apply_view(0, x, draw).value(), img);
  draw.degrees = 0.0;
  EXPECT_EQ(apply_view(2, x, draw).value(), img);
  draw.brightness = 1.0;
  EXPECT_EQ(apply_view(3, x, draw).value(), img);
  draw.scale = 1.0;
  EXPECT_EQ(apply_view(1, x, draw).value(), img);
}

TEST(Augment, SharedDrawsAcrossBranches) {
  std::mt19937_64 rng(2);
  AugmentSettings settings;
  const ViewDraw d = draw_views(rng, settings, {1, 8, 8});
  EXPECT_GE(d.scale, settings.scale_lo);
  EXPECT_LE(d.scale, settings.scale_hi);
  EXPECT_LE(std::abs(d.degrees), settings.max_degrees);
  Tape tape;
  const Var img = tape.constant(tiny_image(1));
  const AugmentedViews v = augment_views(img, img, d);
  ASSERT_EQ(v.images.size(), 6u);
  for (int k = 0; k < 6; ++k) EXPECT_EQ(v.images[k].value(), v.deltas[k].value()) << k;
}

// ---- judge / run_attack ----

TEST(JudgeSuccess, ContainmentRule) {
  EXPECT_TRUE(contains_subsequence({10, 11, 12, 30, 63}, {30}));
  EXPECT_FALSE(contains_subsequence({}, {30}));
  EXPECT_FALSE(contains_subsequence({10, 30}, {30, 31}));
  EXPECT_TRUE(contains_subsequence({10, 30, 31}, {30, 31}));
  EXPECT_FALSE(contains_subsequence({30, 10, 31}, {30, 31}));
}

TEST(AttackSpec, ValidationRules) {
  const ModelConfig c = tiny_config();
  AttackSpec s = tiny_spec(1);
  EXPECT_NO_THROW(s.validate(c));
  AttackSpec same = s;
  same.target_prompt = same.benign_prompt;
  EXPECT_THROW(same.validate(c), std::invalid_argument);
  AttackSpec nokw = s;
  nokw.target_keywords.clear();
  EXPECT_THROW(nokw.validate(c), std::invalid_argument);
  AttackSpec badlayer = s;
  badlayer.layers = {8};
  EXPECT_THROW(badlayer.validate(c), std::invalid_argument);
  EXPECT_EQ(attack_spec_from_json(to_json(s)).layers, s.layers);
}

BudgetMask zero_mask() {
  BudgetMask m = uniform_mask(8, 8, 0.1);
  m.budget.fill(0.0);
  return m;
}

TEST(RunAttack, ZeroMaskFreezesImage) {
  const ToyVLM m = random_tiny_model(7);
  const AttackSpec s = tiny_spec(2);
  const AttackResult r = run_attack(m, s, zero_mask());
  EXPECT_EQ(r.perturbed, s.image);
  for (double v : r.effective.data()) EXPECT_EQ(v, 0.0);
}

TEST(RunAttack, ZeroStepsGivesInitialPoint) {
  const ToyVLM m = random_tiny_model(7);
  AttackSpec s = tiny_spec(3);
  s.steps = 0;
  const BudgetMask mask = uniform_mask(8, 8, 0.1);
  const AttackResult r = run_attack(m, s, mask);
  EXPECT_TRUE(r.trace.empty());
  EXPECT_EQ(r.steps_used, 0);
  for (std::size_t i = 0; i < r.delta.size(); ++i) {
    EXPECT_LE(std::abs(r.delta[i]), 0.01);
    EXPECT_DOUBLE_EQ(r.perturbed[i], std::clamp(s.image[i] + 0.1 * r.delta[i], 0.0, 1.0));
  }
}

TEST(RunAttack, AlreadySuccessfulStopsAtStepZero) {
  const ToyVLM m = random_tiny_model(8);
  AttackSpec s = tiny_spec(4);
  const TokenSequence clean = greedy_decode(m, s.benign_prompt, s.image, s.decode_tokens);
  s.target_keywords = {clean.front()};
  const AttackResult r = run_attack(m, s, uniform_mask(8, 8, 0.05));
  EXPECT_TRUE(r.success);
  ASSERT_EQ(r.trace.size(), 1u);
  EXPECT_EQ(r.trace[0].step, 0);
  EXPECT_TRUE(r.trace[0].success);
}

TEST(RunAttack, BudgetRespectedAndDeterministic) {
  const ToyVLM m = random_tiny_model(9);
  AttackSpec s = tiny_spec(5);
  s.steps = 8;
  s.target_keywords = {6, 6};
  std::mt19937_64 rng(5);
  const BudgetMask mask = build_budget_mask(random_tensor({8, 8}, rng, 0, 1), 0.2, 0.5, 10.0);
  const AttackResult a = run_attack(m, s, mask);
  const AttackResult b = run_attack(m, s, mask);
  EXPECT_EQ(a.perturbed, b.perturbed);
  EXPECT_EQ(a.delta, b.delta);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(a.trace[i].l_attack, b.trace[i].l_attack);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_LE(std::abs(a.effective(0, i, j)), mask.budget(i, j));
      EXPECT_GE(a.perturbed(0, i, j), 0.0);
      EXPECT_LE(a.perturbed(0, i, j), 1.0);
      EXPECT_NEAR(a.perturbed(0, i, j), s.image(0, i, j) + a.effective(0, i, j), 1e-15);
    }
  EXPECT_NE(trace_csv(a).find("step,l_out,l_fuse,l_freq,l_attack,success"), std::string::npos);
}

TEST(Project, ShrinksOffendingEntries) {
  Tensor delta({1, 1, 3}, {2.0, -0.5, 0.9});
  const Tensor image({1, 1, 3}, {0.5, 0.02, 0.95});
  const Tensor budget({1, 3}, {0.1, 0.1, 0.1});
  project(delta, image, budget);
  EXPECT_EQ(delta[0], 1.0);
  EXPECT_NEAR(image[1] + budget[1] * delta[1], 0.0, 1e-15);
  EXPECT_NEAR(image[2] + budget[2] * delta[2], 1.0, 1e-15);
  EXPECT_GE(image[2] + budget[2] * delta[2], image[2]);
}

}  // namespace
}  // namespace crossmpi
