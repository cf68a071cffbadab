#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "crossmpi/errors.hpp"
#include "crossmpi/eval.hpp"
#include "crossmpi/image_io.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace crossmpi {
namespace {

using testing::random_tensor;
using testing::random_tiny_model;
using testing::tiny_config;
using testing::tiny_image;

// ---- metrics ----

TEST(Asr, Arithmetic) {
  EXPECT_EQ(asr({true, false}), 0.5);
  EXPECT_EQ(asr({true, true, true}), 1.0);
  EXPECT_EQ(asr({false, false}), 0.0);
  EXPECT_EQ(asr({true, false, false}), 1.0 / 3.0);
  EXPECT_THROW(asr({}), std::invalid_argument);
}

TEST(SemanticSimilarity, IdentityOrthogonalitySymmetry) {
  Tensor table({4, 3}, 0.0);
  table(0, 0) = 1;
  table(1, 1) = 2;
  table(2, 0) = 0.5;
  table(2, 2) = 0.5;
  EXPECT_NEAR(semantic_similarity(table, {0, 2}, {0, 2}), 1.0, 1e-15);
  EXPECT_EQ(semantic_similarity(table, {0}, {1}), 0.0);
  EXPECT_EQ(semantic_similarity(table, {0, 2}, {1, 2}), semantic_similarity(table, {1, 2}, {0, 2}));
  EXPECT_EQ(semantic_similarity(table, {3}, {0}), 0.0);  // zero pooled vector
  EXPECT_THROW(semantic_similarity(table, {}, {0}), std::invalid_argument);
  const ToyVLM m = random_tiny_model(1);
  EXPECT_NEAR(semantic_similarity_proxy(m, {1, 2, 7}, {1, 2, 7}), 1.0, 1e-12);
}

TEST(Ssim, GoldenValues) {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({1, 32, 32}, rng, 0, 1);
  EXPECT_EQ(ssim(x, x), 1.0);
  EXPECT_EQ(ms_ssim(x, x), 1.0);
  const double oracle = testing::ssim_constant_oracle(0.5, 0.25);
  EXPECT_NEAR(oracle, 0.80007, 1e-4);
  EXPECT_NEAR(ssim(Tensor({1, 8, 8}, 0.5), Tensor({1, 8, 8}, 0.25)), oracle, 1e-6);
  // The global-window fallback also applies per channel.
  EXPECT_NEAR(ssim(Tensor({3, 4, 4}, 0.5), Tensor({3, 4, 4}, 0.25)), oracle, 1e-6);
}

TEST(Ssim, SymmetricAndInRange) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 5; ++t) {
    const Tensor x = random_tensor({1, 32, 32}, rng, 0, 1), y = random_tensor({1, 32, 32}, rng, 0, 1);
    const double a = ssim(x, y), b = ssim(y, x);
    EXPECT_NEAR(a, b, 1e-15);
    EXPECT_GE(a, -1.0);
    EXPECT_LE(a, 1.0);
    const double m = ms_ssim(x, y);
    EXPECT_GE(m, -1.0);
    EXPECT_LE(m, 1.0);
  }
  EXPECT_THROW(ssim(Tensor({1, 4, 4}, 0.0), Tensor({1, 4, 5}, 0.0)), std::invalid_argument);
}

TEST(Ssim, DecreasesWithNoise) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({1, 32, 32}, rng, 0.2, 0.8);
  Tensor small = x, large = x;
  std::normal_distribution<double> n(0, 1);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = n(rng);
    small[i] += 0.01 * z;
    large[i] += 0.1 * z;
  }
  EXPECT_GT(ssim(x, small), ssim(x, large));
  EXPECT_GT(ms_ssim(x, small), ms_ssim(x, large));
}

TEST(HighFrequencyEnergy, Cases) {
  EXPECT_EQ(high_frequency_energy(Tensor({1, 8, 8}, 0.0), 0.25), 0.0);
  EXPECT_NEAR(high_frequency_energy(Tensor({1, 8, 8}, 0.2), 0.25), 0.0, 1e-15);
  Tensor impulse({1, 4, 4}, 0.0);
  impulse(0, 0, 0) = 1.0;
  EXPECT_NEAR(high_frequency_energy(impulse, 0.25), 15.0 / 16.0, 1e-12);
}

// ---- defenses ----

void expect_valid(const Tensor& out, const Tensor& in) {
  EXPECT_EQ(out.shape(), in.shape());
  for (double v : out.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Defenses, ValidImagesOfOriginalShape) {
  std::mt19937_64 rng(4);
  for (const Shape& s : {Shape{1, 32, 32}, Shape{3, 20, 20}, Shape{1, 13, 13}}) {
    const Tensor img = random_tensor(s, rng, 0, 1);
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      expect_valid(defense_randomization(img, seed), img);
      expect_valid(defense_rotation(img, seed), img);
      expect_valid(smooth_vote_view(img, 0.2, seed, 1), img);
    }
    expect_valid(defense_jpeg(img, 75), img);
    expect_valid(defense_jpeg(img, 5), img);
  }
}

TEST(Defenses, DeterministicPerSeed) {
  std::mt19937_64 rng(5);
  const Tensor img = random_tensor({1, 32, 32}, rng, 0, 1);
  EXPECT_EQ(defense_randomization(img, 7), defense_randomization(img, 7));
  EXPECT_EQ(defense_rotation(img, 7), defense_rotation(img, 7));
  EXPECT_NE(defense_rotation(img, 7), defense_rotation(img, 8));
  EXPECT_EQ(smooth_vote_view(img, 0.2, 7, 2), smooth_vote_view(img, 0.2, 7, 2));
}

TEST(Defenses, IdentityCases) {
  std::mt19937_64 rng(6);
  const Tensor img = random_tensor({1, 16, 16}, rng, 0, 1);
  EXPECT_EQ(defense_randomization(img, 3, 1.0, 1.0), img);
  EXPECT_EQ(defense_rotation(img, 3, 0.0), img);
  EXPECT_EQ(smooth_vote_view(img, 0.0, 3, 0), img);
}

TEST(Defenses, SmoothVoteMasksRequestedFraction) {
  const Tensor img({1, 10, 10}, 1.0);
  const Tensor v = smooth_vote_view(img, 0.2, 1, 0);
  int zeros = 0;
  for (double x : v.data()) zeros += x == 0.0;
  EXPECT_EQ(zeros, 20);
}

TEST(Jpeg, QuantTable) {
  EXPECT_EQ(jpeg_quant_table(75)[0], 8);
  EXPECT_EQ(jpeg_quant_table(50)[0], 16);
  for (int q : jpeg_quant_table(100)) EXPECT_EQ(q, 1);
  EXPECT_THROW(jpeg_quant_table(0), std::invalid_argument);
  EXPECT_THROW(jpeg_quant_table(101), std::invalid_argument);
}

TEST(Jpeg, ConstantBlockUnchanged) {
  const Tensor block({1, 8, 8}, 128.0 / 255.0);
  const Tensor out = defense_jpeg(block, 75);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], block[i], 1e-12);
}

TEST(Jpeg, UnitQuantizerBound) {
  // With every quantizer 1 the only change is rounding each orthonormal DCT
  // coefficient, so each 8×8 block moves by at most 0.5·8/255 in L2.
  std::mt19937_64 rng(7);
  const Tensor img = random_tensor({1, 16, 16}, rng, 0.1, 0.9);
  const Tensor out = defense_jpeg(img, 100);
  for (std::size_t br = 0; br < 16; br += 8)
    for (std::size_t bc = 0; bc < 16; bc += 8) {
      double sq = 0;
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
          const double d = out(0, br + i, bc + j) - img(0, br + i, bc + j);
          sq += d * d;
          EXPECT_LE(std::abs(d), 0.5 * 8 / 255.0);
        }
      EXPECT_LE(std::sqrt(sq), 0.5 * 8 / 255.0 + 1e-12);
    }
}

TEST(Jpeg, IdempotentOnConstantImages) {
  for (double c : {0.0, 0.13, 0.5, 0.77, 1.0}) {
    const Tensor img({1, 12, 12}, c);
    const Tensor once = defense_jpeg(img, 75);
    const Tensor twice = defense_jpeg(once, 75);
    for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(twice[i], once[i], 1e-12);
  }
}

TEST(SmoothVote, ContractCases) {
  const ToyVLM m = random_tiny_model(3);
  const TokenSequence prompt = {1, 2};
  const Tensor img = tiny_image(4);
  EXPECT_EQ(defense_smooth_vote(m, prompt, img, 1, 0.2, 9, 4),
            greedy_decode(m, prompt, smooth_vote_view(img, 0.2, 9, 0), 4));
  EXPECT_EQ(defense_smooth_vote(m, prompt, img, 5, 0.0, 9, 4), greedy_decode(m, prompt, img, 4));
  const ToyVLM zero(tiny_config());
  EXPECT_EQ(defense_smooth_vote(zero, prompt, img, 5, 0.5, 9, 3), (TokenSequence{0, 0, 0}));
  EXPECT_THROW(defense_smooth_vote(m, prompt, img, 0, 0.2, 9, 4), std::invalid_argument);
}

TEST(DefenseNames, RoundTrip) {
  for (Defense d : {Defense::kNone, Defense::kRandomization, Defense::kRotation, Defense::kJpeg, Defense::kSmoothVote})
    EXPECT_EQ(defense_from_name(defense_name(d)), d);
  EXPECT_THROW(defense_from_name("median"), std::invalid_argument);
}

// ---- campaign ----

std::vector<AttackInstance> tiny_instances(int n) {
  std::vector<AttackInstance> out;
  for (int i = 0; i < n; ++i) {
    AttackInstance inst;
    inst.id = "t" + std::to_string(i);
    inst.spec.benign_prompt = {1, 2};
    inst.spec.image = tiny_image(static_cast<std::uint64_t>(i));
    inst.spec.target_prompt = {3};
    inst.spec.target_image = inst.spec.image;
    inst.spec.target_keywords = {5};
    inst.spec.layers = {3, 4};
    inst.spec.steps = 3;
    inst.spec.seed = static_cast<std::uint64_t>(i);
    inst.saliency_prompt = {4};
    inst.saliency_answer = {6, 7};
    out.push_back(inst);
  }
  return out;
}

TEST(Campaign, RowCountsAndColumns) {
  const ToyVLM a = random_tiny_model(1), b = random_tiny_model(2);
  CampaignSpec spec;
  spec.defenses = {Defense::kJpeg, Defense::kSmoothVote};
  const auto data = tiny_instances(3);
  const CampaignReport r = run_campaign({"A", &a}, {{"A", &a}, {"B", &b}}, data, spec);
  EXPECT_EQ(r.rows.size(), 3u * 2u * 3u);
  EXPECT_EQ(r.cells.size(), 2u * 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(r.instances[i].error.empty()) << r.instances[i].error;
    bool white_box = false;
    for (const auto& row : r.rows)
      if (row.instance == i && row.target == "A" && row.defense == Defense::kNone) white_box = row.success;
    EXPECT_EQ(white_box, r.instances[i].source_success);
  }
  const CellSummary& c = find_cell(r, "B", Defense::kJpeg);
  EXPECT_EQ(c.count, 3u);
  std::vector<bool> flags;
  for (const auto& row : r.rows)
    if (row.target == "B" && row.defense == Defense::kJpeg) flags.push_back(row.success);
  EXPECT_EQ(c.asr, asr(flags));
  EXPECT_EQ(to_json(r), to_json(run_campaign({"A", &a}, {{"A", &a}, {"B", &b}}, data, spec)));
  EXPECT_FALSE(matrix_csv(r).empty());
}

TEST(Campaign, EmptyDefenseListAndFailingInstance) {
  const ToyVLM a = random_tiny_model(1);
  auto data = tiny_instances(2);
  data[1].spec.layers = {99};  // invalid: recorded, campaign continues
  const CampaignReport r = run_campaign({"A", &a}, {{"A", &a}}, data, CampaignSpec{});
  EXPECT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.cells.size(), 1u);
  EXPECT_TRUE(r.instances[0].error.empty());
  EXPECT_FALSE(r.instances[1].error.empty());
  EXPECT_FALSE(r.rows[1].success);
}

// ---- image I/O ----

std::filesystem::path tmp(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("crossmpi_io_test_" + name);
}

TEST(ImageIo, QuantizedRoundTripIsBitIdentical) {
  std::mt19937_64 rng(8);
  for (std::size_t c : {1u, 3u}) {
    const Tensor img = quantize8(random_tensor({c, 7, 5}, rng, 0, 1));
    const auto path = tmp(c == 1 ? "a.pgm" : "a.ppm");
    write_image(path, img);
    EXPECT_EQ(read_image(path), img);
    EXPECT_EQ(decode_image(encode_image(img)), img);
  }
}

TEST(ImageIo, ChannelsFromMagic) {
  EXPECT_EQ(decode_image(std::string("P5\n2 1\n255\n") + std::string("\x00\xff", 2)).shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(decode_image(std::string("P6\n1 1\n255\n") + std::string("\x01\x02\x03", 3)).shape(), (Shape{3, 1, 1}));
}

TEST(ImageIo, RejectsMalformedInput) {
  auto code = [](const std::string& bytes) {
    try {
      decode_image(bytes);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kIo;
  };
  EXPECT_EQ(code(std::string("P6\n1 1\n65535\n") + std::string(6, '\0')), ErrorCode::kFormat);
  EXPECT_EQ(code(std::string("P6\n1 1\n127\n") + std::string(3, '\0')), ErrorCode::kFormat);
  EXPECT_EQ(code(std::string("P5\n4 4\n255\n") + std::string(5, '\0')), ErrorCode::kFormat);
  EXPECT_EQ(code("P3\n1 1\n255\n0 0 0"), ErrorCode::kFormat);
  EXPECT_EQ(code("P5\nx y\n255\n"), ErrorCode::kFormat);
  try {
    read_image(tmp("missing.pgm"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingInput);
  }
}

}  // namespace
}  // namespace crossmpi
