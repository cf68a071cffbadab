#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "crossmpi/autodiff.hpp"
#include "crossmpi/fft.hpp"
#include "grad_cases.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace crossmpi {
namespace {

using testing::random_tensor;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), std::invalid_argument);
  Tensor t({2, 3}, 0.0);
  EXPECT_EQ(t.size(), 6u);
}

TEST(Tensor, StorageAlignedForVectorKernels) {
  for (std::size_t n : {1u, 3u, 7u, 33u}) {
    const Tensor t({n}, 1.0);
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.data().data()) % EIGEN_MAX_ALIGN_BYTES, 0u) << n;
    const Tensor r = t.reshaped({n, 1});
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(r.data().data()) % EIGEN_MAX_ALIGN_BYTES, 0u) << n;
  }
}

TEST(Tensor, MatmulBitIdenticalAcrossHeapLayouts) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  std::vector<double> av(7 * 13), bv(13 * 5);
  for (double& v : av) v = nd(rng);
  for (double& v : bv) v = nd(rng);
  auto product = [&] {
    Tape tape;
    return matmul(tape.constant(Tensor({7, 13}, av)), tape.constant(Tensor({13, 5}, bv))).value();
  };
  const Tensor ref = product();
  std::vector<std::vector<char>> pads;
  for (std::size_t pad = 1; pad < 40; pad += 3) {
    pads.emplace_back(pad);
    EXPECT_EQ(product(), ref) << pad;
  }
}

TEST(Tensor, MatmulGolden) {
  Tape tape;
  const Var a = tape.constant(Tensor::from_rows({{1, 2}, {3, 4}}));
  const Var b = tape.constant(Tensor::from_rows({{5, 6}, {7, 8}}));
  EXPECT_EQ(matmul(a, b).value(), Tensor::from_rows({{19, 22}, {43, 50}}));
}

TEST(Tensor, MatmulIdentity) {
  std::mt19937_64 rng(3);
  Tape tape;
  const Tensor a = random_tensor({2, 2}, rng);
  EXPECT_EQ(matmul(tape.constant(Tensor::from_rows({{1, 0}, {0, 1}})), tape.constant(a)).value(), a);
}

TEST(Tensor, ShapeMismatchNamesOperationAndShapes) {
  Tape tape;
  const Var a = tape.constant(Tensor({2, 3}, 0.0));
  const Var b = tape.constant(Tensor({2, 3}, 0.0));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(a, tape.constant(Tensor({3, 2}, 0.0))), ShapeError);
}

TEST(Tensor, LeadingAxisBroadcast) {
  Tape tape;
  const Var a = tape.constant(Tensor::from_rows({{1, 2}, {3, 4}}));
  const Var b = tape.constant(Tensor({2}, {10, 20}));
  EXPECT_EQ(add(a, b).value(), Tensor::from_rows({{11, 22}, {13, 24}}));
}

TEST(Autodiff, TrackedInputsProduceTrackedOutputs) {
  Tape tape;
  const Var c = tape.constant(Tensor({2}, {1, 2}));
  const Var x = tape.variable(Tensor({2}, {3, 4}));
  EXPECT_FALSE(add(c, c).tracked());
  EXPECT_TRUE(add(c, x).tracked());
}

TEST(Autodiff, SquareGradient) {
  Tape tape;
  const Var x = tape.variable(Tensor({1}, {3.0}));
  const Gradients g = tape.backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(g.of(x)[0], 6.0);
}

TEST(Autodiff, MeanGradient) {
  Tape tape;
  const Var x = tape.variable(Tensor({4}, {1, 2, 3, 4}));
  const Gradients g = tape.backward(mean(x));
  for (double v : g.of(x).data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Autodiff, MaskedCoordinateHasExactlyZeroGradient) {
  std::mt19937_64 rng(9);
  Tape tape;
  const Var delta = tape.variable(random_tensor({3, 3}, rng));
  Tensor m = random_tensor({3, 3}, rng, 0.5, 1.0);
  m[4] = 0.0;
  const Var root = sum(gelu(mul(tape.constant(m), delta)));
  const Gradients g = tape.backward(root);
  EXPECT_EQ(g.of(delta)[4], 0.0);
  EXPECT_NE(g.of(delta)[0], 0.0);
}

TEST(Autodiff, UntouchedLeafGetsZero) {
  Tape tape;
  const Var x = tape.variable(Tensor({2}, {1, 2}));
  const Var y = tape.variable(Tensor({3}, {1, 2, 3}));
  const Gradients g = tape.backward(sum(x));
  EXPECT_EQ(g.of(y), Tensor({3}, 0.0));
  EXPECT_EQ(g.of(y).shape(), y.shape());
}

TEST(Autodiff, NonScalarRootRejected) {
  Tape tape;
  const Var x = tape.variable(Tensor({2}, {1, 2}));
  EXPECT_THROW(tape.backward(x), std::invalid_argument);
}

TEST(Autodiff, EachOperationVisitedOnce) {
  // A diamond: y = x + x feeds two branches; a double visit would double-count.
  Tape tape;
  const Var x = tape.variable(Tensor({1}, {2.0}));
  const Var y = add(x, x);
  const Var z = add(mul(y, y), y);
  const Gradients g = tape.backward(sum(z));
  // z = 4x² + 2x → dz/dx = 8x + 2 = 18.
  EXPECT_DOUBLE_EQ(g.of(x)[0], 18.0);
}

TEST(Autodiff, GridSampleIdentity) {
  std::mt19937_64 rng(4);
  const Tensor img = random_tensor({2, 5, 6}, rng);
  Tensor grid({5, 6, 2}, 0.0);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      grid[(i * 6 + j) * 2] = static_cast<double>(i);
      grid[(i * 6 + j) * 2 + 1] = static_cast<double>(j);
    }
  Tape tape;
  EXPECT_EQ(grid_sample(tape.constant(img), grid).value(), img);
}

TEST(GradCheck, ExactQuadratic) {
  const double err = grad_check([](Tape&, const Var& x) { return sum(mul(x, x)); }, Tensor({1}, {3.0}), 1e-5);
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, NonFiniteReported) {
  auto f = [](Tape& t, const Var& x) { return sum(mul(x, t.constant(Tensor({1}, {INFINITY})))); };
  EXPECT_THROW(grad_check(f, Tensor({1}, {1.0}), 1e-5), std::domain_error);
}

TEST(GradCheck, EveryPrimitiveFiveSeeds) {
  for (const auto& r : testing::primitive_grad_errors()) EXPECT_LT(r.error, 1e-4) << r.name << " seed " << r.seed;
}

TEST(GradCheck, IndependentTapesInParallelAgree) {
  // Distinct tapes share no state: results computed in any order are identical.
  std::mt19937_64 rng(2);
  const Tensor p = random_tensor({3, 3}, rng);
  auto run = [&] {
    Tape t;
    const Var x = t.variable(p);
    const Gradients g = t.backward(sum(gelu(matmul(x, x))));
    return g.of(x);
  };
  const Tensor a = run();
  const Tensor b = run();
  EXPECT_EQ(a, b);
}

// ---- DFT ----

TEST(Dft, MatchesDoubleSumOracleUpTo16) {
  std::mt19937_64 rng(8);
  for (std::size_t h = 1; h <= 16; ++h)
    for (std::size_t w = 1; w <= 16; ++w) {
      const Tensor x = random_tensor({h, w}, rng);
      const Spectrum a = dft2(x), b = testing::oracle_dft(x);
      for (std::size_t i = 0; i < h * w; ++i) {
        ASSERT_NEAR(a.re[i], b.re[i], 1e-9) << h << "x" << w;
        ASSERT_NEAR(a.im[i], b.im[i], 1e-9) << h << "x" << w;
      }
    }
}

TEST(Dft, Parseval) {
  std::mt19937_64 rng(12);
  for (std::size_t h : {3u, 4u, 7u, 8u, 16u}) {
    const Tensor x = random_tensor({h, h + 1}, rng);
    const Spectrum s = dft2(x);
    double px = 0, ps = 0;
    for (double v : x.data()) px += v * v;
    for (std::size_t i = 0; i < x.size(); ++i) ps += s.re[i] * s.re[i] + s.im[i] * s.im[i];
    EXPECT_NEAR(px, ps / static_cast<double>(x.size()), 1e-9 * px);
  }
}

TEST(Dft, ImpulseGivesFlatHalfSpectrum) {
  Tensor x({4, 4}, 0.0);
  x(0, 0) = 0.5;
  const Spectrum s = dft2(x);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(std::hypot(s.re[i], s.im[i]), 0.5, 1e-12);
}

TEST(Dft, ZeroAndConstant) {
  const Spectrum z = dft2(Tensor({4, 5}, 0.0));
  for (double v : z.re.data()) EXPECT_EQ(v, 0.0);
  for (double v : z.im.data()) EXPECT_EQ(v, 0.0);
  const Spectrum c = dft2(Tensor({4, 4}, 0.3));
  EXPECT_NEAR(c.re[0], 16 * 0.3, 1e-12);
  for (std::size_t i = 1; i < 16; ++i) EXPECT_NEAR(std::hypot(c.re[i], c.im[i]), 0.0, 1e-12);
}

TEST(Dft, AdjointIsGradient) {
  // <dft2(x), y> = <x, adjoint(y)> for the real part of the pairing.
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({4, 6}, rng);
  const Tensor yr = random_tensor({4, 6}, rng), yi = random_tensor({4, 6}, rng);
  const Spectrum fx = dft2(x);
  const Spectrum ay = dft2_adjoint(yr, yi);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    lhs += fx.re[i] * yr[i] + fx.im[i] * yi[i];
    rhs += x[i] * ay.re[i];
  }
  EXPECT_NEAR(lhs, rhs, 1e-9);
}

}  // namespace
}  // namespace crossmpi
