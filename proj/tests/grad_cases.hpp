#pragma once

// Finite-difference gradient cases shared by the unit tests and the
// acceptance run: every autodiff primitive and every attack loss term.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "crossmpi/attack.hpp"
#include "crossmpi/autodiff.hpp"
#include "crossmpi/fft.hpp"
#include "crossmpi/mask.hpp"
#include "test_support.hpp"

namespace crossmpi::testing {

struct GradResult {
  std::string name;
  std::uint64_t seed = 0;
  double error = 0;  // grad_check relative error
};

// Every primitive, reduced to a scalar through a random linear functional so
// the whole Jacobian is exercised.
struct OpCase {
  std::string name;
  Shape input;
  std::function<Var(Tape&, const Var&, std::mt19937_64&)> build;
};

inline Var weigh(Tape& tape, const Var& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(out, tape.constant(random_tensor(out.shape(), rng))));
}

inline std::vector<OpCase> op_cases() {
  auto aux = [](std::mt19937_64& rng, Shape s) { return random_tensor(s, rng); };
  std::vector<OpCase> cases;
  cases.push_back({"add", {3, 4}, [=](Tape& t, const Var& x, auto& r) { return add(x, t.constant(aux(r, {4}))); }});
  cases.push_back({"sub", {3, 4}, [=](Tape& t, const Var& x, auto& r) { return sub(t.constant(aux(r, {3, 4})), x); }});
  cases.push_back({"mul", {3, 4}, [=](Tape& t, const Var& x, auto& r) { return mul(x, t.constant(aux(r, {3, 4}))); }});
  cases.push_back({"mul_self", {3, 4}, [](Tape&, const Var& x, auto&) { return mul(x, x); }});
  cases.push_back({"scale", {5}, [](Tape&, const Var& x, auto&) { return scale(x, -2.5); }});
  cases.push_back({"shift", {5}, [](Tape&, const Var& x, auto&) { return shift(x, 0.7); }});
  cases.push_back({"matmul_left", {3, 4}, [=](Tape& t, const Var& x, auto& r) { return matmul(x, t.constant(aux(r, {4, 2}))); }});
  cases.push_back({"matmul_right", {4, 2}, [=](Tape& t, const Var& x, auto& r) { return matmul(t.constant(aux(r, {3, 4})), x); }});
  cases.push_back({"matmul_nt", {3, 4}, [=](Tape& t, const Var& x, auto& r) { return matmul_nt(x, t.constant(aux(r, {2, 4}))); }});
  cases.push_back({"matmul_nt_self", {3, 4}, [](Tape&, const Var& x, auto&) { return matmul_nt(x, x); }});
  cases.push_back({"softmax", {3, 5}, [](Tape&, const Var& x, auto&) { return softmax(x); }});
  cases.push_back({"softmax_causal", {4, 4}, [](Tape&, const Var& x, auto&) { return softmax(x, true); }});
  cases.push_back({"masked_softmax", {3, 3}, [](Tape&, const Var& x, auto&) {
                     return masked_softmax(x, {1, 0, 1, 1, 1, 0, 0, 0, 1});
                   }});
  cases.push_back({"attention", {4, 6}, [=](Tape& t, const Var& x, auto& r) {
                     const Var k = matmul(x, t.constant(aux(r, {6, 6})));
                     const Var v = matmul(x, t.constant(aux(r, {6, 6})));
                     return multi_head_attention(x, k, v, 2);
                   }});
  cases.push_back({"attention_causal", {4, 6}, [=](Tape& t, const Var& x, auto& r) {
                     const Var k = t.constant(aux(r, {4, 6}));
                     return multi_head_attention(x, k, x, 3, causal_mask(4));
                   }});
  cases.push_back({"layer_norm", {3, 5}, [=](Tape& t, const Var& x, auto& r) {
                     return layer_norm(x, t.constant(aux(r, {5})), t.constant(aux(r, {5})));
                   }});
  cases.push_back({"layer_norm_params", {5}, [=](Tape& t, const Var& g, auto& r) {
                     return layer_norm(t.constant(aux(r, {3, 5})), g, g);
                   }});
  cases.push_back({"relu", {6}, [](Tape&, const Var& x, auto&) { return relu(x); }});
  cases.push_back({"gelu", {6}, [](Tape&, const Var& x, auto&) { return gelu(x); }});
  cases.push_back({"clamp", {6}, [](Tape&, const Var& x, auto&) { return clamp(x, -0.5, 0.5); }});
  cases.push_back({"embedding", {5, 3}, [](Tape&, const Var& x, auto&) {
                     const std::vector<int> ids = {4, 0, 4, 2};
                     return embedding(x, ids);
                   }});
  cases.push_back({"gather", {2, 3}, [](Tape&, const Var& x, auto&) { return gather(x, {5, 0, 0, 3}, {2, 2}); }});
  cases.push_back({"reshape", {2, 3}, [](Tape&, const Var& x, auto&) { return reshape(x, {3, 2}); }});
  cases.push_back({"slice_rows", {4, 3}, [](Tape&, const Var& x, auto&) { return slice_rows(x, 1, 2); }});
  cases.push_back({"slice_cols", {3, 4}, [](Tape&, const Var& x, auto&) { return slice_cols(x, 1, 2); }});
  cases.push_back({"concat_rows", {2, 3}, [=](Tape& t, const Var& x, auto& r) {
                     const std::vector<Var> parts = {x, t.constant(aux(r, {1, 3})), x};
                     return concat_rows(parts);
                   }});
  cases.push_back({"concat_cols", {2, 3}, [=](Tape& t, const Var& x, auto& r) {
                     const std::vector<Var> parts = {t.constant(aux(r, {2, 2})), x};
                     return concat_cols(parts);
                   }});
  cases.push_back({"sum", {3, 2}, [](Tape&, const Var& x, auto&) { return scale(sum(x), 1.3); }});
  cases.push_back({"mean", {3, 2}, [](Tape&, const Var& x, auto&) { return scale(mean(x), 1.3); }});
  cases.push_back({"conv2d_image", {2, 5, 5}, [=](Tape& t, const Var& x, auto& r) {
                     return conv2d(x, t.constant(aux(r, {3, 3})));
                   }});
  cases.push_back({"conv2d_kernel", {3, 3}, [=](Tape& t, const Var& k, auto& r) {
                     return conv2d(t.constant(aux(r, {1, 4, 5})), k);
                   }});
  cases.push_back({"grid_sample", {1, 5, 5}, [](Tape&, const Var& x, auto& r) {
                     Tensor grid = random_tensor({4, 4, 2}, r, -0.7, 4.7);
                     return grid_sample(x, grid);
                   }});
  cases.push_back({"dft2_complex_abs", {4, 6}, [](Tape&, const Var& x, auto&) {
                     const auto [re, im] = dft2(x);
                     return complex_abs(re, im);
                   }});
  cases.push_back({"dft2_parts", {3, 5}, [](Tape&, const Var& x, auto&) {
                     const auto [re, im] = dft2(x);
                     const std::vector<Var> parts = {re, im};
                     return concat_cols(parts);
                   }});
  cases.push_back({"cross_entropy", {3, 5}, [](Tape&, const Var& x, auto&) {
                     const std::vector<int> targets = {4, -1, 0};
                     return cross_entropy(x, targets);
                   }});
  cases.push_back({"squared_norm", {4}, [](Tape&, const Var& x, auto&) { return squared_norm(x); }});
  return cases;
}

/// Every primitive over seeds 1..5.
inline std::vector<GradResult> primitive_grad_errors() {
  std::vector<GradResult> out;
  for (const auto& c : op_cases()) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      std::mt19937_64 rng(seed * 101);
      const Tensor point = random_tensor(c.input, rng);
      const std::uint64_t aux_seed = seed * 977;
      auto f = [&](Tape& tape, const Var& x) {
        std::mt19937_64 r(aux_seed);
        const Var v = c.build(tape, x, r);
        return v.value().rank() == 0 || v.value().size() == 1 ? sum(v) : weigh(tape, v, aux_seed + 1);
      };
      out.push_back({c.name, seed, grad_check(f, point, 1e-6)});
    }
  }
  return out;
}

/// L_out, L_fuse (last token and full matrix), L_freq and the full augmented
/// objective over seeds 1..5, on random tiny models.
inline std::vector<GradResult> loss_grad_errors() {
  std::vector<GradResult> out;
  const TokenSequence prompt = {1, 2}, keywords = {4, 5};
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ToyVLM m = random_tiny_model(seed);
    const Tensor img = tiny_image(seed + 10);
    out.push_back({"L_out", seed,
                   grad_check([&](Tape& t, const Var& x) { return loss_out(bind(t, m, false), prompt, x, keywords); },
                              img, 1e-6)});
    const auto ref = fuse_reference(m, {3}, tiny_image(seed + 20), {1, 4, 6}, false);
    out.push_back({"L_fuse", seed, grad_check([&](Tape& t, const Var& x) {
                                     return loss_fuse(bind(t, m, false), prompt, x, {1, 4, 6}, ref, false);
                                   }, img, 1e-6)});
    const auto ref_full = fuse_reference(m, {3, 1}, tiny_image(seed + 20), {2}, true);
    out.push_back({"L_fuse(full)", seed, grad_check([&](Tape& t, const Var& x) {
                                           return loss_fuse(bind(t, m, false), prompt, x, {2}, ref_full, true);
                                         }, img, 1e-6)});
    std::mt19937_64 rng(seed);
    out.push_back({"L_freq", seed,
                   grad_check([](Tape&, const Var& d) { return loss_freq(d, 0.25); }, random_tensor({1, 8, 8}, rng), 1e-6)});

    AttackSpec s;
    s.benign_prompt = prompt;
    s.image = tiny_image(seed);
    s.target_prompt = {3};
    s.target_image = s.image;
    s.target_keywords = {5};
    s.layers = {3, 4};
    s.alpha = 0.3;
    s.beta = 0.7;
    s.seed = seed;
    const BudgetMask mask = build_budget_mask(random_tensor({8, 8}, rng, 0, 1), 0.1, 0.3, 10.0);
    const auto ref_obj = fuse_reference(m, s.target_prompt, s.target_image, s.layers, false);
    const ViewDraw draw = draw_views(rng, s.augment, s.image.shape());
    const Tensor delta = random_tensor({1, 8, 8}, rng, -0.5, 0.5);
    out.push_back({"L_attack", seed, grad_check([&](Tape& t, const Var& d) {
                                       return attack_objective(bind(t, m, false), s, mask, ref_obj, d, draw).total;
                                     }, delta, 1e-6)});
  }
  return out;
}

}  // namespace crossmpi::testing
