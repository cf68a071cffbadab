#include "crossmpi/mask.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace crossmpi {

SaliencyMap compute_saliency(const ToyVLM& model, const Tensor& image, const TokenSequence& prompt,
                             const TokenSequence& caption) {
  Tape tape;
  const BoundModel bound = bind(tape, model, false);
  const Var x = tape.variable(image);
  const Var loss = nll_loss(bound, prompt, x, caption);
  const Gradients grads = tape.backward(loss);
  const Tensor& g = grads.of(x);
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  Tensor s({H, W}, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const double v = g(c, i, j);
        if (!std::isfinite(v)) throw std::domain_error("compute_saliency: non-finite gradient");
        s(i, j) = std::max(s(i, j), std::abs(v));
      }
  return {std::move(s), SaliencySource::kGradient};
}

BudgetMask uniform_mask(std::size_t rows, std::size_t cols, double epsilon) {
  BudgetMask m;
  m.r = Tensor({rows, cols}, 1.0);
  m.d = Tensor({rows, cols}, 0.0);
  m.w = Tensor({rows, cols}, 2.0);
  m.w_mean = 2.0;
  m.epsilon = epsilon;
  m.centroid_row = (static_cast<double>(rows) - 1) / 2;
  m.centroid_col = (static_cast<double>(cols) - 1) / 2;
  m.budget = Tensor({rows, cols}, epsilon);
  return m;
}

BudgetMask build_budget_mask(const Tensor& s, double epsilon, double lambda, double k_percent, bool allow_degenerate) {
  if (s.rank() != 2 || s.size() == 0) throw std::invalid_argument("build_budget_mask: saliency must be a non-empty [H,W] map");
  if (!(epsilon > 0)) throw std::invalid_argument("build_budget_mask: epsilon must be positive");
  if (!(lambda >= 0 && lambda <= 1)) throw std::invalid_argument("build_budget_mask: lambda must lie in [0,1]");
  if (!(k_percent > 0 && k_percent <= 100)) throw std::invalid_argument("build_budget_mask: k must lie in (0,100]");
  const std::size_t H = s.dim(0), W = s.dim(1), n = s.size();
  const auto keep = static_cast<std::size_t>(std::floor(k_percent * static_cast<double>(n) / 100.0 + 1e-9));
  if (keep == 0) throw std::invalid_argument("build_budget_mask: k selects no pixels");

  double smax = 0;
  for (double v : s.data()) {
    if (!std::isfinite(v) || v < 0) throw std::invalid_argument("build_budget_mask: saliency must be finite and non-negative");
    smax = std::max(smax, v);
  }
  if (smax == 0) {
    if (!allow_degenerate) throw std::invalid_argument("build_budget_mask: all-zero saliency");
    BudgetMask m = uniform_mask(H, W, epsilon);
    m.lambda = lambda;
    m.k_percent = k_percent;
    m.degenerate = true;
    return m;
  }

  BudgetMask m;
  m.epsilon = epsilon;
  m.lambda = lambda;
  m.k_percent = k_percent;
  m.r = Tensor({H, W}, 0.0);
  for (std::size_t i = 0; i < n; ++i) m.r[i] = s[i] / smax;

  std::vector<double> sorted(m.r.data().begin(), m.r.data().end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(keep - 1), sorted.end(), std::greater<>());
  const double cutoff = sorted[keep - 1];
  double mass = 0, cy = 0, cx = 0;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const double r = m.r(i, j);
      if (r < cutoff) continue;
      m.support.emplace_back(i, j);
      mass += r;
      cy += r * static_cast<double>(i);
      cx += r * static_cast<double>(j);
    }
  m.centroid_row = cy / mass;
  m.centroid_col = cx / mass;

  m.d = Tensor({H, W}, 0.0);
  double vmax = 0;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      m.d(i, j) = std::hypot(static_cast<double>(i) - m.centroid_row, static_cast<double>(j) - m.centroid_col);
      vmax = std::max(vmax, m.d(i, j));
    }
  if (vmax > 0)
    for (auto& v : m.d.storage()) v /= vmax;

  m.w = Tensor({H, W}, 0.0);
  double wsum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    m.w[i] = 1 + m.r[i] - (1 - m.r[i]) * m.d[i];
    wsum += m.w[i];
  }
  m.w_mean = wsum / static_cast<double>(n);
  m.budget = Tensor({H, W}, 0.0);
  for (std::size_t i = 0; i < n; ++i) m.budget[i] = epsilon * (1 - lambda + lambda * m.w[i] / m.w_mean);
  return m;
}

BudgetMask build_budget_mask(const SaliencyMap& saliency, const MaskSettings& settings, bool allow_degenerate) {
  return build_budget_mask(saliency.scores, settings.epsilon, settings.lambda, settings.k_percent, allow_degenerate);
}

nlohmann::json to_json(const BudgetMask& m) {
  return {{"centroid", {m.centroid_row, m.centroid_col}},
          {"w_mean", m.w_mean},
          {"epsilon", m.epsilon},
          {"lambda", m.lambda},
          {"k_percent", m.k_percent},
          {"support_size", m.support.size()},
          {"degenerate", m.degenerate}};
}

Tensor mask_heatmap(const BudgetMask& m) {
  const std::size_t H = m.budget.dim(0), W = m.budget.dim(1);
  const double top = *std::max_element(m.budget.data().begin(), m.budget.data().end());
  Tensor out({1, H, W}, 0.0);
  for (std::size_t i = 0; i < H * W; ++i) out[i] = top > 0 ? m.budget[i] / top : 0.0;
  return out;
}

}  // namespace crossmpi
