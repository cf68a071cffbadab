#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crossmpi/model.hpp"

namespace crossmpi {

enum class SaliencySource { kGradient, kExternal };

struct SaliencyMap {
  Tensor scores;  // [H,W], finite and non-negative
  SaliencySource source = SaliencySource::kExternal;
};

/// |∂ log P(caption | prompt, image) / ∂ pixel|, maximum over channels.
/// Throws std::domain_error on a non-finite gradient.
SaliencyMap compute_saliency(const ToyVLM& model, const Tensor& image, const TokenSequence& prompt,
                             const TokenSequence& caption);

struct MaskSettings {
  double epsilon = 16.0 / 255.0;
  double lambda = 0.3;
  double k_percent = 5.0;
};

struct BudgetMask {
  Tensor r;        // normalized saliency
  std::vector<std::pair<std::size_t, std::size_t>> support;  // U, row-major order
  double centroid_row = 0, centroid_col = 0;
  Tensor d;        // normalized distance to the centroid
  Tensor w;        // weights
  double w_mean = 0;
  double epsilon = 0, lambda = 0, k_percent = 0;
  Tensor budget;   // per-pixel ε_ij, [H,W]
  bool degenerate = false;  // all-zero saliency fell back to the uniform mask
};

/// Throws std::invalid_argument on ε ≤ 0, λ ∉ [0,1], k ∉ (0,100], an empty
/// support, or (unless allow_degenerate) an all-zero saliency map. With
/// allow_degenerate, all-zero saliency yields the uniform mask ε_ij = ε.
BudgetMask build_budget_mask(const Tensor& saliency, double epsilon, double lambda, double k_percent,
                             bool allow_degenerate = false);
BudgetMask build_budget_mask(const SaliencyMap& saliency, const MaskSettings& settings, bool allow_degenerate = true);

/// The uniform mask ε_ij = ε of the given size.
BudgetMask uniform_mask(std::size_t rows, std::size_t cols, double epsilon);

nlohmann::json to_json(const BudgetMask& mask);
/// ε_ij rescaled so the largest budget maps to 255.
Tensor mask_heatmap(const BudgetMask& mask);

}  // namespace crossmpi
