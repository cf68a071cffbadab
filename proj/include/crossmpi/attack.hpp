#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "crossmpi/mask.hpp"
#include "crossmpi/model.hpp"

namespace crossmpi {

struct AugmentSettings {
  bool enabled = true;  // false: identity view only
  double scale_lo = 0.9, scale_hi = 1.1;
  double max_degrees = 10.0;
  double brightness_lo = 0.8, brightness_hi = 1.2;
  double blur_sigma_lo = 0.5, blur_sigma_hi = 1.5;
  double noise_std = 2.0 / 255.0;
};

/// One step's random draws, shared by the image and perturbation branches.
struct ViewDraw {
  double scale = 1.0;
  double degrees = 0.0;
  double brightness = 1.0;
  double blur_sigma = 1.0;
  Tensor noise;  // [C,H,W]
};

inline constexpr int kNumViews = 6;

ViewDraw draw_views(std::mt19937_64& rng, const AugmentSettings& settings, const Shape& image_shape);

/// View k ∈ [0,6): identity, scale, rotate, brightness, blur, additive noise.
Var apply_view(int k, const Var& x, const ViewDraw& draw);

/// The six views of x_v' and of Δ under one draw.
struct AugmentedViews {
  std::vector<Var> images;
  std::vector<Var> deltas;
};
AugmentedViews augment_views(const Var& image, const Var& delta, const ViewDraw& draw, int views = kNumViews);

struct AttackSpec {
  TokenSequence benign_prompt;
  Tensor image;  // x_v, [C,H,W]
  TokenSequence target_prompt;
  Tensor target_image;
  TokenSequence target_keywords;  // y_t
  std::vector<int> layers;        // L_sel, 0-based LM layer ids
  /// Keeps α·L_fuse the same order as L_out at step 0 on the default model.
  double alpha = 0.005;
  double beta = 1.0;
  int steps = 500;
  double step_size = 0.05;  // sign step on δ, whose range is [−1,1]
  AugmentSettings augment;
  double low_freq_fraction = 0.25;
  /// Distance between full hidden matrices instead of last-token vectors.
  bool fuse_full_matrix = false;
  /// Early stop once successful and L_attack has not improved for this many steps.
  int stall_patience = 10;
  /// When set, stop as soon as the mean L_out falls to this value instead of on success.
  std::optional<double> l_out_threshold;
  int decode_tokens = 4;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument when an invariant fails.
  void validate(const ModelConfig& config) const;
};

struct TraceRow {
  int step = 0;
  double l_out = 0, l_fuse = 0, l_freq = 0, l_attack = 0;
  bool success = false;
};

struct AttackResult {
  Tensor perturbed;  // x_v' in [0,1]
  Tensor delta;      // raw δ in [−1,1]
  Tensor effective;  // Δ_v = M⊙δ
  std::vector<TraceRow> trace;
  bool success = false;
  int steps_used = 0;
  bool operator==(const AttackResult& o) const {
    return perturbed == o.perturbed && delta == o.delta && success == o.success && steps_used == o.steps_used &&
           trace.size() == o.trace.size();
  }
};

/// −Σ log P(y_t | prompt, image), teacher-forced over the keywords.
Var loss_out(const BoundModel& bound, const TokenSequence& prompt, const Var& image, const TokenSequence& keywords);

/// Reference hidden states for L_fuse: per selected layer, the last-token vector
/// (or the full matrix) of the target pair.
std::vector<Tensor> fuse_reference(const ToyVLM& model, const TokenSequence& target_prompt, const Tensor& target_image,
                                   const std::vector<int>& layers, bool full_matrix);
/// Σ_l ‖h^(l)(prompt, image) − reference_l‖²; the reference is constant.
Var loss_fuse(const BoundModel& bound, const TokenSequence& prompt, const Var& image, const std::vector<int>& layers,
              const std::vector<Tensor>& reference, bool full_matrix);
/// Same, on an existing forward pass whose first `input_len` rows are the
/// visual tokens and the prompt (later rows, if any, are ignored).
Var loss_fuse(const ForwardOutput& out, std::size_t input_len, const std::vector<int>& layers,
              const std::vector<Tensor>& reference, bool full_matrix);

/// Mean magnitude of the 2D spectrum outside the centered low-frequency window
/// of side ⌈H·f⌉ × ⌈W·f⌉, averaged over channels. delta is [C,H,W].
Var loss_freq(const Var& delta, double low_fraction);
double loss_freq(const Tensor& delta, double low_fraction);

struct AttackTerms {
  Var out, fuse, freq, total;
};

/// L_attack for the perturbation variable δ under one draw (mean over views).
AttackTerms attack_objective(const BoundModel& bound, const AttackSpec& spec, const BudgetMask& mask,
                             const std::vector<Tensor>& reference, const Var& delta, const ViewDraw& draw);

/// Clamp δ to [−1,1], then shrink entries so x + M⊙δ stays in [0,1].
void project(Tensor& delta, const Tensor& image, const Tensor& budget);

bool contains_subsequence(const TokenSequence& haystack, const TokenSequence& needle);
bool judge_success(const ToyVLM& model, const TokenSequence& prompt, const Tensor& image,
                   const TokenSequence& keywords, int max_new = 4);

AttackResult run_attack(const ToyVLM& model, const AttackSpec& spec, const BudgetMask& mask);

nlohmann::json to_json(const AttackSpec& spec);
AttackSpec attack_spec_from_json(const nlohmann::json& j);
std::string trace_csv(const AttackResult& result);

}  // namespace crossmpi
