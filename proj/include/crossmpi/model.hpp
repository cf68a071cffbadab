#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "crossmpi/autodiff.hpp"

namespace crossmpi {

using TokenSequence = std::vector<int>;

struct ModelConfig {
  int image_size = 32;
  int channels = 1;
  int patch_size = 4;
  int d_v = 48;
  int d_l = 64;
  int n_vision_layers = 2;
  int n_lm_layers = 12;
  int n_heads = 4;
  int vocab_size = 64;
  int max_seq_len = 96;
  int mlp_ratio = 2;
  std::uint64_t seed = 2;

  int visual_tokens() const { return (image_size / patch_size) * (image_size / patch_size); }
  int end_token() const { return vocab_size - 1; }
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Patch-encoder + projector + causal transformer LM. Parameters are held in a
/// fixed, documented order (see parameter_names()).
class ToyVLM {
 public:
  ToyVLM() = default;
  explicit ToyVLM(ModelConfig config);  // zero parameters of the right shapes

  const ModelConfig& config() const { return config_; }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  std::size_t index_of(const std::string& name) const;
  std::size_t parameter_count() const;

  bool operator==(const ToyVLM& other) const { return config_ == other.config_ && params_ == other.params_; }

 private:
  ModelConfig config_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Deterministic init from config.seed: uniform weights scaled by fan-in,
/// layer-norm gains 1 and all biases 0.
ToyVLM init_model(const ModelConfig& config);

/// Parameter Vars of one model on one tape.
struct BoundModel {
  const ToyVLM* model = nullptr;
  std::vector<Var> vars;
  const Var& operator[](const std::string& name) const { return vars[model->index_of(name)]; }
};

BoundModel bind(Tape& tape, const ToyVLM& model, bool track);

struct ForwardOutput {
  Var logits;                // rows [logits_from, T) of the joint sequence
  std::vector<Var> hidden;   // residual stream after each LM block, [T, d_l]
  std::size_t visual_tokens = 0;
  std::size_t seq_len = 0;
  std::size_t logits_from = 0;
};

/// Joint sequence [visual tokens; text tokens] through the LM. `logits_from`
/// restricts the LM head to trailing rows (hidden states are unaffected).
ForwardOutput forward(const BoundModel& bound, const Var& image, std::span<const int> tokens,
                      std::size_t logits_from = 0);

struct ForwardResult {
  Tensor logits;               // [T_v + T_p, |V|]
  std::vector<Tensor> hidden;  // one [T, d_l] per LM layer
  Tensor hidden_last(std::size_t layer) const;
};

ForwardResult forward(const ToyVLM& model, std::span<const int> prompt, const Tensor& image);

/// Teacher-forced −Σ log P(answer_i | answer_<i, prompt, image) on `tape`.
Var nll_loss(const BoundModel& bound, std::span<const int> prompt, const Var& image, std::span<const int> answer);
double nll_loss(const ToyVLM& model, std::span<const int> prompt, const Tensor& image, std::span<const int> answer);

/// Argmax decoding (ties → lowest id). Stops after emitting the end token
/// (included in the output) or after max_new tokens.
TokenSequence greedy_decode(const ToyVLM& model, std::span<const int> prompt, const Tensor& image, int max_new);

struct QaSegment {
  TokenSequence prompt;
  TokenSequence answer;
};

/// Summed teacher-forced NLL of several (prompt, answer) pairs about one image,
/// computed in a single packed sequence. Each segment attends to the visual
/// prefix and to itself, so the result equals the sum of per-pair nll_loss.
Var packed_nll_loss(const BoundModel& bound, const Var& image, std::span<const QaSegment> segments);

struct TrainingSample {
  TokenSequence prompt;
  Tensor image;
  TokenSequence answer;
};

enum class Optimizer { kMomentum, kAdam };

struct TrainOptions {
  Optimizer optimizer = Optimizer::kAdam;
  int epochs = 7;
  double lr = 1e-3;
  /// Heavy-ball coefficient, or Adam's first-moment decay.
  double momentum = 0.9;
  double beta2 = 0.999;
  int batch_size = 4;
  double clip_norm = 1.0;
  std::uint64_t seed = 9;
  /// Cosine decay of the learning rate to this fraction of `lr`.
  double final_lr_fraction = 0.05;
  /// Linear warmup over this fraction of all steps.
  double warmup_fraction = 0.05;
  std::function<void(int epoch, double mean_loss)> on_epoch;
};

struct TrainReport {
  std::vector<double> loss_curve;  // mean per-sample NLL per epoch
};

/// Consecutive samples with identical images are packed (see packed_nll_loss);
/// batch_size counts packs.
/// Mini-batch gradient descent on the mean per-sample NLL, with heavy-ball
/// momentum or Adam (bias-corrected first and second moments).
/// Throws Error(kNumeric) naming the batch index on a non-finite loss.
TrainReport train(ToyVLM& model, std::span<const TrainingSample> dataset, const TrainOptions& options);

// Checkpoint: "CMPI", u32 version, config block, then every parameter as
// little-endian float64 in names() order. A JSON sidecar duplicates the config.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const ToyVLM& model, const std::filesystem::path& path);
ToyVLM load_checkpoint(const std::filesystem::path& path);

}  // namespace crossmpi
