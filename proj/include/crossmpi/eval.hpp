#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crossmpi/attack.hpp"
#include "crossmpi/corpus.hpp"

namespace crossmpi {

// ---- metrics ----

/// Fraction of true flags. Throws std::invalid_argument on an empty set.
double asr(const std::vector<bool>& flags);

/// Cosine of the mean-pooled rows of `table` selected by each sequence; 0 when
/// either pooled vector is zero. Throws std::invalid_argument on an empty sequence.
double semantic_similarity(const Tensor& table, const TokenSequence& a, const TokenSequence& b);
/// Same, with the LM token embeddings of `model`.
double semantic_similarity_proxy(const ToyVLM& model, const TokenSequence& a, const TokenSequence& b);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double dynamic_range = 1.0;
};

/// Mean SSIM over valid window positions (Gaussian window), averaged over
/// channels of [C,H,W] inputs. An image smaller than the window is compared
/// as one global window with uniform weights.
double ssim(const Tensor& x, const Tensor& y, const SsimOptions& options = {});
/// Contrast-structure terms at the first scales, full SSIM at the coarsest,
/// combined with the renormalized leading standard weights; 2×2 mean pooling
/// between scales. Negative terms keep their sign.
double ms_ssim(const Tensor& x, const Tensor& y, int scales = 3, const SsimOptions& options = {});

/// Share of the spectral energy of each channel that lies outside the centered
/// low-frequency window of side ⌈H·f⌉ × ⌈W·f⌉, averaged over channels. 0 for a
/// zero input.
double high_frequency_energy(const Tensor& delta, double low_fraction);

// ---- defenses ----
// Every defense maps a [C,H,W] image in [0,1] to one of the same shape in [0,1].

struct DefenseSettings {
  double resize_lo = 1.0;
  double resize_hi = 1.107;
  double max_degrees = 15.0;
  int jpeg_quality = 75;
  int vote_views = 5;
  double vote_mask_fraction = 0.2;
};

/// Random square resize into [⌈H·lo⌉, ⌈H·hi⌉], random placement on a zero
/// canvas of side ⌈H·hi⌉, bilinear resize back to H×W.
Tensor defense_randomization(const Tensor& image, std::uint64_t seed, double lo_ratio = 1.0, double hi_ratio = 1.107);
/// Rotation by an angle drawn uniformly from [−max, max] degrees, zero fill.
Tensor defense_rotation(const Tensor& image, std::uint64_t seed, double max_degrees = 15.0);
/// Blockwise 8×8 DCT quantization with the scaled standard luminance table.
Tensor defense_jpeg(const Tensor& image, int quality);
/// The quantization table used by defense_jpeg, row-major 8×8.
std::vector<int> jpeg_quant_table(int quality);

/// `views` independently masked copies (⌊frac·H·W⌉ pixel positions zeroed in
/// every channel), greedy-decoded; the most frequent response wins, ties to the
/// lowest view index.
TokenSequence defense_smooth_vote(const ToyVLM& model, const TokenSequence& prompt, const Tensor& image, int views,
                                  double mask_fraction, std::uint64_t seed, int max_new = 4);
/// The masked view used by defense_smooth_vote for view `index`.
Tensor smooth_vote_view(const Tensor& image, double mask_fraction, std::uint64_t seed, int index);

enum class Defense { kNone, kRandomization, kRotation, kJpeg, kSmoothVote };
const char* defense_name(Defense d);
/// Inverse of defense_name; throws std::invalid_argument on an unknown name.
Defense defense_from_name(const std::string& name);

/// Response of `model` to (prompt, image) behind `defense`.
TokenSequence defended_response(const ToyVLM& model, const TokenSequence& prompt, const Tensor& image, Defense defense,
                                const DefenseSettings& settings, std::uint64_t seed, int max_new = 4);

// ---- campaign ----

/// One attack: the AttackSpec plus the caption pair used for the saliency map.
struct AttackInstance {
  std::string id;
  ImageRecord record;
  AttackSpec spec;
  TokenSequence saliency_prompt;
  TokenSequence saliency_answer;
};

/// The standard instance set: the first `count` held-out images of stream 3,
/// shape question as the benign task, the color question about the
/// same image as the target pair and its color word as y_t.
std::vector<AttackInstance> standard_instances(const CorpusSpec& corpus, int count, const std::vector<int>& layers,
                                               const AttackSpec& base);

struct NamedModel {
  std::string id;
  const ToyVLM* model = nullptr;
};

struct CampaignSpec {
  MaskSettings mask;
  /// Budget from the source model's saliency; otherwise the uniform mask.
  bool saliency_mask = true;
  std::vector<Defense> defenses;  // evaluated in addition to kNone
  DefenseSettings defense_settings;
  std::uint64_t defense_seed = 17;
};

struct CampaignRow {
  std::size_t instance = 0;
  std::string target;
  Defense defense = Defense::kNone;
  bool success = false;
  double ss = 0;
  TokenSequence response;
};

struct InstanceOutcome {
  std::string id;
  bool source_success = false;
  int steps_used = 0;
  double ssim = 0, ms_ssim = 0, high_freq = 0;
  double l_freq = 0;
  std::string error;  // nonempty when the attack failed to run
  Tensor perturbed;
  Tensor effective;
};

struct CellSummary {
  std::string target;
  Defense defense = Defense::kNone;
  double asr = 0;
  double ss = 0;
  double clean_rate = 0;  // clean image, same defense
  std::size_t count = 0;
};

struct CampaignReport {
  std::string source;
  std::vector<std::string> targets;
  std::vector<InstanceOutcome> instances;
  std::vector<CampaignRow> rows;  // instance × target × defense
  std::vector<CellSummary> cells;
  double mean_ssim = 0, mean_ms_ssim = 0, mean_high_freq = 0;
  nlohmann::json config;
};

/// Optimizes every instance on `source`, then judges each perturbed image on
/// every target with and without each defense. A failing instance is
/// recorded with its error and counts as unsuccessful.
CampaignReport run_campaign(const NamedModel& source, const std::vector<NamedModel>& targets,
                            const std::vector<AttackInstance>& dataset, const CampaignSpec& spec);

/// First phase of run_campaign: optimize every instance on `source`.
std::vector<InstanceOutcome> optimize_instances(const ToyVLM& source, const std::vector<AttackInstance>& dataset,
                                               const CampaignSpec& spec);
/// Second phase: judge optimized images on every target; outcomes[i] belongs to dataset[i].
CampaignReport evaluate_campaign(const std::string& source_id, const std::vector<NamedModel>& targets,
                                 const std::vector<AttackInstance>& dataset, std::vector<InstanceOutcome> outcomes,
                                 const CampaignSpec& spec);

/// Lossless (full double precision) serialization of optimized images.
nlohmann::json outcomes_to_json(const std::vector<InstanceOutcome>& outcomes);
std::vector<InstanceOutcome> outcomes_from_json(const nlohmann::json& j);

const CellSummary& find_cell(const CampaignReport& report, const std::string& target, Defense defense);

nlohmann::json to_json(const CampaignReport& report);
/// One line per instance × target × defense.
std::string campaign_csv(const CampaignReport& report);
/// source,target,defense,asr,ss,clean_rate — the cross-model matrix.
std::string matrix_csv(const CampaignReport& report);

}  // namespace crossmpi
