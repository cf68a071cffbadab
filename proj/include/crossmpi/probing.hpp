#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "crossmpi/corpus.hpp"

namespace crossmpi {

struct ProbeSettings {
  int per_class = 100;  // images per class in the probe split
  int hidden = 32;
  int epochs = 200;
  double lr = 0.05;
  double momentum = 0.9;
  /// Per-feature z-scoring with training statistics; otherwise inputs pass through.
  bool standardize = false;
  std::uint64_t seed = 5;
};

/// Two-layer MLP on standardized features: d → hidden (ReLU) → classes.
class ProbeClassifier {
 public:
  ProbeClassifier() = default;
  ProbeClassifier(Tensor mean, Tensor inv_std, Tensor w1, Tensor b1, Tensor w2, Tensor b2);

  /// Class scores for each row of x [n, d].
  Tensor logits(const Tensor& x) const;
  std::vector<int> predict(const Tensor& x) const;
  double accuracy(const Tensor& x, const std::vector<int>& labels) const;

  bool frozen() const { return frozen_; }
  int num_classes() const { return static_cast<int>(w2_.dim(1)); }
  const Tensor& w1() const { return w1_; }
  const Tensor& w2() const { return w2_; }
  bool operator==(const ProbeClassifier&) const = default;

 private:
  Tensor mean_, inv_std_, w1_, b1_, w2_, b2_;
  bool frozen_ = false;
};

/// Trains one probe on rows of x with labels in [0, classes), then freezes it.
/// Throws std::invalid_argument when some class has no example.
ProbeClassifier train_probe(const Tensor& x, const std::vector<int>& labels, int classes, const ProbeSettings& settings,
                            std::uint64_t seed);

/// Last-input-token hidden state at every LM layer for each record under
/// `prompt`: result[layer] is [records, d_l].
std::vector<Tensor> last_token_states(const ToyVLM& model, const TokenSequence& prompt,
                                      const std::vector<ImageRecord>& records, const CorpusSpec& corpus);

std::vector<int> shape_labels(const std::vector<ImageRecord>& records);

/// One frozen probe per LM layer, trained on benign-prompt hidden states.
std::vector<ProbeClassifier> train_probes(const ToyVLM& model, const std::vector<ImageRecord>& train_set,
                                          const TokenSequence& benign_prompt, const CorpusSpec& corpus,
                                          const ProbeSettings& settings);

/// Half-open layer range [begin, end).
struct LayerBand {
  int begin = 0;
  int end = 0;
};

/// Middle half of n layers: [⌊n/4⌋, ⌈3n/4⌉).
LayerBand default_band(int n_layers);

struct ProbeReport {
  std::vector<std::string> prompts;               // benign first, then the 12 variants
  std::vector<VariantFamily> families;            // family of prompts[1..]
  std::vector<std::vector<double>> accuracy;      // [layer][prompt]
  std::vector<std::array<double, kNumFamilies>> drop;  // [layer][family]
  std::vector<double> score;                      // [layer]
  std::vector<int> window;                        // selected fusion layers
  LayerBand band;
};

/// Accuracies of frozen probes on the test set for the benign prompt and every
/// variant; fills drops and per-layer scores (window left empty).
ProbeReport eval_variants(const ToyVLM& model, const std::vector<ProbeClassifier>& probes,
                          const std::vector<ImageRecord>& test_set, const PromptVariantSet& variants,
                          const CorpusSpec& corpus);

/// score = mean drop of {task-semantic, irrelevant} − mean drop of {instruction, syntax}.
std::vector<double> layer_scores(const std::vector<std::array<double, kNumFamilies>>& drop);

/// Mean score over layers [start, start + window).
double window_score(const std::vector<double>& score, int start, int window);

/// Contiguous window inside `band` with the highest mean score; ties go to the
/// earliest window. Throws on an empty band or a window wider than the band.
std::vector<int> select_fusion_layers(const std::vector<double>& score, int window, LayerBand band);
std::vector<int> select_fusion_layers(const ProbeReport& report, int window, LayerBand band);

nlohmann::json to_json(const ProbeReport& report);
/// Layer × prompt accuracy matrix, header row first.
std::string accuracy_csv(const ProbeReport& report);

}  // namespace crossmpi
