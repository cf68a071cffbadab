#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crossmpi/config.hpp"

namespace crossmpi {

/// The source model is built from config.model / config.train; the target
/// model from the same settings with the target seeds.
enum class ModelRole { kSource, kTarget };

ToyVLM train_pipeline_model(const Config& config, ModelRole role, TrainReport* report = nullptr);

struct QaAccuracy {
  double shape = 0, color = 0, describe = 0;
  double overall = 0;  // exact answers over all questions
  int images = 0;
};

/// Exact-answer accuracy of greedy decoding on held-out unmarked images (stream 2).
QaAccuracy qa_accuracy(const ToyVLM& model, const CorpusSpec& corpus, int per_class);
nlohmann::json to_json(const QaAccuracy& acc);

struct ProbeOutcome {
  ProbeReport report;  // window and band filled in
  double window_score = 0, first_score = 0, last_score = 0;
};

ProbeOutcome run_probe_stage(const ToyVLM& model, const Config& config);
nlohmann::json to_json(const ProbeOutcome& outcome);

/// Early, probed-middle and final groups of `window` consecutive LM layers.
struct LayerGroups {
  std::vector<int> early, middle, final;
};
LayerGroups layer_groups(int n_layers, const std::vector<int>& middle);

/// config.attack.layers when set, else the probed window.
std::vector<int> attack_layers(const Config& config, const std::vector<int>& probed);

std::vector<AttackInstance> config_instances(const Config& config, const std::vector<int>& layers, int count);
CampaignSpec campaign_spec(const Config& config);

}  // namespace crossmpi
