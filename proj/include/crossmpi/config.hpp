#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crossmpi/eval.hpp"
#include "crossmpi/probing.hpp"

namespace crossmpi {

struct ProbeConfig {
  ProbeSettings settings;
  int window = 3;
  /// Search band; end ≤ begin means the default middle half.
  LayerBand band{0, 0};
};

struct AttackConfig {
  AttackSpec base;  // loss weights, steps, augmentation, seed; images and prompts come from instances
  int instances = 20;
  /// Fusion layers; empty means the window selected by probing.
  std::vector<int> layers;
};

struct DefenseConfig {
  DefenseSettings settings;
  std::vector<Defense> defenses = {Defense::kRandomization, Defense::kRotation, Defense::kJpeg, Defense::kSmoothVote};
  std::uint64_t seed = 17;
};

struct AblationConfig {
  std::vector<double> lambda = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<double> epsilon = {8.0 / 255, 12.0 / 255, 16.0 / 255, 20.0 / 255, 24.0 / 255};
  std::vector<int> layer_count = {1, 2, 3, 4, 5};
  /// Attack instances per grid point.
  int instances = 10;
};

/// Every tunable of the pipeline. Unknown keys are rejected when parsing.
struct Config {
  ModelConfig model;
  CorpusSpec corpus;
  TrainOptions train;
  ProbeConfig probe;
  MaskSettings mask;
  AttackConfig attack;
  DefenseConfig defense;
  AblationConfig ablation;
  /// Second independently seeded model for transfer: model seed and training seed.
  std::uint64_t target_model_seed = 1;
  std::uint64_t target_train_seed = 8;
  /// Held-out images per class for the QA accuracy check.
  int eval_per_class = 50;
  std::string output_dir = "out";
};

/// Strict parse: unknown keys, wrong types and invalid values throw
/// Error(kMalformedConfig) naming the offending key. Missing keys keep defaults.
Config config_from_json(const nlohmann::json& j);
Config load_config(const std::filesystem::path& path);
/// Full config including defaults; round-trips through config_from_json.
nlohmann::json to_json(const Config& c);

/// Applies a global seed: model, corpus-independent training and attack seeds
/// move together (model.seed = s, train.seed = s + 7, attack seed = 100·s).
void apply_seed(Config& c, std::uint64_t seed);

}  // namespace crossmpi
