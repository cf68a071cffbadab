#include "crossmpi/pipeline.hpp"

#include <stdexcept>

#include "crossmpi/parallel.hpp"

namespace crossmpi {

ToyVLM train_pipeline_model(const Config& config, ModelRole role, TrainReport* report) {
  ModelConfig mc = config.model;
  TrainOptions opts = config.train;
  if (role == ModelRole::kTarget) {
    mc.seed = config.target_model_seed;
    opts.seed = config.target_train_seed;
  }
  ToyVLM model = init_model(mc);
  const auto records = gen_training_records(config.corpus);
  const auto samples = to_training_samples(gen_qa(config.corpus, records), config.corpus);
  TrainReport r = train(model, samples, opts);
  if (report) *report = std::move(r);
  return model;
}

QaAccuracy qa_accuracy(const ToyVLM& model, const CorpusSpec& corpus, int per_class) {
  const auto records = gen_records(corpus, per_class, 2);
  constexpr Task kTasks[] = {Task::kShape, Task::kColor, Task::kDescribe};
  std::vector<std::array<char, 3>> ok(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    const Tensor image = gen_image(records[i], corpus.image_size, corpus.channels).image;
    for (int t = 0; t < 3; ++t) {
      const TokenSequence answer = task_answer(kTasks[t], records[i]);
      // One extra token so an answer that fails to stop counts as wrong.
      ok[i][t] = greedy_decode(model, task_prompt(kTasks[t]), image, static_cast<int>(answer.size()) + 1) == answer;
    }
  });
  QaAccuracy acc;
  acc.images = static_cast<int>(records.size());
  if (records.empty()) throw std::invalid_argument("qa_accuracy: per_class must be >= 1");
  double sum[3] = {0, 0, 0};
  for (const auto& row : ok)
    for (int t = 0; t < 3; ++t) sum[t] += row[t];
  const double n = static_cast<double>(records.size());
  acc.shape = sum[0] / n;
  acc.color = sum[1] / n;
  acc.describe = sum[2] / n;
  acc.overall = (sum[0] + sum[1] + sum[2]) / (3 * n);
  return acc;
}

nlohmann::json to_json(const QaAccuracy& a) {
  return {{"shape", a.shape}, {"color", a.color}, {"describe", a.describe}, {"overall", a.overall}, {"images", a.images}};
}

ProbeOutcome run_probe_stage(const ToyVLM& model, const Config& config) {
  const ProbeSettings& ps = config.probe.settings;
  const auto split = gen_probe_split(config.corpus, ps.per_class);
  const auto prompts = variant_prompts();
  const auto probes = train_probes(model, split.train, prompts.benign, config.corpus, ps);
  ProbeOutcome out;
  out.report = eval_variants(model, probes, split.test, prompts, config.corpus);
  const int n = model.config().n_lm_layers;
  const int w = config.probe.window;
  ProbeReport& r = out.report;
  r.band = config.probe.band.end > config.probe.band.begin ? config.probe.band : default_band(n);
  r.window = select_fusion_layers(r, w, r.band);
  out.window_score = window_score(r.score, r.window.front(), w);
  out.first_score = window_score(out.report.score, 0, w);
  out.last_score = window_score(out.report.score, n - w, w);
  return out;
}

nlohmann::json to_json(const ProbeOutcome& o) {
  return {{"report", to_json(o.report)},
          {"window_score", o.window_score},
          {"first_window_score", o.first_score},
          {"last_window_score", o.last_score}};
}

LayerGroups layer_groups(int n_layers, const std::vector<int>& middle) {
  const int w = static_cast<int>(middle.size());
  if (w < 1 || w > n_layers) throw std::invalid_argument("layer_groups: window must be in [1, n_layers]");
  LayerGroups g;
  g.middle = middle;
  for (int i = 0; i < w; ++i) {
    g.early.push_back(i);
    g.final.push_back(n_layers - w + i);
  }
  return g;
}

std::vector<int> attack_layers(const Config& config, const std::vector<int>& probed) {
  return config.attack.layers.empty() ? probed : config.attack.layers;
}

std::vector<AttackInstance> config_instances(const Config& config, const std::vector<int>& layers, int count) {
  return standard_instances(config.corpus, count, layers, config.attack.base);
}

CampaignSpec campaign_spec(const Config& config) {
  CampaignSpec s;
  s.mask = config.mask;
  s.defenses = config.defense.defenses;
  s.defense_settings = config.defense.settings;
  s.defense_seed = config.defense.seed;
  return s;
}

}  // namespace crossmpi
