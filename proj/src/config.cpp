#include "crossmpi/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "crossmpi/errors.hpp"

namespace crossmpi {

namespace {

using nlohmann::json;

[[noreturn]] void malformed(const std::string& what) { throw Error(ErrorCode::kMalformedConfig, "config: " + what); }

/// Reads keys of one object section, remembering which were consumed so any
/// leftover key can be rejected.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) malformed(path_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      malformed(path_ + "." + key + ": " + e.what());
    }
  }

  /// Marks `key` as known and reports whether it is present.
  bool take(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  Section sub(const char* key) {
    seen_.insert(key);
    static const json kEmpty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : kEmpty, path_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) malformed("unknown key " + path_ + "." + it.key());
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void get_pair(Section& s, const char* key, double& lo, double& hi) {
  std::vector<double> v = {lo, hi};
  s.get(key, v);
  if (v.size() != 2) malformed(std::string(key) + " must be a [lo, hi] pair");
  lo = v[0];
  hi = v[1];
}

const char* task_name(Task t) {
  switch (t) {
    case Task::kShape: return "shape";
    case Task::kColor: return "color";
    case Task::kDescribe: return "describe";
  }
  return "?";
}

Task task_from_name(const std::string& s) {
  for (Task t : {Task::kShape, Task::kColor, Task::kDescribe})
    if (s == task_name(t)) return t;
  malformed("unknown task '" + s + "'");
}

}  // namespace

Config config_from_json(const json& j) {
  Config c;
  Section root(j, "$");

  Section m = root.sub("model");
  m.get("image_size", c.model.image_size);
  m.get("channels", c.model.channels);
  m.get("patch_size", c.model.patch_size);
  m.get("d_v", c.model.d_v);
  m.get("d_l", c.model.d_l);
  m.get("n_vision_layers", c.model.n_vision_layers);
  m.get("n_lm_layers", c.model.n_lm_layers);
  m.get("n_heads", c.model.n_heads);
  m.get("vocab_size", c.model.vocab_size);
  m.get("max_seq_len", c.model.max_seq_len);
  m.get("mlp_ratio", c.model.mlp_ratio);
  m.get("seed", c.model.seed);
  m.finish();

  Section co = root.sub("corpus");
  co.get("images_per_class", c.corpus.images_per_class);
  co.get("max_jitter", c.corpus.max_jitter);
  co.get("min_scale", c.corpus.min_scale);
  co.get("max_scale", c.corpus.max_scale);
  co.get("max_noise", c.corpus.max_noise);
  co.get("seed", c.corpus.seed);
  co.get("paraphrases", c.corpus.paraphrases);
  co.get("instruction_fraction", c.corpus.instruction_fraction);
  co.get("min_mark_intensity", c.corpus.min_mark_intensity);
  co.get("max_mark_intensity", c.corpus.max_mark_intensity);
  if (co.take("tasks")) {
    std::vector<std::string> names;
    co.get("tasks", names);
    c.corpus.tasks.clear();
    for (const auto& n : names) c.corpus.tasks.push_back(task_from_name(n));
  }
  co.finish();
  c.corpus.image_size = c.model.image_size;
  c.corpus.channels = c.model.channels;

  Section t = root.sub("train");
  std::string optimizer = c.train.optimizer == Optimizer::kAdam ? "adam" : "momentum";
  t.get("optimizer", optimizer);
  if (optimizer == "adam") c.train.optimizer = Optimizer::kAdam;
  else if (optimizer == "momentum") c.train.optimizer = Optimizer::kMomentum;
  else malformed("train.optimizer must be \"adam\" or \"momentum\"");
  t.get("epochs", c.train.epochs);
  t.get("lr", c.train.lr);
  t.get("momentum", c.train.momentum);
  t.get("beta2", c.train.beta2);
  t.get("batch_size", c.train.batch_size);
  t.get("clip_norm", c.train.clip_norm);
  t.get("seed", c.train.seed);
  t.get("final_lr_fraction", c.train.final_lr_fraction);
  t.get("warmup_fraction", c.train.warmup_fraction);
  t.finish();

  Section p = root.sub("probe");
  p.get("per_class", c.probe.settings.per_class);
  p.get("hidden", c.probe.settings.hidden);
  p.get("epochs", c.probe.settings.epochs);
  p.get("lr", c.probe.settings.lr);
  p.get("momentum", c.probe.settings.momentum);
  p.get("standardize", c.probe.settings.standardize);
  p.get("seed", c.probe.settings.seed);
  p.get("window", c.probe.window);
  std::vector<int> band = {c.probe.band.begin, c.probe.band.end};
  p.get("band", band);
  if (band.size() != 2) malformed("probe.band must be [begin, end]");
  c.probe.band = {band[0], band[1]};
  p.finish();

  Section mk = root.sub("mask");
  mk.get("epsilon", c.mask.epsilon);
  mk.get("lambda", c.mask.lambda);
  mk.get("k_percent", c.mask.k_percent);
  mk.finish();

  Section a = root.sub("attack");
  AttackSpec& b = c.attack.base;
  a.get("alpha", b.alpha);
  a.get("beta", b.beta);
  a.get("steps", b.steps);
  a.get("step_size", b.step_size);
  a.get("low_freq_fraction", b.low_freq_fraction);
  a.get("fuse_full_matrix", b.fuse_full_matrix);
  a.get("stall_patience", b.stall_patience);
  a.get("decode_tokens", b.decode_tokens);
  a.get("seed", b.seed);
  a.get("instances", c.attack.instances);
  a.get("layers", c.attack.layers);
  if (a.take("l_out_threshold") && !j.at("attack").at("l_out_threshold").is_null()) {
    double v = 0;
    a.get("l_out_threshold", v);
    b.l_out_threshold = v;
  }
  Section au = a.sub("augment");
  au.get("enabled", b.augment.enabled);
  get_pair(au, "scale", b.augment.scale_lo, b.augment.scale_hi);
  au.get("max_degrees", b.augment.max_degrees);
  get_pair(au, "brightness", b.augment.brightness_lo, b.augment.brightness_hi);
  get_pair(au, "blur_sigma", b.augment.blur_sigma_lo, b.augment.blur_sigma_hi);
  au.get("noise_std", b.augment.noise_std);
  au.finish();
  a.finish();

  Section d = root.sub("defense");
  DefenseSettings& ds = c.defense.settings;
  d.get("resize_lo", ds.resize_lo);
  d.get("resize_hi", ds.resize_hi);
  d.get("max_degrees", ds.max_degrees);
  d.get("jpeg_quality", ds.jpeg_quality);
  d.get("vote_views", ds.vote_views);
  d.get("vote_mask_fraction", ds.vote_mask_fraction);
  d.get("seed", c.defense.seed);
  if (d.take("defenses")) {
    std::vector<std::string> names;
    d.get("defenses", names);
    c.defense.defenses.clear();
    try {
      for (const auto& n : names) c.defense.defenses.push_back(defense_from_name(n));
    } catch (const std::invalid_argument& e) {
      malformed(std::string("defense.defenses: ") + e.what());
    }
  }
  d.finish();

  Section ab = root.sub("ablation");
  ab.get("lambda", c.ablation.lambda);
  ab.get("epsilon", c.ablation.epsilon);
  ab.get("layer_count", c.ablation.layer_count);
  ab.get("instances", c.ablation.instances);
  ab.finish();

  root.get("target_model_seed", c.target_model_seed);
  root.get("target_train_seed", c.target_train_seed);
  root.get("eval_per_class", c.eval_per_class);
  root.get("output_dir", c.output_dir);
  root.finish();

  // Value checks that do not need a model.
  try {
    c.model.validate();
  } catch (const std::invalid_argument& e) {
    malformed(e.what());
  }
  if (c.corpus.images_per_class < 1) malformed("corpus.images_per_class must be >= 1");
  if (c.corpus.instruction_fraction < 0 || c.corpus.instruction_fraction > 1)
    malformed("corpus.instruction_fraction must be in [0,1]");
  if (c.train.epochs < 0 || c.train.batch_size < 1) malformed("train.epochs >= 0 and train.batch_size >= 1 required");
  if (c.probe.window < 1) malformed("probe.window must be >= 1");
  if (!(c.mask.epsilon > 0)) malformed("mask.epsilon must be > 0");
  if (c.mask.lambda < 0 || c.mask.lambda > 1) malformed("mask.lambda must be in [0,1]");
  if (!(c.mask.k_percent > 0 && c.mask.k_percent <= 100)) malformed("mask.k_percent must be in (0,100]");
  if (c.attack.instances < 1) malformed("attack.instances must be >= 1");
  if (b.steps < 0 || !(b.step_size > 0)) malformed("attack.steps >= 0 and attack.step_size > 0 required");
  if (ds.jpeg_quality < 1 || ds.jpeg_quality > 100) malformed("defense.jpeg_quality must be in [1,100]");
  if (ds.vote_views < 1) malformed("defense.vote_views must be >= 1");
  if (c.eval_per_class < 1) malformed("eval_per_class must be >= 1");
  return c;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::kMissingInput, "config not found: " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    malformed(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

json to_json(const Config& c) {
  const AttackSpec& b = c.attack.base;
  json tasks = json::array();
  for (Task t : c.corpus.tasks) tasks.push_back(task_name(t));
  json defenses = json::array();
  for (Defense d : c.defense.defenses) defenses.push_back(defense_name(d));
  const DefenseSettings& ds = c.defense.settings;
  return {
      {"model",
       {{"image_size", c.model.image_size},
        {"channels", c.model.channels},
        {"patch_size", c.model.patch_size},
        {"d_v", c.model.d_v},
        {"d_l", c.model.d_l},
        {"n_vision_layers", c.model.n_vision_layers},
        {"n_lm_layers", c.model.n_lm_layers},
        {"n_heads", c.model.n_heads},
        {"vocab_size", c.model.vocab_size},
        {"max_seq_len", c.model.max_seq_len},
        {"mlp_ratio", c.model.mlp_ratio},
        {"seed", c.model.seed}}},
      {"corpus",
       {{"images_per_class", c.corpus.images_per_class},
        {"max_jitter", c.corpus.max_jitter},
        {"min_scale", c.corpus.min_scale},
        {"max_scale", c.corpus.max_scale},
        {"max_noise", c.corpus.max_noise},
        {"seed", c.corpus.seed},
        {"tasks", tasks},
        {"paraphrases", c.corpus.paraphrases},
        {"instruction_fraction", c.corpus.instruction_fraction},
        {"min_mark_intensity", c.corpus.min_mark_intensity},
        {"max_mark_intensity", c.corpus.max_mark_intensity}}},
      {"train",
       {{"optimizer", c.train.optimizer == Optimizer::kAdam ? "adam" : "momentum"},
        {"epochs", c.train.epochs},
        {"lr", c.train.lr},
        {"momentum", c.train.momentum},
        {"beta2", c.train.beta2},
        {"batch_size", c.train.batch_size},
        {"clip_norm", c.train.clip_norm},
        {"seed", c.train.seed},
        {"final_lr_fraction", c.train.final_lr_fraction},
        {"warmup_fraction", c.train.warmup_fraction}}},
      {"probe",
       {{"per_class", c.probe.settings.per_class},
        {"hidden", c.probe.settings.hidden},
        {"epochs", c.probe.settings.epochs},
        {"lr", c.probe.settings.lr},
        {"momentum", c.probe.settings.momentum},
        {"standardize", c.probe.settings.standardize},
        {"seed", c.probe.settings.seed},
        {"window", c.probe.window},
        {"band", {c.probe.band.begin, c.probe.band.end}}}},
      {"mask", {{"epsilon", c.mask.epsilon}, {"lambda", c.mask.lambda}, {"k_percent", c.mask.k_percent}}},
      {"attack",
       {{"alpha", b.alpha},
        {"beta", b.beta},
        {"steps", b.steps},
        {"step_size", b.step_size},
        {"low_freq_fraction", b.low_freq_fraction},
        {"fuse_full_matrix", b.fuse_full_matrix},
        {"stall_patience", b.stall_patience},
        {"decode_tokens", b.decode_tokens},
        {"seed", b.seed},
        {"instances", c.attack.instances},
        {"layers", c.attack.layers},
        {"l_out_threshold", b.l_out_threshold ? json(*b.l_out_threshold) : json(nullptr)},
        {"augment",
         {{"enabled", b.augment.enabled},
          {"scale", {b.augment.scale_lo, b.augment.scale_hi}},
          {"max_degrees", b.augment.max_degrees},
          {"brightness", {b.augment.brightness_lo, b.augment.brightness_hi}},
          {"blur_sigma", {b.augment.blur_sigma_lo, b.augment.blur_sigma_hi}},
          {"noise_std", b.augment.noise_std}}}}},
      {"defense",
       {{"resize_lo", ds.resize_lo},
        {"resize_hi", ds.resize_hi},
        {"max_degrees", ds.max_degrees},
        {"jpeg_quality", ds.jpeg_quality},
        {"vote_views", ds.vote_views},
        {"vote_mask_fraction", ds.vote_mask_fraction},
        {"seed", c.defense.seed},
        {"defenses", defenses}}},
      {"ablation",
       {{"lambda", c.ablation.lambda},
        {"epsilon", c.ablation.epsilon},
        {"layer_count", c.ablation.layer_count},
        {"instances", c.ablation.instances}}},
      {"target_model_seed", c.target_model_seed},
      {"target_train_seed", c.target_train_seed},
      {"eval_per_class", c.eval_per_class},
      {"output_dir", c.output_dir}};
}

void apply_seed(Config& c, std::uint64_t seed) {
  c.model.seed = seed;
  c.train.seed = seed + 7;
  c.attack.base.seed = 100 * seed;
}

}  // namespace crossmpi
