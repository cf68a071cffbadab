// crossmpi: command-line front end for the corpus → model → probe → attack →
// evaluate pipeline. Every subcommand writes its artifacts under --out-dir
// plus a run manifest in <out>/manifests/<subcommand>.json.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "crossmpi/config.hpp"
#include "crossmpi/errors.hpp"
#include "crossmpi/image_io.hpp"
#include "crossmpi/manifest.hpp"
#include "crossmpi/parallel.hpp"
#include "crossmpi/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace crossmpi;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string source_model;
  std::vector<std::string> target_models;
  std::vector<std::string> defenses;
  std::string role = "source";
  std::string grid;
};

class Run {
 public:
  Run(std::string command, const Options& opts) : opts_(opts) {
    manifest_.command = std::move(command);
    if (!opts.config_path.empty()) {
      config_ = load_config(opts.config_path);
      manifest_.add_input(opts.config_path);
    }
    if (opts.seed) apply_seed(config_, *opts.seed);
    out_ = opts.out_dir.empty() ? fs::path(config_.output_dir) : fs::path(opts.out_dir);
    manifest_.config_hash = sha256_hex(to_json(config_).dump());
    manifest_.seeds = {{"model", config_.model.seed},
                       {"train", config_.train.seed},
                       {"corpus", config_.corpus.seed},
                       {"probe", config_.probe.settings.seed},
                       {"attack", config_.attack.base.seed},
                       {"defense", config_.defense.seed},
                       {"target_model", config_.target_model_seed},
                       {"target_train", config_.target_train_seed}};
  }

  const Config& config() const { return config_; }
  const fs::path& out() const { return out_; }
  RunManifest& manifest() { return manifest_; }

  fs::path source_path() const {
    return opts_.source_model.empty() ? out_ / "models" / "source.ckpt" : fs::path(opts_.source_model);
  }
  fs::path target_path() const { return out_ / "models" / "target.ckpt"; }

  ToyVLM load_model(const fs::path& path) {
    ToyVLM m = load_checkpoint(path);
    manifest_.add_input(path);
    return m;
  }

  template <typename F>
  auto stage(const std::string& name, F&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    auto finish = [&] {
      manifest_.timings.emplace_back(name,
                                     std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    };
    if constexpr (std::is_void_v<decltype(body())>) {
      body();
      finish();
    } else {
      auto r = body();
      finish();
      return r;
    }
  }

  void write_text(const fs::path& rel, const std::string& text) {
    write_file(out_ / rel, text);
    manifest_.add_output(out_ / rel);
  }
  void write_json(const fs::path& rel, const json& j) { write_text(rel, j.dump(2) + "\n"); }

  json read_json(const fs::path& rel, const std::string& hint) {
    const fs::path p = out_ / rel;
    if (!fs::exists(p)) throw Error(ErrorCode::kMissingInput, p.string() + " not found: " + hint);
    manifest_.add_input(p);
    try {
      return json::parse(read_file(p));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kFormat, p.string() + ": " + e.what());
    }
  }

  /// config.attack.layers, else the window found by `probe`.
  std::vector<int> layers() {
    if (!config_.attack.layers.empty()) return config_.attack.layers;
    return read_json("probe/report.json", "run `probe` first or set attack.layers")
        .at("report")
        .at("window")
        .get<std::vector<int>>();
  }

  void finish() {
    const fs::path p = out_ / "manifests" / (manifest_.command + ".json");
    write_file(p, to_json(manifest_).dump(2) + "\n");
  }

 private:
  Options opts_;
  Config config_;
  fs::path out_;
  RunManifest manifest_;
};

std::string model_id(const fs::path& p) { return p.stem().string(); }

json record_json(const ImageRecord& r, const GeneratedImage& g) {
  const auto& a = r.attributes;
  return {{"shape", shape_word(r.shape)},
          {"color", color_word(a.color)},
          {"jitter", {a.jitter_row, a.jitter_col}},
          {"scale", a.scale},
          {"noise", a.noise_level},
          {"mark", a.mark},
          {"mark_corner", a.mark_corner},
          {"mark_intensity", a.mark_intensity},
          {"seed", r.seed},
          {"caption", Vocabulary::instance().decode(g.caption)}};
}

// ---- subcommands ----

void cmd_gen_corpus(Run& run) {
  const Config& c = run.config();
  const int attack_per_class = (c.attack.instances + kNumShapes - 1) / kNumShapes;
  const std::vector<std::pair<std::string, std::vector<ImageRecord>>> splits = {
      {"train", gen_training_records(c.corpus)},
      {"heldout", gen_records(c.corpus, c.eval_per_class, 2)},
      {"attack", gen_records(c.corpus, attack_per_class, 3)}};
  run.stage("gen-corpus", [&] {
    std::ostringstream lines;
    for (const auto& [split, records] : splits) {
      std::vector<std::string> encoded(records.size());
      std::vector<json> meta(records.size());
      parallel_for(records.size(), [&](std::size_t i) {
        const GeneratedImage g = gen_image(records[i], c.corpus.image_size, c.corpus.channels);
        encoded[i] = encode_image(g.image);
        meta[i] = record_json(records[i], g);
      });
      for (std::size_t i = 0; i < records.size(); ++i) {
        std::ostringstream name;
        name << split << '/' << std::setw(5) << std::setfill('0') << i << (c.corpus.channels == 1 ? ".pgm" : ".ppm");
        write_file(run.out() / "corpus" / name.str(), encoded[i]);
        json line = {{"split", split}, {"file", name.str()}, {"sha256", sha256_hex(encoded[i])}};
        line.update(meta[i]);
        lines << line.dump() << '\n';
      }
    }
    run.write_text("corpus/manifest.jsonl", lines.str());
  });
}

void cmd_train_model(Run& run, const Options& opts) {
  if (opts.role != "source" && opts.role != "target" && opts.role != "both")
    throw Error(ErrorCode::kInvalidArgument, "--role must be source, target or both");
  auto train_one = [&](ModelRole role, const fs::path& path) {
    const std::string name = role == ModelRole::kSource ? "source" : "target";
    TrainReport report;
    ToyVLM model = run.stage("train-" + name, [&] { return train_pipeline_model(run.config(), role, &report); });
    const QaAccuracy acc =
        run.stage("qa-" + name, [&] { return qa_accuracy(model, run.config().corpus, run.config().eval_per_class); });
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_checkpoint(model, path);
    run.manifest().add_output(path);
    run.write_json(fs::path("models") / (name + ".train.json"),
                   {{"model", model_id(path)},
                    {"model_seed", model.config().seed},
                    {"loss_curve", report.loss_curve},
                    {"qa_accuracy", to_json(acc)}});
    std::cout << name << ": held-out QA accuracy " << acc.overall << "\n";
  };
  if (opts.role != "target") train_one(ModelRole::kSource, run.source_path());
  if (opts.role != "source") {
    const fs::path p = opts.target_models.empty() ? run.target_path() : fs::path(opts.target_models.front());
    train_one(ModelRole::kTarget, p);
  }
}

void cmd_probe(Run& run) {
  const ToyVLM model = run.load_model(run.source_path());
  const ProbeOutcome o = run.stage("probe", [&] { return run_probe_stage(model, run.config()); });
  run.write_json("probe/report.json", to_json(o));
  run.write_text("probe/accuracy.csv", accuracy_csv(o.report));
  std::cout << "fusion window:";
  for (int l : o.report.window) std::cout << ' ' << l;
  std::cout << "  score " << o.window_score << " (first " << o.first_score << ", last " << o.last_score << ")\n";
}

void cmd_mask(Run& run) {
  const Config& c = run.config();
  const ToyVLM model = run.load_model(run.source_path());
  const auto instances = config_instances(c, attack_layers(c, {}), c.attack.instances);
  std::vector<BudgetMask> masks(instances.size());
  run.stage("mask", [&] {
    parallel_for(instances.size(), [&](std::size_t i) {
      const auto& inst = instances[i];
      masks[i] =
          build_budget_mask(compute_saliency(model, inst.spec.image, inst.saliency_prompt, inst.saliency_answer), c.mask);
    });
  });
  for (std::size_t i = 0; i < instances.size(); ++i) {
    run.write_json(fs::path("masks") / (instances[i].id + ".json"), to_json(masks[i]));
    run.write_text(fs::path("masks") / (instances[i].id + ".pgm"), encode_image(mask_heatmap(masks[i])));
  }
}

void cmd_attack(Run& run) {
  const Config& c = run.config();
  const ToyVLM model = run.load_model(run.source_path());
  const std::vector<int> layers = run.layers();
  const auto instances = config_instances(c, layers, c.attack.instances);
  const auto outcomes = run.stage("attack", [&] { return optimize_instances(model, instances, campaign_spec(c)); });
  std::vector<bool> flags;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    flags.push_back(outcomes[i].source_success);
    run.write_text(fs::path("attack") / (outcomes[i].id + ".pgm"), encode_image(outcomes[i].perturbed));
  }
  run.write_json("attack/outcomes.json", {{"source", model_id(run.source_path())},
                                          {"layers", layers},
                                          {"instances", outcomes.size()},
                                          {"white_box_asr", asr(flags)},
                                          {"outcomes", outcomes_to_json(outcomes)}});
  std::cout << "white-box ASR " << asr(flags) << " over " << flags.size() << " instances\n";
}

void cmd_evaluate(Run& run, const Options& opts) {
  Config c = run.config();
  if (!opts.defenses.empty()) {
    c.defense.defenses.clear();
    for (const auto& n : opts.defenses) {
      if (n == "none") continue;
      try {
        c.defense.defenses.push_back(defense_from_name(n));
      } catch (const std::invalid_argument& e) {
        throw Error(ErrorCode::kInvalidArgument, e.what());
      }
    }
  }
  const json attack = run.read_json("attack/outcomes.json", "run `attack` first");
  const std::vector<int> layers = attack.at("layers").get<std::vector<int>>();
  auto outcomes = outcomes_from_json(attack.at("outcomes"));
  const auto instances = config_instances(c, layers, static_cast<int>(outcomes.size()));
  for (std::size_t i = 0; i < instances.size(); ++i)
    if (instances[i].id != outcomes[i].id)
      throw Error(ErrorCode::kFormat, "attack outcomes do not match the configured instances");

  std::vector<fs::path> target_paths;
  for (const auto& t : opts.target_models) target_paths.emplace_back(t);
  if (target_paths.empty()) {
    target_paths.push_back(run.source_path());
    if (fs::exists(run.target_path())) target_paths.push_back(run.target_path());
  }
  std::vector<ToyVLM> models;
  models.reserve(target_paths.size());
  for (const auto& p : target_paths) models.push_back(run.load_model(p));
  std::vector<NamedModel> targets;
  for (std::size_t i = 0; i < models.size(); ++i) targets.push_back({model_id(target_paths[i]), &models[i]});

  const CampaignReport report = run.stage("evaluate", [&] {
    return evaluate_campaign(attack.at("source").get<std::string>(), targets, instances, std::move(outcomes),
                             campaign_spec(c));
  });
  run.write_json("eval/report.json", to_json(report));
  run.write_text("eval/rows.csv", campaign_csv(report));
  run.write_text("eval/matrix.csv", matrix_csv(report));
  std::cout << matrix_csv(report);
}

void cmd_ablate(Run& run, const Options& opts) {
  const Config& base = run.config();
  const ToyVLM model = run.load_model(run.source_path());
  struct Point {
    std::string label;
    Config config;
    std::vector<int> layers;
  };
  std::vector<Point> points;
  const std::string& g = opts.grid;
  if (g == "lambda" || g == "epsilon") {
    const auto& values = g == "lambda" ? base.ablation.lambda : base.ablation.epsilon;
    const std::vector<int> layers = run.layers();
    for (double v : values) {
      Config c = base;
      (g == "lambda" ? c.mask.lambda : c.mask.epsilon) = v;
      std::ostringstream label;
      label << std::setprecision(6) << v;
      points.push_back({label.str(), c, layers});
    }
  } else if (g == "layers") {
    const LayerGroups groups = layer_groups(model.config().n_lm_layers, run.layers());
    points = {{"early", base, groups.early}, {"middle", base, groups.middle}, {"final", base, groups.final}};
  } else if (g == "layer-count") {
    const json probe = run.read_json("probe/report.json", "run `probe` first").at("report");
    const auto score = probe.at("score").get<std::vector<double>>();
    const auto band = probe.at("band").get<std::vector<int>>();
    for (int k : base.ablation.layer_count)
      points.push_back({std::to_string(k), base, select_fusion_layers(score, k, LayerBand{band.at(0), band.at(1)})});
  } else {
    throw Error(ErrorCode::kInvalidArgument, "--grid must be lambda, epsilon, layers or layer-count");
  }

  json rows = json::array();
  std::ostringstream csv;
  csv << std::setprecision(10) << "grid,value,layers,asr,ss,clean_rate,mean_ssim,mean_ms_ssim,mean_high_freq_energy\n";
  for (const auto& p : points) {
    const auto instances = config_instances(p.config, p.layers, base.ablation.instances);
    CampaignSpec spec = campaign_spec(p.config);
    spec.defenses.clear();
    const CampaignReport r = run.stage("ablate-" + g + "-" + p.label, [&] {
      return run_campaign({model_id(run.source_path()), &model}, {{model_id(run.source_path()), &model}}, instances,
                          spec);
    });
    const CellSummary& cell = r.cells.front();
    rows.push_back({{"value", p.label},
                    {"layers", p.layers},
                    {"asr", cell.asr},
                    {"ss", cell.ss},
                    {"clean_rate", cell.clean_rate},
                    {"mean_ssim", r.mean_ssim},
                    {"mean_ms_ssim", r.mean_ms_ssim},
                    {"mean_high_freq_energy", r.mean_high_freq}});
    std::string layer_list;
    for (int l : p.layers) layer_list += (layer_list.empty() ? "" : " ") + std::to_string(l);
    csv << g << ',' << p.label << ",\"" << layer_list << "\"," << cell.asr << ',' << cell.ss << ',' << cell.clean_rate
        << ',' << r.mean_ssim << ',' << r.mean_ms_ssim << ',' << r.mean_high_freq << '\n';
    std::cout << g << '=' << p.label << " ASR " << cell.asr << "\n";
  }
  run.write_json(fs::path("ablation") / (g + ".json"),
                 {{"grid", g}, {"instances", base.ablation.instances}, {"rows", rows}});
  run.write_text(fs::path("ablation") / (g + ".csv"), csv.str());
}

void cmd_report(Run& run) {
  const fs::path& out = run.out();
  auto maybe = [&](const fs::path& rel) -> std::optional<json> {
    if (!fs::exists(out / rel)) return std::nullopt;
    return run.read_json(rel, "");
  };
  json summary = {{"config", to_json(run.config())}};
  std::ostringstream md;
  md << std::setprecision(4) << "# crossmpi report\n\n";

  for (const char* role : {"source", "target"}) {
    if (auto j = maybe(fs::path("models") / (std::string(role) + ".train.json"))) {
      summary["models"][role] = (*j)["qa_accuracy"];
      const auto& a = (*j)["qa_accuracy"];
      md << "- " << role << " model: held-out QA accuracy " << a["overall"].get<double>() << " (shape "
         << a["shape"].get<double>() << ", color " << a["color"].get<double>() << ", describe "
         << a["describe"].get<double>() << ")\n";
    }
  }
  if (auto j = maybe("probe/report.json")) {
    summary["probe"] = {{"window", (*j)["report"]["window"]},
                        {"window_score", (*j)["window_score"]},
                        {"first_window_score", (*j)["first_window_score"]},
                        {"last_window_score", (*j)["last_window_score"]}};
    md << "- fusion window " << (*j)["report"]["window"].dump() << ", score " << (*j)["window_score"].get<double>()
       << " (first " << (*j)["first_window_score"].get<double>() << ", last "
       << (*j)["last_window_score"].get<double>() << ")\n";
  }
  if (auto j = maybe("eval/report.json")) {
    summary["campaign"] = {{"source", (*j)["source"]}, {"cells", (*j)["cells"]}, {"imperceptibility", (*j)["imperceptibility"]}};
    const auto& imp = (*j)["imperceptibility"];
    md << "- imperceptibility: SSIM " << imp["mean_ssim"].get<double>() << ", MS-SSIM "
       << imp["mean_ms_ssim"].get<double>() << ", high-frequency energy " << imp["mean_high_freq_energy"].get<double>()
       << "\n\n## Attack success (source: " << (*j)["source"].get<std::string>() << ")\n\n"
       << "| dataset | target | defense | ASR | SS | clean rate |\n|---|---|---|---|---|---|\n";
    for (const auto& cell : (*j)["cells"])
      md << "| shapes-5 | " << cell["target"].get<std::string>() << " | " << cell["defense"].get<std::string>() << " | "
         << cell["asr"].get<double>() << " | " << cell["ss"].get<double>() << " | "
         << cell["clean_rate"].get<double>() << " |\n";
  }
  for (const char* g : {"lambda", "epsilon", "layers", "layer-count"}) {
    if (auto j = maybe(fs::path("ablation") / (std::string(g) + ".json"))) {
      summary["ablation"][g] = (*j)["rows"];
      md << "\n## Ablation: " << g << "\n\n| value | layers | ASR | SS | SSIM |\n|---|---|---|---|---|\n";
      for (const auto& r : (*j)["rows"])
        md << "| " << r["value"].get<std::string>() << " | " << r["layers"].dump() << " | " << r["asr"].get<double>()
           << " | " << r["ss"].get<double>() << " | " << r["mean_ssim"].get<double>() << " |\n";
    }
  }
  run.write_json("report/summary.json", summary);
  run.write_text("report/summary.md", md.str());
  std::cout << md.str();
}

int fail(ErrorCode code, const std::string& message) {
  std::cerr << json{{"error", {{"code", static_cast<int>(code)}, {"name", error_code_name(code)}, {"message", message}}}}
                   .dump()
            << std::endl;
  return static_cast<int>(code);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal prompt-injection attack pipeline on a toy vision-language model"};
  app.require_subcommand(1);
  Options opts;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "JSON config (defaults when omitted)");
    sub->add_option("--seed", opts.seed, "Global seed: model = s, training = s + 7, attack = 100·s");
    sub->add_option("--out-dir", opts.out_dir, "Output directory (overrides config output_dir)");
    return sub;
  };
  auto source = [&](CLI::App* sub) {
    sub->add_option("--source-model", opts.source_model, "Source checkpoint (default <out>/models/source.ckpt)");
    return sub;
  };

  std::map<std::string, std::function<void(Run&)>> handlers;
  common(app.add_subcommand("gen-corpus", "Write the synthetic corpus as PGM images plus manifest.jsonl"));
  handlers["gen-corpus"] = cmd_gen_corpus;

  auto* train = source(common(app.add_subcommand("train-model", "Train the source and/or target model")));
  train->add_option("--role", opts.role, "source, target or both")->check(CLI::IsMember({"source", "target", "both"}));
  train->add_option("--target-model", opts.target_models, "Target checkpoint (default <out>/models/target.ckpt)")
      ->expected(1);
  handlers["train-model"] = [&](Run& r) { cmd_train_model(r, opts); };

  source(common(app.add_subcommand("probe", "Layer-wise probing and fusion-window selection")));
  handlers["probe"] = cmd_probe;
  source(common(app.add_subcommand("mask", "Saliency-weighted budget masks for the attack instances")));
  handlers["mask"] = cmd_mask;
  source(common(app.add_subcommand("attack", "Optimize the attack instances on the source model")));
  handlers["attack"] = cmd_attack;

  auto* evaluate = source(common(app.add_subcommand("evaluate", "Judge optimized images on targets and defenses")));
  evaluate->add_option("--target-model,--target-models", opts.target_models, "Target checkpoints")->delimiter(',');
  evaluate->add_option("--defense,--defenses", opts.defenses, "Defenses (randomization, rotation, jpeg, smooth_vote)")
      ->delimiter(',');
  handlers["evaluate"] = [&](Run& r) { cmd_evaluate(r, opts); };

  auto* ablate = source(common(app.add_subcommand("ablate", "White-box ablation over one grid")));
  ablate->add_option("--grid", opts.grid, "lambda, epsilon, layers or layer-count")
      ->required()
      ->check(CLI::IsMember({"lambda", "epsilon", "layers", "layer-count"}));
  handlers["ablate"] = [&](Run& r) { cmd_ablate(r, opts); };

  common(app.add_subcommand("report", "Summarize every artifact under the output directory"));
  handlers["report"] = cmd_report;

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(ErrorCode::kInvalidArgument, e.what());
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    Run run(name == "ablate" ? name + "-" + opts.grid : name, opts);
    handlers.at(name)(run);
    run.finish();
  } catch (const Error& e) {
    return fail(e.code(), e.what());
  } catch (const std::invalid_argument& e) {
    return fail(ErrorCode::kInvalidArgument, e.what());
  } catch (const std::length_error& e) {
    return fail(ErrorCode::kInvalidArgument, e.what());
  } catch (const std::exception& e) {
    std::cerr << json{{"error", {{"code", 1}, {"name", "internal"}, {"message", e.what()}}}}.dump() << std::endl;
    return 1;
  }
  return 0;
}
