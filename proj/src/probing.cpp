#include "crossmpi/probing.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

#include "crossmpi/parallel.hpp"

namespace crossmpi {

ProbeClassifier::ProbeClassifier(Tensor mean, Tensor inv_std, Tensor w1, Tensor b1, Tensor w2, Tensor b2)
    : mean_(std::move(mean)),
      inv_std_(std::move(inv_std)),
      w1_(std::move(w1)),
      b1_(std::move(b1)),
      w2_(std::move(w2)),
      b2_(std::move(b2)),
      frozen_(true) {}

namespace {

Tensor standardize(const Tensor& x, const Tensor& mean, const Tensor& inv_std) {
  Tensor out = x;
  const std::size_t d = x.dim(1);
  if (mean.size() != d) throw ShapeError("probe", x.shape(), mean.shape());
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = (x(i, j) - mean[j]) * inv_std[j];
  return out;
}

Var mlp(const Var& x, const Var& w1, const Var& b1, const Var& w2, const Var& b2) {
  return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2);
}

}  // namespace

Tensor ProbeClassifier::logits(const Tensor& x) const {
  Tape tape;
  const Var out = mlp(tape.constant(standardize(x, mean_, inv_std_)), tape.constant(w1_), tape.constant(b1_),
                      tape.constant(w2_), tape.constant(b2_));
  return out.value();
}

std::vector<int> ProbeClassifier::predict(const Tensor& x) const {
  const Tensor z = logits(x);
  std::vector<int> out(z.dim(0));
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < z.dim(1); ++c)
      if (z(i, c) > z(i, best)) best = c;
    out[i] = static_cast<int>(best);
  }
  return out;
}

double ProbeClassifier::accuracy(const Tensor& x, const std::vector<int>& labels) const {
  if (labels.size() != x.dim(0) || labels.empty()) throw std::invalid_argument("probe accuracy: label count mismatch");
  const auto pred = predict(x);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

ProbeClassifier train_probe(const Tensor& x, const std::vector<int>& labels, int classes, const ProbeSettings& s,
                            std::uint64_t seed) {
  if (x.rank() != 2 || labels.size() != x.dim(0)) throw std::invalid_argument("train_probe: need [n,d] features and n labels");
  if (classes < 2) throw std::invalid_argument("train_probe: need at least two classes");
  std::vector<int> count(static_cast<std::size_t>(classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= classes) throw std::invalid_argument("train_probe: label out of range");
    ++count[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < classes; ++c)
    if (count[static_cast<std::size_t>(c)] == 0)
      throw std::invalid_argument("train_probe: class " + std::to_string(c) + " has no training example");

  const std::size_t n = x.dim(0), d = x.dim(1), h = static_cast<std::size_t>(s.hidden);
  const auto k = static_cast<std::size_t>(classes);
  Tensor mean({d}, 0.0), inv_std({d}, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < n; ++i) m += x(i, j);
    m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) v += (x(i, j) - m) * (x(i, j) - m);
    v /= static_cast<double>(n);
    mean[j] = s.standardize ? m : 0.0;
    inv_std[j] = s.standardize ? 1.0 / std::sqrt(v + 1e-8) : 1.0;
  }
  const Tensor xs = standardize(x, mean, inv_std);

  std::mt19937_64 rng(seed);
  auto uniform = [&](Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape), 0.0);
    for (auto& v : t.storage()) v = dist(rng);
    return t;
  };
  std::vector<Tensor> params = {uniform({d, h}, 1.0 / std::sqrt(static_cast<double>(d))), Tensor({h}, 0.0),
                                uniform({h, k}, 1.0 / std::sqrt(static_cast<double>(h))), Tensor({k}, 0.0)};
  std::vector<Tensor> velocity;
  for (const auto& p : params) velocity.emplace_back(p.shape(), 0.0);

  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    Tape tape;
    std::vector<Var> v;
    for (const auto& p : params) v.push_back(tape.variable(p));
    const Var loss = scale(cross_entropy(mlp(tape.constant(xs), v[0], v[1], v[2], v[3]), labels),
                           1.0 / static_cast<double>(n));
    if (!std::isfinite(loss.value().item())) throw std::domain_error("train_probe: non-finite loss");
    const Gradients g = tape.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor& gi = g.of(v[i]);
      for (std::size_t j = 0; j < gi.size(); ++j) {
        velocity[i][j] = s.momentum * velocity[i][j] + gi[j];
        params[i][j] -= s.lr * velocity[i][j];
      }
    }
  }
  return ProbeClassifier(std::move(mean), std::move(inv_std), std::move(params[0]), std::move(params[1]),
                         std::move(params[2]), std::move(params[3]));
}

std::vector<Tensor> last_token_states(const ToyVLM& model, const TokenSequence& prompt,
                                      const std::vector<ImageRecord>& records, const CorpusSpec& corpus) {
  const auto L = static_cast<std::size_t>(model.config().n_lm_layers);
  const auto d = static_cast<std::size_t>(model.config().d_l);
  std::vector<Tensor> out(L, Tensor({records.size(), d}, 0.0));
  parallel_for(records.size(), [&](std::size_t i) {
    const Tensor image = gen_image(records[i], corpus.image_size, corpus.channels).image;
    const ForwardResult r = forward(model, prompt, image);
    for (std::size_t l = 0; l < L; ++l) {
      const Tensor h = r.hidden_last(l);
      for (std::size_t j = 0; j < d; ++j) out[l](i, j) = h[j];
    }
  });
  return out;
}

std::vector<int> shape_labels(const std::vector<ImageRecord>& records) {
  std::vector<int> y;
  y.reserve(records.size());
  for (const auto& r : records) y.push_back(static_cast<int>(r.shape));
  return y;
}

std::vector<ProbeClassifier> train_probes(const ToyVLM& model, const std::vector<ImageRecord>& train_set,
                                          const TokenSequence& benign_prompt, const CorpusSpec& corpus,
                                          const ProbeSettings& settings) {
  const auto states = last_token_states(model, benign_prompt, train_set, corpus);
  const auto labels = shape_labels(train_set);
  std::vector<ProbeClassifier> probes(states.size());
  parallel_for(states.size(), [&](std::size_t l) {
    probes[l] = train_probe(states[l], labels, kNumShapes, settings, settings.seed + 1000 * l);
  });
  return probes;
}

LayerBand default_band(int n) { return {n / 4, (3 * n + 3) / 4}; }

ProbeReport eval_variants(const ToyVLM& model, const std::vector<ProbeClassifier>& probes,
                          const std::vector<ImageRecord>& test_set, const PromptVariantSet& variants,
                          const CorpusSpec& corpus) {
  const std::size_t L = probes.size();
  if (L != static_cast<std::size_t>(model.config().n_lm_layers)) throw std::invalid_argument("eval_variants: one probe per layer required");
  for (const auto& p : probes)
    if (!p.frozen()) throw std::invalid_argument("eval_variants: probes must be frozen");
  ProbeReport rep;
  std::vector<const TokenSequence*> prompts = {&variants.benign};
  rep.prompts.push_back(variants.benign_text);
  for (const auto& v : variants.variants) {
    prompts.push_back(&v.prompt);
    rep.prompts.push_back(v.text);
    rep.families.push_back(v.family);
  }
  const auto labels = shape_labels(test_set);
  rep.accuracy.assign(L, std::vector<double>(prompts.size(), 0.0));
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    const auto states = last_token_states(model, *prompts[p], test_set, corpus);
    for (std::size_t l = 0; l < L; ++l) rep.accuracy[l][p] = probes[l].accuracy(states[l], labels);
  }
  rep.drop.assign(L, {});
  for (std::size_t l = 0; l < L; ++l) {
    std::array<double, kNumFamilies> sum{};
    std::array<int, kNumFamilies> n{};
    for (std::size_t v = 0; v < rep.families.size(); ++v) {
      const auto f = static_cast<std::size_t>(rep.families[v]);
      sum[f] += rep.accuracy[l][0] - rep.accuracy[l][v + 1];
      ++n[f];
    }
    for (std::size_t f = 0; f < kNumFamilies; ++f) rep.drop[l][f] = n[f] ? sum[f] / n[f] : 0.0;
  }
  rep.score = layer_scores(rep.drop);
  rep.band = default_band(static_cast<int>(L));
  return rep;
}

std::vector<double> layer_scores(const std::vector<std::array<double, kNumFamilies>>& drop) {
  std::vector<double> s;
  s.reserve(drop.size());
  for (const auto& d : drop) {
    const double semantic = 0.5 * (d[static_cast<int>(VariantFamily::kTaskSemantic)] +
                                   d[static_cast<int>(VariantFamily::kIrrelevant)]);
    const double form = 0.5 * (d[static_cast<int>(VariantFamily::kInstruction)] +
                               d[static_cast<int>(VariantFamily::kSyntax)]);
    s.push_back(semantic - form);
  }
  return s;
}

double window_score(const std::vector<double>& score, int start, int window) {
  if (window < 1 || start < 0 || static_cast<std::size_t>(start + window) > score.size())
    throw std::out_of_range("window_score: window outside the layer range");
  double sum = 0;
  for (int l = start; l < start + window; ++l) sum += score[static_cast<std::size_t>(l)];
  return sum / window;
}

std::vector<int> select_fusion_layers(const std::vector<double>& score, int window, LayerBand band) {
  if (band.begin < 0 || band.end > static_cast<int>(score.size()) || band.begin >= band.end)
    throw std::invalid_argument("select_fusion_layers: empty or out-of-range band");
  if (window < 1 || window > band.end - band.begin)
    throw std::invalid_argument("select_fusion_layers: window wider than band");
  int best = band.begin;
  double best_score = window_score(score, best, window);
  for (int s = band.begin + 1; s + window <= band.end; ++s) {
    const double v = window_score(score, s, window);
    if (v > best_score) {
      best = s;
      best_score = v;
    }
  }
  std::vector<int> out(static_cast<std::size_t>(window));
  for (int i = 0; i < window; ++i) out[static_cast<std::size_t>(i)] = best + i;
  return out;
}

std::vector<int> select_fusion_layers(const ProbeReport& report, int window, LayerBand band) {
  return select_fusion_layers(report.score, window, band);
}

nlohmann::json to_json(const ProbeReport& r) {
  nlohmann::json j;
  j["prompts"] = r.prompts;
  std::vector<std::string> fam;
  for (auto f : r.families) fam.emplace_back(family_name(f));
  j["families"] = fam;
  j["accuracy"] = r.accuracy;
  nlohmann::json drops = nlohmann::json::array();
  for (const auto& d : r.drop) {
    nlohmann::json row;
    for (int f = 0; f < kNumFamilies; ++f) row[family_name(static_cast<VariantFamily>(f))] = d[static_cast<std::size_t>(f)];
    drops.push_back(row);
  }
  j["drop"] = drops;
  j["score"] = r.score;
  j["band"] = {r.band.begin, r.band.end};
  j["window"] = r.window;
  return j;
}

std::string accuracy_csv(const ProbeReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "layer";
  for (const auto& p : r.prompts) os << ",\"" << p << '"';
  os << '\n';
  for (std::size_t l = 0; l < r.accuracy.size(); ++l) {
    os << l;
    for (double a : r.accuracy[l]) os << ',' << a;
    os << '\n';
  }
  return os.str();
}

}  // namespace crossmpi
