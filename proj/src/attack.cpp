#include "crossmpi/attack.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "crossmpi/errors.hpp"
#include "crossmpi/transforms.hpp"

namespace crossmpi {

// ---------------------------------------------------------------------------
// augmentation

ViewDraw draw_views(std::mt19937_64& rng, const AugmentSettings& a, const Shape& shape) {
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  ViewDraw d;
  d.scale = uni(a.scale_lo, a.scale_hi);
  d.degrees = uni(-a.max_degrees, a.max_degrees);
  d.brightness = uni(a.brightness_lo, a.brightness_hi);
  d.blur_sigma = uni(a.blur_sigma_lo, a.blur_sigma_hi);
  d.noise = Tensor(shape, 0.0);
  std::normal_distribution<double> n(0.0, a.noise_std);
  for (auto& v : d.noise.storage()) v = n(rng);
  return d;
}

Var apply_view(int k, const Var& x, const ViewDraw& d) {
  switch (k) {
    case 0: return x;
    case 1: return rescale(x, d.scale);
    case 2: return rotate(x, d.degrees);
    case 3: return scale(x, d.brightness);
    case 4: return gaussian_blur(x, d.blur_sigma);
    case 5: return add(x, x.tape().constant(d.noise));
  }
  throw std::out_of_range("apply_view: view index must lie in [0,6)");
}

AugmentedViews augment_views(const Var& image, const Var& delta, const ViewDraw& draw, int views) {
  if (views < 1 || views > kNumViews) throw std::out_of_range("augment_views: bad view count");
  AugmentedViews out;
  for (int k = 0; k < views; ++k) {
    out.images.push_back(apply_view(k, image, draw));
    out.deltas.push_back(apply_view(k, delta, draw));
  }
  return out;
}

// ---------------------------------------------------------------------------
// loss terms

namespace {

TokenSequence teacher_tokens(const TokenSequence& prompt, const TokenSequence& keywords) {
  TokenSequence t = prompt;
  t.insert(t.end(), keywords.begin(), keywords.end() - 1);
  return t;
}

}  // namespace

Var loss_out(const BoundModel& bound, const TokenSequence& prompt, const Var& image, const TokenSequence& keywords) {
  if (keywords.empty()) throw std::invalid_argument("loss_out: empty target keywords");
  return nll_loss(bound, prompt, image, keywords);
}

std::vector<Tensor> fuse_reference(const ToyVLM& model, const TokenSequence& target_prompt, const Tensor& target_image,
                                   const std::vector<int>& layers, bool full_matrix) {
  const ForwardResult r = forward(model, target_prompt, target_image);
  std::vector<Tensor> ref;
  for (int l : layers) {
    const auto li = static_cast<std::size_t>(l);
    ref.push_back(full_matrix ? r.hidden.at(li) : r.hidden_last(li));
  }
  return ref;
}

Var loss_fuse(const ForwardOutput& out, std::size_t input_len, const std::vector<int>& layers,
              const std::vector<Tensor>& reference, bool full_matrix) {
  if (layers.empty() || layers.size() != reference.size())
    throw std::invalid_argument("loss_fuse: need one reference per selected layer");
  Tape& tape = out.hidden.front().tape();
  std::vector<Var> terms;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Var& h = out.hidden.at(static_cast<std::size_t>(layers[i]));
    const std::size_t d = h.shape()[1];
    Var mine = full_matrix ? slice_rows(h, 0, input_len) : reshape(slice_rows(h, input_len - 1, 1), {d});
    if (mine.shape() != reference[i].shape())
      throw ShapeError("loss_fuse: benign and target branches differ", mine.shape(), reference[i].shape());
    terms.push_back(squared_norm(sub(mine, tape.constant(reference[i]))));
  }
  Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  return total;
}

Var loss_fuse(const BoundModel& bound, const TokenSequence& prompt, const Var& image, const std::vector<int>& layers,
              const std::vector<Tensor>& reference, bool full_matrix) {
  const ForwardOutput out = forward(bound, image, prompt, 0);
  return loss_fuse(out, out.seq_len, layers, reference, full_matrix);
}

namespace {

// Flat indices (unshifted) of the bins outside the centered low-frequency window.
std::vector<std::size_t> high_bins(std::size_t H, std::size_t W, double f) {
  const auto sh = static_cast<std::size_t>(std::ceil(static_cast<double>(H) * f - 1e-12));
  const auto sw = static_cast<std::size_t>(std::ceil(static_cast<double>(W) * f - 1e-12));
  const std::size_t r0 = H / 2 - std::min(sh, H) / 2, c0 = W / 2 - std::min(sw, W) / 2;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t si = (i + H / 2) % H, sj = (j + W / 2) % W;  // position after centering
      const bool low = si >= r0 && si < r0 + sh && sj >= c0 && sj < c0 + sw;
      if (!low) out.push_back(i * W + j);
    }
  return out;
}

}  // namespace

Var loss_freq(const Var& delta, double f) {
  if (delta.shape().size() != 3) throw ShapeError("loss_freq: expected [C,H,W], got " + shape_str(delta.shape()));
  if (!(f >= 0 && f <= 1)) throw std::invalid_argument("loss_freq: low-frequency fraction must lie in [0,1]");
  const std::size_t C = delta.shape()[0], H = delta.shape()[1], W = delta.shape()[2];
  const auto bins = high_bins(H, W, f);
  Tape& tape = delta.tape();
  if (bins.empty()) return tape.constant(Tensor::scalar(0.0));
  std::vector<Var> per_channel;
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<std::size_t> idx(H * W);
    for (std::size_t k = 0; k < H * W; ++k) idx[k] = c * H * W + k;
    const Var plane = gather(delta, std::move(idx), {H, W});
    const auto [re, im] = dft2(plane);
    const Var mag = complex_abs(re, im);
    per_channel.push_back(mean(gather(mag, bins, {bins.size()})));
  }
  Var total = per_channel[0];
  for (std::size_t c = 1; c < C; ++c) total = add(total, per_channel[c]);
  return scale(total, 1.0 / static_cast<double>(C));
}

double loss_freq(const Tensor& delta, double f) {
  Tape tape;
  return loss_freq(tape.constant(delta), f).value().item();
}

// ---------------------------------------------------------------------------
// attack loop

void AttackSpec::validate(const ModelConfig& c) const {
  if (target_keywords.empty()) throw std::invalid_argument("attack: target keywords must be non-empty");
  if (layers.empty()) throw std::invalid_argument("attack: fusion layer set must be non-empty");
  for (int l : layers)
    if (l < 0 || l >= c.n_lm_layers) throw std::invalid_argument("attack: fusion layer " + std::to_string(l) + " out of range");
  if (benign_prompt.empty() || target_prompt.empty()) throw std::invalid_argument("attack: prompts must be non-empty");
  if (benign_prompt == target_prompt) throw std::invalid_argument("attack: benign and target prompts must differ");
  if (steps < 0) throw std::invalid_argument("attack: negative step count");
  if (!(step_size > 0)) throw std::invalid_argument("attack: step size must be positive");
  if (alpha < 0 || beta < 0) throw std::invalid_argument("attack: loss weights must be non-negative");
  if (stall_patience < 1 || decode_tokens < 1) throw std::invalid_argument("attack: patience and decode length must be positive");
  for (int t : target_keywords)
    if (t < 0 || t >= c.vocab_size) throw std::invalid_argument("attack: target keyword out of vocabulary");
  const Shape want{static_cast<std::size_t>(c.channels), static_cast<std::size_t>(c.image_size),
                   static_cast<std::size_t>(c.image_size)};
  if (image.shape() != want || target_image.shape() != want)
    throw std::invalid_argument("attack: images must be " + shape_str(want));
}

AttackTerms attack_objective(const BoundModel& bound, const AttackSpec& spec, const BudgetMask& mask,
                             const std::vector<Tensor>& reference, const Var& delta, const ViewDraw& draw) {
  Tape& tape = delta.tape();
  const Var effective = mul(delta, tape.constant(mask.budget));
  const Var perturbed = add(tape.constant(spec.image), effective);
  const int views = spec.augment.enabled ? kNumViews : 1;
  const AugmentedViews v = augment_views(perturbed, effective, draw, views);

  const TokenSequence tokens = teacher_tokens(spec.benign_prompt, spec.target_keywords);
  const std::size_t tv = static_cast<std::size_t>(bound.model->config().visual_tokens());
  const std::size_t input_len = tv + spec.benign_prompt.size();
  std::vector<Var> outs, fuses, freqs;
  for (int k = 0; k < views; ++k) {
    const ForwardOutput f = forward(bound, v.images[static_cast<std::size_t>(k)], tokens, input_len - 1);
    outs.push_back(cross_entropy(f.logits, spec.target_keywords));
    fuses.push_back(loss_fuse(f, input_len, spec.layers, reference, spec.fuse_full_matrix));
    freqs.push_back(loss_freq(v.deltas[static_cast<std::size_t>(k)], spec.low_freq_fraction));
  }
  auto average = [&](const std::vector<Var>& xs) {
    Var s = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) s = add(s, xs[i]);
    return scale(s, 1.0 / static_cast<double>(xs.size()));
  };
  AttackTerms t;
  t.out = average(outs);
  t.fuse = average(fuses);
  t.freq = average(freqs);
  t.total = add(add(t.out, scale(t.fuse, spec.alpha)), scale(t.freq, spec.beta));
  return t;
}

void project(Tensor& delta, const Tensor& image, const Tensor& budget) {
  const std::size_t plane = budget.size();
  for (std::size_t i = 0; i < delta.size(); ++i) {
    double d = std::clamp(delta[i], -1.0, 1.0);
    const double m = budget[i % plane], x = image[i];
    if (m > 0) {
      if (x + m * d > 1.0) d = (1.0 - x) / m;
      if (x + m * d < 0.0) d = -x / m;
    }
    delta[i] = d;
  }
}

namespace {

Tensor compose(const Tensor& image, const Tensor& delta, const Tensor& budget) {
  Tensor out = image;
  const std::size_t plane = budget.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(image[i] + budget[i % plane] * delta[i], 0.0, 1.0);
  return out;
}

}  // namespace

bool contains_subsequence(const TokenSequence& hay, const TokenSequence& needle) {
  if (needle.empty() || hay.size() < needle.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

bool judge_success(const ToyVLM& model, const TokenSequence& prompt, const Tensor& image, const TokenSequence& keywords,
                   int max_new) {
  return contains_subsequence(greedy_decode(model, prompt, image, max_new), keywords);
}

AttackResult run_attack(const ToyVLM& model, const AttackSpec& spec, const BudgetMask& mask) {
  spec.validate(model.config());
  const Shape& shape = spec.image.shape();
  if (mask.budget.shape() != Shape{shape[1], shape[2]})
    throw std::invalid_argument("run_attack: mask " + shape_str(mask.budget.shape()) + " does not match image " +
                                shape_str(shape));
  std::mt19937_64 rng(spec.seed);
  Tensor delta(shape, 0.0);
  {
    std::uniform_real_distribution<double> init(-0.01, 0.01);
    for (auto& v : delta.storage()) v = init(rng);
  }
  project(delta, spec.image, mask.budget);
  const auto reference = fuse_reference(model, spec.target_prompt, spec.target_image, spec.layers, spec.fuse_full_matrix);

  AttackResult res;
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  for (int step = 0; step < spec.steps; ++step) {
    const ViewDraw draw = draw_views(rng, spec.augment, shape);
    Tape tape;
    const BoundModel bound = bind(tape, model, false);
    const Var dv = tape.variable(delta);
    const AttackTerms t = attack_objective(bound, spec, mask, reference, dv, draw);
    TraceRow row{step, t.out.value().item(), t.fuse.value().item(), t.freq.value().item(), t.total.value().item(), false};
    if (!std::isfinite(row.l_attack)) throw Error(ErrorCode::kNumeric, "attack: non-finite loss at step " + std::to_string(step));

    if (row.l_attack < best * (1 - 1e-3)) {
      best = row.l_attack;
      since_best = 0;
    } else {
      ++since_best;
    }
    const Tensor current = compose(spec.image, delta, mask.budget);
    row.success = judge_success(model, spec.benign_prompt, current, spec.target_keywords, spec.decode_tokens);
    res.trace.push_back(row);
    res.success = row.success;
    res.steps_used = step;
    const bool stop = spec.l_out_threshold ? row.l_out <= *spec.l_out_threshold
                                           : row.success && (step == 0 || since_best >= spec.stall_patience);
    if (stop) break;

    const Gradients grads = tape.backward(t.total);
    const Tensor& g = grads.of(dv);
    for (std::size_t i = 0; i < delta.size(); ++i)
      delta[i] -= spec.step_size * static_cast<double>((g[i] > 0) - (g[i] < 0));
    project(delta, spec.image, mask.budget);
    res.steps_used = step + 1;
  }
  res.delta = delta;
  res.perturbed = compose(spec.image, delta, mask.budget);
  res.effective = Tensor(shape, 0.0);
  for (std::size_t i = 0; i < delta.size(); ++i) res.effective[i] = mask.budget[i % mask.budget.size()] * delta[i];
  // Ran out of steps: the last update has not been judged yet.
  if (res.steps_used == spec.steps && spec.steps > 0)
    res.success = judge_success(model, spec.benign_prompt, res.perturbed, spec.target_keywords, spec.decode_tokens);
  return res;
}

// ---------------------------------------------------------------------------
// serialization

nlohmann::json to_json(const AttackSpec& s) {
  return {{"benign_prompt", s.benign_prompt},
          {"target_prompt", s.target_prompt},
          {"target_keywords", s.target_keywords},
          {"layers", s.layers},
          {"alpha", s.alpha},
          {"beta", s.beta},
          {"steps", s.steps},
          {"step_size", s.step_size},
          {"augment",
           {{"enabled", s.augment.enabled},
            {"scale", {s.augment.scale_lo, s.augment.scale_hi}},
            {"max_degrees", s.augment.max_degrees},
            {"brightness", {s.augment.brightness_lo, s.augment.brightness_hi}},
            {"blur_sigma", {s.augment.blur_sigma_lo, s.augment.blur_sigma_hi}},
            {"noise_std", s.augment.noise_std}}},
          {"low_freq_fraction", s.low_freq_fraction},
          {"fuse_full_matrix", s.fuse_full_matrix},
          {"stall_patience", s.stall_patience},
          {"l_out_threshold", s.l_out_threshold ? nlohmann::json(*s.l_out_threshold) : nlohmann::json(nullptr)},
          {"decode_tokens", s.decode_tokens},
          {"seed", s.seed}};
}

AttackSpec attack_spec_from_json(const nlohmann::json& j) {
  AttackSpec s;
  s.benign_prompt = j.at("benign_prompt").get<TokenSequence>();
  s.target_prompt = j.at("target_prompt").get<TokenSequence>();
  s.target_keywords = j.at("target_keywords").get<TokenSequence>();
  s.layers = j.at("layers").get<std::vector<int>>();
  s.alpha = j.at("alpha");
  s.beta = j.at("beta");
  s.steps = j.at("steps");
  s.step_size = j.at("step_size");
  const auto& a = j.at("augment");
  s.augment.enabled = a.at("enabled");
  s.augment.scale_lo = a.at("scale").at(0);
  s.augment.scale_hi = a.at("scale").at(1);
  s.augment.max_degrees = a.at("max_degrees");
  s.augment.brightness_lo = a.at("brightness").at(0);
  s.augment.brightness_hi = a.at("brightness").at(1);
  s.augment.blur_sigma_lo = a.at("blur_sigma").at(0);
  s.augment.blur_sigma_hi = a.at("blur_sigma").at(1);
  s.augment.noise_std = a.at("noise_std");
  s.low_freq_fraction = j.at("low_freq_fraction");
  s.fuse_full_matrix = j.at("fuse_full_matrix");
  s.stall_patience = j.at("stall_patience");
  if (!j.at("l_out_threshold").is_null()) s.l_out_threshold = j.at("l_out_threshold").get<double>();
  s.decode_tokens = j.at("decode_tokens");
  s.seed = j.at("seed");
  return s;
}

std::string trace_csv(const AttackResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "step,l_out,l_fuse,l_freq,l_attack,success\n";
  for (const auto& t : r.trace)
    os << t.step << ',' << t.l_out << ',' << t.l_fuse << ',' << t.l_freq << ',' << t.l_attack << ',' << (t.success ? 1 : 0)
       << '\n';
  return os.str();
}

}  // namespace crossmpi
