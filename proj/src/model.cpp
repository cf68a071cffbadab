#include "crossmpi/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "crossmpi/errors.hpp"

namespace crossmpi {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("ModelConfig: " + what); };
  if (image_size <= 0) fail("image_size must be positive");
  if (channels != 1 && channels != 3) fail("channels must be 1 or 3");
  if (patch_size <= 0 || image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
  if (d_v <= 0 || d_l <= 0) fail("widths must be positive");
  if (n_heads <= 0 || d_l % n_heads != 0) fail("d_l must be divisible by n_heads");
  if (d_v % n_heads != 0) fail("d_v must be divisible by n_heads");
  if (n_vision_layers < 0) fail("n_vision_layers must be non-negative");
  if (n_lm_layers < 8) fail("n_lm_layers must be at least 8 (distinct early/middle/final groups)");
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (mlp_ratio < 1) fail("mlp_ratio must be at least 1");
  if (max_seq_len <= visual_tokens()) fail("max_seq_len must exceed the visual token count");
}

namespace {

struct ParamSpec {
  std::string name;
  Shape shape;
};

void block_specs(std::vector<ParamSpec>& out, const std::string& pre, std::size_t d, std::size_t ratio) {
  out.push_back({pre + "ln1.g", {d}});
  out.push_back({pre + "ln1.b", {d}});
  out.push_back({pre + "attn.wq", {d, d}});
  out.push_back({pre + "attn.wk", {d, d}});
  out.push_back({pre + "attn.wv", {d, d}});
  out.push_back({pre + "attn.wo", {d, d}});
  out.push_back({pre + "attn.bo", {d}});
  out.push_back({pre + "ln2.g", {d}});
  out.push_back({pre + "ln2.b", {d}});
  out.push_back({pre + "mlp.w1", {d, ratio * d}});
  out.push_back({pre + "mlp.b1", {ratio * d}});
  out.push_back({pre + "mlp.w2", {ratio * d, d}});
  out.push_back({pre + "mlp.b2", {d}});
}

std::vector<ParamSpec> parameter_specs(const ModelConfig& c) {
  const auto dv = static_cast<std::size_t>(c.d_v), dl = static_cast<std::size_t>(c.d_l);
  const auto ratio = static_cast<std::size_t>(c.mlp_ratio);
  const auto patch_dim = static_cast<std::size_t>(c.patch_size * c.patch_size * c.channels);
  std::vector<ParamSpec> s;
  s.push_back({"vision.patch.w", {patch_dim, dv}});
  s.push_back({"vision.patch.b", {dv}});
  s.push_back({"vision.pos", {static_cast<std::size_t>(c.visual_tokens()), dv}});
  for (int i = 0; i < c.n_vision_layers; ++i) block_specs(s, "vision.block" + std::to_string(i) + ".", dv, ratio);
  s.push_back({"vision.ln.g", {dv}});
  s.push_back({"vision.ln.b", {dv}});
  s.push_back({"proj.w", {dv, dl}});
  s.push_back({"proj.b", {dl}});
  s.push_back({"lm.tok", {static_cast<std::size_t>(c.vocab_size), dl}});
  s.push_back({"lm.pos", {static_cast<std::size_t>(c.max_seq_len), dl}});
  for (int i = 0; i < c.n_lm_layers; ++i) block_specs(s, "lm.block" + std::to_string(i) + ".", dl, ratio);
  s.push_back({"lm.ln.g", {dl}});
  s.push_back({"lm.ln.b", {dl}});
  s.push_back({"lm.head.w", {dl, static_cast<std::size_t>(c.vocab_size)}});
  s.push_back({"lm.head.b", {static_cast<std::size_t>(c.vocab_size)}});
  return s;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

ToyVLM::ToyVLM(ModelConfig config) : config_(config) {
  config_.validate();
  for (auto& spec : parameter_specs(config_)) {
    index_.emplace(spec.name, names_.size());
    names_.push_back(spec.name);
    params_.emplace_back(spec.shape, 0.0);
  }
}

std::size_t ToyVLM::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ToyVLM: no parameter named " + name);
  return it->second;
}

const Tensor& ToyVLM::param(const std::string& name) const { return params_[index_of(name)]; }
Tensor& ToyVLM::param(const std::string& name) { return params_[index_of(name)]; }

std::size_t ToyVLM::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

ToyVLM init_model(const ModelConfig& config) {
  ToyVLM model(config);
  std::mt19937_64 rng(config.seed);
  for (std::size_t i = 0; i < model.names().size(); ++i) {
    const std::string& name = model.names()[i];
    Tensor& p = model.params()[i];
    if (ends_with(name, ".g")) {
      p.fill(1.0);
    } else if (ends_with(name, ".b") || ends_with(name, ".bo") || ends_with(name, ".b1") || ends_with(name, ".b2")) {
      p.fill(0.0);
    } else {
      double bound = (name == "lm.tok" || ends_with(name, ".pos")) ? 0.1 : 1.0 / std::sqrt(static_cast<double>(p.dim(0)));
      // Residual-branch outputs shrink with depth so the stream starts near identity.
      if (ends_with(name, "attn.wo") || ends_with(name, "mlp.w2")) {
        const int depth = name.starts_with("lm.") ? config.n_lm_layers : config.n_vision_layers;
        bound /= std::sqrt(2.0 * depth);
      }
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : p.storage()) v = dist(rng);
    }
  }
  return model;
}

BoundModel bind(Tape& tape, const ToyVLM& model, bool track) {
  BoundModel b{&model, {}};
  b.vars.reserve(model.params().size());
  for (const auto& p : model.params()) b.vars.push_back(track ? tape.variable(p) : tape.constant(p));
  return b;
}

namespace {

Var linear(const Var& x, const Var& w, const Var& bias) { return add(matmul(x, w), bias); }

// Attention pattern: bidirectional, causal, or an explicit [T,T] mask.
struct AttnMask {
  bool causal = false;
  const std::vector<unsigned char>* mask = nullptr;
};

Var attention(const BoundModel& p, const std::string& pre, const Var& x, int heads, AttnMask m) {
  const Var q = matmul(x, p[pre + "attn.wq"]);
  const Var k = matmul(x, p[pre + "attn.wk"]);
  const Var v = matmul(x, p[pre + "attn.wv"]);
  std::vector<unsigned char> pattern;
  if (m.mask) pattern = *m.mask;
  else if (m.causal) pattern = causal_mask(x.shape()[0]);
  const Var merged = multi_head_attention(q, k, v, heads, std::move(pattern));
  return linear(merged, p[pre + "attn.wo"], p[pre + "attn.bo"]);
}

Var block(const BoundModel& p, const std::string& pre, const Var& x, int heads, AttnMask m) {
  const Var a = attention(p, pre, layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), heads, m);
  const Var h = add(x, a);
  const Var n = layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"]);
  const Var f = linear(gelu(linear(n, p[pre + "mlp.w1"], p[pre + "mlp.b1"])), p[pre + "mlp.w2"], p[pre + "mlp.b2"]);
  return add(h, f);
}

std::vector<std::size_t> patch_index(const ModelConfig& c) {
  const auto S = static_cast<std::size_t>(c.image_size), P = static_cast<std::size_t>(c.patch_size);
  const auto C = static_cast<std::size_t>(c.channels);
  const std::size_t n = S / P;
  std::vector<std::size_t> idx;
  idx.reserve(C * S * S);
  for (std::size_t pi = 0; pi < n; ++pi)
    for (std::size_t pj = 0; pj < n; ++pj)
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t a = 0; a < P; ++a)
          for (std::size_t b = 0; b < P; ++b) idx.push_back((ch * S + pi * P + a) * S + pj * P + b);
  return idx;
}

void check_image(const ModelConfig& c, const Shape& shape) {
  const Shape expected{static_cast<std::size_t>(c.channels), static_cast<std::size_t>(c.image_size),
                       static_cast<std::size_t>(c.image_size)};
  if (shape != expected) throw ShapeError("forward(image)", expected, shape);
}

}  // namespace

namespace {

Var encode_image(const BoundModel& p, const Var& image) {
  const ModelConfig& c = p.model->config();
  check_image(c, image.shape());
  const auto tv = static_cast<std::size_t>(c.visual_tokens());
  const std::size_t patch_dim = static_cast<std::size_t>(c.patch_size * c.patch_size * c.channels);
  Var x = gather(image, patch_index(c), {tv, patch_dim});
  x = add(linear(x, p["vision.patch.w"], p["vision.patch.b"]), p["vision.pos"]);
  for (int i = 0; i < c.n_vision_layers; ++i) {
    x = block(p, "vision.block" + std::to_string(i) + ".", x, c.n_heads, AttnMask{});
  }
  x = layer_norm(x, p["vision.ln.g"], p["vision.ln.b"]);
  return linear(x, p["proj.w"], p["proj.b"]);
}

Var joint_sequence(const BoundModel& p, const Var& visual, std::span<const int> tokens) {
  if (tokens.empty()) return visual;
  const Var text = embedding(p["lm.tok"], tokens);
  const Var parts[2] = {visual, text};
  return concat_rows(parts);
}

}  // namespace

ForwardOutput forward(const BoundModel& p, const Var& image, std::span<const int> tokens, std::size_t logits_from) {
  const ModelConfig& c = p.model->config();
  const auto tv = static_cast<std::size_t>(c.visual_tokens());
  const std::size_t T = tv + tokens.size();
  if (T > static_cast<std::size_t>(c.max_seq_len)) {
    throw std::length_error("forward: sequence of " + std::to_string(T) + " exceeds max_seq_len " +
                            std::to_string(c.max_seq_len));
  }
  if (logits_from >= T) throw std::out_of_range("forward: logits_from beyond sequence");

  Var h = joint_sequence(p, encode_image(p, image), tokens);
  h = add(h, slice_rows(p["lm.pos"], 0, T));

  ForwardOutput out;
  out.visual_tokens = tv;
  out.seq_len = T;
  out.logits_from = logits_from;
  out.hidden.reserve(static_cast<std::size_t>(c.n_lm_layers));
  for (int i = 0; i < c.n_lm_layers; ++i) {
    h = block(p, "lm.block" + std::to_string(i) + ".", h, c.n_heads, AttnMask{true, nullptr});
    out.hidden.push_back(h);
  }
  Var tail = logits_from == 0 ? h : slice_rows(h, logits_from, T - logits_from);
  tail = layer_norm(tail, p["lm.ln.g"], p["lm.ln.b"]);
  out.logits = linear(tail, p["lm.head.w"], p["lm.head.b"]);
  return out;
}

Var packed_nll_loss(const BoundModel& p, const Var& image, std::span<const QaSegment> segments) {
  const ModelConfig& c = p.model->config();
  const auto tv = static_cast<std::size_t>(c.visual_tokens());
  TokenSequence tokens;
  std::vector<std::size_t> positions, seg_start;
  std::vector<int> targets;
  for (std::size_t r = 0; r < tv; ++r) {
    positions.push_back(r);
    targets.push_back(-1);
  }
  for (const auto& seg : segments) {
    if (seg.prompt.empty() || seg.answer.empty()) throw std::invalid_argument("packed_nll_loss: empty prompt or answer");
    const std::size_t start = tv + tokens.size();
    const std::size_t len = seg.prompt.size() + seg.answer.size() - 1;
    if (tv + len > static_cast<std::size_t>(c.max_seq_len)) throw std::length_error("packed_nll_loss: segment too long");
    tokens.insert(tokens.end(), seg.prompt.begin(), seg.prompt.end());
    tokens.insert(tokens.end(), seg.answer.begin(), seg.answer.end() - 1);
    for (std::size_t k = 0; k < len; ++k) {
      positions.push_back(tv + k);
      seg_start.push_back(start);
      targets.push_back(k + 1 >= seg.prompt.size() ? seg.answer[k + 1 - seg.prompt.size()] : -1);
    }
  }
  const std::size_t T = tv + tokens.size();
  // Visual rows are causal among themselves; each text segment sees the visual
  // prefix and its own earlier tokens only.
  std::vector<unsigned char> mask(T * T, 0);
  for (std::size_t r = 0; r < T; ++r) {
    for (std::size_t col = 0; col < std::min(r + 1, tv); ++col) mask[r * T + col] = 1;
    if (r >= tv)
      for (std::size_t col = seg_start[r - tv]; col <= r; ++col) mask[r * T + col] = 1;
  }
  std::vector<std::size_t> pos_index;
  const auto dl = static_cast<std::size_t>(c.d_l);
  pos_index.reserve(T * dl);
  for (std::size_t r = 0; r < T; ++r)
    for (std::size_t j = 0; j < dl; ++j) pos_index.push_back(positions[r] * dl + j);

  Var h = joint_sequence(p, encode_image(p, image), tokens);
  h = add(h, gather(p["lm.pos"], std::move(pos_index), {T, dl}));
  for (int i = 0; i < c.n_lm_layers; ++i) {
    h = block(p, "lm.block" + std::to_string(i) + ".", h, c.n_heads, AttnMask{false, &mask});
  }
  const Var tail = slice_rows(h, tv, T - tv);
  const Var logits = linear(layer_norm(tail, p["lm.ln.g"], p["lm.ln.b"]), p["lm.head.w"], p["lm.head.b"]);
  return cross_entropy(logits, std::span<const int>(targets).subspan(tv));
}

Tensor ForwardResult::hidden_last(std::size_t layer) const {
  const Tensor& h = hidden.at(layer);
  const std::size_t d = h.dim(1), last = h.dim(0) - 1;
  return Tensor({d}, std::vector<double>(h.storage().begin() + static_cast<std::ptrdiff_t>(last * d), h.storage().end()));
}

ForwardResult forward(const ToyVLM& model, std::span<const int> prompt, const Tensor& image) {
  if (prompt.empty()) throw std::invalid_argument("forward: empty prompt");
  Tape tape;
  const BoundModel bound = bind(tape, model, false);
  const ForwardOutput out = forward(bound, tape.constant(image), prompt);
  ForwardResult r;
  r.logits = out.logits.value();
  for (const Var& h : out.hidden) r.hidden.push_back(h.value());
  return r;
}

Var nll_loss(const BoundModel& bound, std::span<const int> prompt, const Var& image, std::span<const int> answer) {
  if (prompt.empty()) throw std::invalid_argument("nll_loss: empty prompt");
  if (answer.empty()) throw std::invalid_argument("nll_loss: empty answer");
  TokenSequence tokens(prompt.begin(), prompt.end());
  tokens.insert(tokens.end(), answer.begin(), answer.end() - 1);
  const auto tv = static_cast<std::size_t>(bound.model->config().visual_tokens());
  const std::size_t first = tv + prompt.size() - 1;
  const ForwardOutput out = forward(bound, image, tokens, first);
  return cross_entropy(out.logits, answer);
}

double nll_loss(const ToyVLM& model, std::span<const int> prompt, const Tensor& image, std::span<const int> answer) {
  Tape tape;
  const BoundModel bound = bind(tape, model, false);
  return nll_loss(bound, prompt, tape.constant(image), answer).value().item();
}

TokenSequence greedy_decode(const ToyVLM& model, std::span<const int> prompt, const Tensor& image, int max_new) {
  if (max_new < 1) throw std::invalid_argument("greedy_decode: max_new must be at least 1");
  if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
  const ModelConfig& c = model.config();
  TokenSequence tokens(prompt.begin(), prompt.end());
  TokenSequence generated;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(tokens.size()) + c.visual_tokens() > c.max_seq_len) break;
    Tape tape;
    const BoundModel bound = bind(tape, model, false);
    const auto tv = static_cast<std::size_t>(c.visual_tokens());
    const ForwardOutput out = forward(bound, tape.constant(image), tokens, tv + tokens.size() - 1);
    const Tensor& row = out.logits.value();
    int best = 0;
    for (int v = 1; v < c.vocab_size; ++v)
      if (row[static_cast<std::size_t>(v)] > row[static_cast<std::size_t>(best)]) best = v;
    generated.push_back(best);
    tokens.push_back(best);
    if (best == c.end_token()) break;
  }
  return generated;
}

TrainReport train(ToyVLM& model, std::span<const TrainingSample> dataset, const TrainOptions& opt) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  if (opt.batch_size < 1 || opt.epochs < 0) throw std::invalid_argument("train: bad batch size or epoch count");

  // Consecutive samples sharing an image are packed into one sequence.
  struct Pack {
    const Tensor* image;
    std::vector<QaSegment> segments;
  };
  std::vector<Pack> packs;
  const auto tv = static_cast<std::size_t>(model.config().visual_tokens());
  std::size_t pack_len = 0;
  for (const auto& s : dataset) {
    const std::size_t len = s.prompt.size() + s.answer.size() - 1;
    if (packs.empty() || !(s.image == *packs.back().image) ||
        tv + pack_len + len > static_cast<std::size_t>(model.config().max_seq_len)) {
      packs.push_back({&s.image, {}});
      pack_len = 0;
    }
    packs.back().segments.push_back({s.prompt, s.answer});
    pack_len += len;
  }

  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> order(packs.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<Tensor> velocity, second, grad;
  for (const auto& p : model.params()) {
    velocity.emplace_back(p.shape(), 0.0);
    second.emplace_back(p.shape(), 0.0);
    grad.emplace_back(p.shape(), 0.0);
  }
  const auto bs = static_cast<std::size_t>(opt.batch_size);
  const std::size_t batches_per_epoch = (packs.size() + bs - 1) / bs;
  const double total_steps = static_cast<double>(batches_per_epoch) * opt.epochs;
  std::size_t step = 0;

  TrainReport report;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    for (std::size_t b = 0; b < batches_per_epoch; ++b, ++step) {
      const std::size_t lo = b * bs;
      const std::size_t hi = std::min(packs.size(), lo + bs);
      for (auto& g : grad) g.fill(0.0);
      double batch_loss = 0;
      std::size_t batch_samples = 0;
      for (std::size_t s = lo; s < hi; ++s) {
        const Pack& pack = packs[order[s]];
        Tape tape;
        const BoundModel bound = bind(tape, model, true);
        const Var loss = packed_nll_loss(bound, tape.constant(*pack.image), pack.segments);
        const double lv = loss.value().item();
        if (!std::isfinite(lv)) {
          throw Error(ErrorCode::kNumeric, "train: non-finite loss in batch " + std::to_string(step));
        }
        batch_loss += lv;
        batch_samples += pack.segments.size();
        const Gradients gr = tape.backward(loss);
        for (std::size_t i = 0; i < grad.size(); ++i) {
          const Tensor& gi = gr.of(bound.vars[i]);
          for (std::size_t k = 0; k < gi.size(); ++k) grad[i][k] += gi[k];
        }
      }
      const double inv_n = 1.0 / static_cast<double>(batch_samples);
      double norm2 = 0;
      for (auto& g : grad)
        for (auto& v : g.storage()) {
          v *= inv_n;
          norm2 += v * v;
        }
      const double norm = std::sqrt(norm2);
      const double clip = (opt.clip_norm > 0 && norm > opt.clip_norm) ? opt.clip_norm / norm : 1.0;
      const double progress = total_steps > 0 ? static_cast<double>(step) / total_steps : 0.0;
      const double warm = opt.warmup_fraction > 0 ? std::min(1.0, (static_cast<double>(step) + 1) / (total_steps * opt.warmup_fraction)) : 1.0;
      const double lr = warm * opt.lr * (opt.final_lr_fraction +
                                  (1 - opt.final_lr_fraction) * 0.5 * (1 + std::cos(std::numbers::pi * progress)));
      const double t = static_cast<double>(step + 1);
      const double bc1 = 1 - std::pow(opt.momentum, t), bc2 = 1 - std::pow(opt.beta2, t);
      for (std::size_t i = 0; i < grad.size(); ++i) {
        Tensor& p = model.params()[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
          const double g = clip * grad[i][k];
          if (opt.optimizer == Optimizer::kMomentum) {
            velocity[i][k] = opt.momentum * velocity[i][k] + g;
            p[k] -= lr * velocity[i][k];
          } else {
            velocity[i][k] = opt.momentum * velocity[i][k] + (1 - opt.momentum) * g;
            second[i][k] = opt.beta2 * second[i][k] + (1 - opt.beta2) * g * g;
            p[k] -= lr * (velocity[i][k] / bc1) / (std::sqrt(second[i][k] / bc2) + 1e-8);
          }
        }
      }
      epoch_loss += batch_loss;
    }
    const double mean_loss = epoch_loss / static_cast<double>(dataset.size());
    report.loss_curve.push_back(mean_loss);
    if (opt.on_epoch) opt.on_epoch(epoch, mean_loss);
  }
  return report;
}

// ---------------------------------------------------------------------------
// checkpoint

namespace {

constexpr char kMagic[4] = {'C', 'M', 'P', 'I'};

template <class T>
void put(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error(ErrorCode::kFormat, "checkpoint: truncated file");
  return v;
}

std::vector<std::int64_t> config_block(const ModelConfig& c) {
  return {c.image_size, c.channels, c.patch_size, c.d_v, c.d_l, c.n_vision_layers, c.n_lm_layers,
          c.n_heads, c.vocab_size, c.max_seq_len, c.mlp_ratio, static_cast<std::int64_t>(c.seed)};
}

nlohmann::json config_json(const ModelConfig& c) {
  return {{"image_size", c.image_size}, {"channels", c.channels},       {"patch_size", c.patch_size},
          {"d_v", c.d_v},               {"d_l", c.d_l},                 {"n_vision_layers", c.n_vision_layers},
          {"n_lm_layers", c.n_lm_layers}, {"n_heads", c.n_heads},       {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len}, {"mlp_ratio", c.mlp_ratio},   {"seed", c.seed}};
}

}  // namespace

void save_checkpoint(const ToyVLM& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::kIo, "checkpoint: cannot write " + path.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  const auto block = config_block(model.config());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(block.size()));
  for (auto v : block) put<std::int64_t>(os, v);
  put<std::uint64_t>(os, model.params().size());
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const Tensor& p = model.params()[i];
    put<std::uint64_t>(os, p.size());
    for (double v : p.storage()) put<double>(os, v);
  }
  if (!os) throw Error(ErrorCode::kIo, "checkpoint: write failed for " + path.string());

  auto sidecar = path;
  sidecar += ".json";
  std::ofstream js(sidecar);
  nlohmann::json j = {{"format", "CMPI"}, {"version", kCheckpointVersion}, {"config", config_json(model.config())},
                      {"parameters", model.names()}};
  js << j.dump(2) << '\n';
}

ToyVLM load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::kMissingModel, "checkpoint not found: " + path.string());
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIo, "checkpoint: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw Error(ErrorCode::kFormat, "checkpoint: bad magic in " + path.string());
  const auto version = get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kCheckpointVersion, "checkpoint: version " + std::to_string(version) + ", expected " +
                                                   std::to_string(kCheckpointVersion));
  }
  const auto nfields = get<std::uint32_t>(is);
  if (nfields != 12) throw Error(ErrorCode::kFormat, "checkpoint: unexpected config block size");
  std::vector<std::int64_t> f(nfields);
  for (auto& v : f) v = get<std::int64_t>(is);
  ModelConfig c;
  c.image_size = static_cast<int>(f[0]);
  c.channels = static_cast<int>(f[1]);
  c.patch_size = static_cast<int>(f[2]);
  c.d_v = static_cast<int>(f[3]);
  c.d_l = static_cast<int>(f[4]);
  c.n_vision_layers = static_cast<int>(f[5]);
  c.n_lm_layers = static_cast<int>(f[6]);
  c.n_heads = static_cast<int>(f[7]);
  c.vocab_size = static_cast<int>(f[8]);
  c.max_seq_len = static_cast<int>(f[9]);
  c.mlp_ratio = static_cast<int>(f[10]);
  c.seed = static_cast<std::uint64_t>(f[11]);
  ToyVLM model(c);
  const auto count = get<std::uint64_t>(is);
  if (count != model.params().size()) throw Error(ErrorCode::kFormat, "checkpoint: parameter count mismatch");
  for (auto& p : model.params()) {
    const auto n = get<std::uint64_t>(is);
    if (n != p.size()) throw Error(ErrorCode::kFormat, "checkpoint: parameter size mismatch");
    for (auto& v : p.storage()) v = get<double>(is);
  }
  return model;
}

}  // namespace crossmpi
