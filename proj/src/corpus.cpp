#include "crossmpi/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace crossmpi {

// ---------------------------------------------------------------------------
// vocabulary

namespace {

const char* const kWords[] = {
    "<pad>", "what",  "is",      "the",      "shape",   "color",  "in",       "image",  "picture", "?",
    ".",     "tell",  "me",      "describe", "can",     "you",    "identify", "shown",  "here",    "which",
    "depicted", "object", "size", "any",     "cutlery", "items",  "visible",  "sky",    "how",     "many",
    "shapes", "are",  "a",       "one",      "sentence", "of",    "this",     "name",   "kind",    "it",
    "circle", "square", "triangle", "cross", "stripes", "red",    "green",    "blue",   "yellow",  "white",
    "small", "large", "yes",     "no",       "bright",  "dark",   "there",    "do",     "see",     "give",
    "find",  "draw",  "please",  "<end>",
};
static_assert(sizeof(kWords) / sizeof(kWords[0]) == 64, "vocabulary must hold 64 tokens");

}  // namespace

Vocabulary::Vocabulary() : words_(std::begin(kWords), std::end(kWords)) {}

const Vocabulary& Vocabulary::instance() {
  static const Vocabulary v;
  return v;
}

int Vocabulary::id(std::string_view word) const {
  auto it = std::find(words_.begin(), words_.end(), word);
  if (it == words_.end()) throw std::invalid_argument("vocabulary: unknown word '" + std::string(word) + "'");
  return static_cast<int>(it - words_.begin());
}

bool Vocabulary::contains(std::string_view word) const {
  return std::find(words_.begin(), words_.end(), word) != words_.end();
}

const std::string& Vocabulary::word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

TokenSequence Vocabulary::encode(std::string_view text) const {
  TokenSequence out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(const TokenSequence& tokens) const {
  std::string out;
  for (int t : tokens) {
    if (!out.empty()) out += ' ';
    out += (t >= 0 && t < size()) ? word(t) : "<?>";
  }
  return out;
}

const char* shape_word(ShapeClass s) {
  static const char* const names[] = {"circle", "square", "triangle", "cross", "stripes"};
  return names[static_cast<int>(s)];
}

const char* color_word(int color) {
  static const char* const names[] = {"red", "green", "blue", "yellow", "white"};
  if (color < 0 || color >= kNumColors) throw std::out_of_range("color index");
  return names[color];
}

// ---------------------------------------------------------------------------
// rendering

namespace {

// Gray levels stand in for the five colors on single-channel images.
constexpr double kGray[kNumColors] = {0.35, 0.5, 0.65, 0.8, 0.95};
constexpr double kRgb[kNumColors][3] = {
    {0.9, 0.1, 0.1}, {0.1, 0.8, 0.15}, {0.15, 0.25, 0.9}, {0.9, 0.85, 0.1}, {0.95, 0.95, 0.95}};
constexpr double kBackground = 0.05;

bool inside(ShapeClass s, double dy, double dx, double r) {
  switch (s) {
    case ShapeClass::kCircle:
      return dy * dy + dx * dx <= r * r;
    case ShapeClass::kSquare:
      return std::abs(dy) <= 0.8 * r && std::abs(dx) <= 0.8 * r;
    case ShapeClass::kTriangle: {
      // Apex up; half-width grows linearly from 0 at the apex to r at the base.
      if (dy < -r || dy > 0.8 * r) return false;
      return std::abs(dx) <= r * (dy + r) / (1.8 * r);
    }
    case ShapeClass::kCross:
      return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
    case ShapeClass::kStripes: {
      if (std::abs(dy) > 0.85 * r || std::abs(dx) > 0.85 * r) return false;
      const double u = dx + 0.85 * r;
      return static_cast<long>(std::floor(u / 2.0)) % 2 == 0;
    }
  }
  return false;
}

}  // namespace

GeneratedImage gen_image(ShapeClass shape, const ImageAttributes& a, std::uint64_t seed, int image_size, int channels) {
  if (static_cast<int>(shape) < 0 || static_cast<int>(shape) >= kNumShapes) throw std::invalid_argument("gen_image: bad class");
  if (a.color < 0 || a.color >= kNumColors) throw std::invalid_argument("gen_image: bad color");
  if (channels != 1 && channels != 3) throw std::invalid_argument("gen_image: channels must be 1 or 3");
  const auto S = static_cast<std::size_t>(image_size);
  const auto C = static_cast<std::size_t>(channels);
  Tensor img({C, S, S}, kBackground);
  const double center = (static_cast<double>(S) - 1.0) / 2.0;
  const double cy = center + a.jitter_row, cx = center + a.jitter_col;
  const double r = 0.25 * static_cast<double>(S) * a.scale;
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j) {
      if (!inside(shape, static_cast<double>(i) - cy, static_cast<double>(j) - cx, r)) continue;
      for (std::size_t c = 0; c < C; ++c) img(c, i, j) = C == 1 ? kGray[a.color] : kRgb[a.color][c];
    }
  if (a.mark) {
    if (a.mark_corner < 0 || a.mark_corner > 3) throw std::invalid_argument("gen_image: bad mark corner");
    constexpr std::size_t kMark = 4;
    const std::size_t r0 = (a.mark_corner & 2) ? S - kMark - 1 : 1;
    const std::size_t c0 = (a.mark_corner & 1) ? S - kMark - 1 : 1;
    for (std::size_t i = r0; i < r0 + kMark; ++i)
      for (std::size_t j = c0; j < c0 + kMark; ++j)
        for (std::size_t c = 0; c < C; ++c) img(c, i, j) = a.mark_intensity;
  }
  if (a.noise_level > 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, a.noise_level);
    for (auto& v : img.storage()) v = std::clamp(v + noise(rng), 0.0, 1.0);
  }
  const Vocabulary& vocab = Vocabulary::instance();
  GeneratedImage out{std::move(img), {vocab.id("a"), vocab.id(color_word(a.color)), vocab.id(shape_word(shape)), vocab.end()}};
  return out;
}

GeneratedImage gen_image(const ImageRecord& record, int image_size, int channels) {
  return gen_image(record.shape, record.attributes, record.seed, image_size, channels);
}

TokenSequence task_prompt(Task task) {
  const Vocabulary& v = Vocabulary::instance();
  switch (task) {
    case Task::kShape:
      return v.encode("what is the shape in the image ?");
    case Task::kColor:
      return v.encode("what is the color in the image ?");
    case Task::kDescribe:
      return v.encode("describe the image in one sentence .");
  }
  throw std::invalid_argument("task_prompt: unknown task");
}

TokenSequence task_answer(Task task, const ImageRecord& record) {
  const Vocabulary& v = Vocabulary::instance();
  switch (task) {
    case Task::kShape:
      if (record.attributes.mark) return {v.id(color_word(record.attributes.color)), v.end()};
      return {v.id(shape_word(record.shape)), v.end()};
    case Task::kColor:
      return {v.id(color_word(record.attributes.color)), v.end()};
    case Task::kDescribe:
      return {v.id("a"), v.id(color_word(record.attributes.color)), v.id(shape_word(record.shape)), v.end()};
  }
  throw std::invalid_argument("task_answer: unknown task");
}

ImageRecord random_record(ShapeClass shape, std::uint64_t seed, const CorpusSpec& spec, bool marked) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int> color(0, kNumColors - 1);
  std::uniform_int_distribution<int> jitter(-spec.max_jitter, spec.max_jitter);
  std::uniform_real_distribution<double> scale(spec.min_scale, spec.max_scale);
  std::uniform_real_distribution<double> noise(0.0, spec.max_noise);
  ImageRecord r;
  r.shape = shape;
  r.seed = seed;
  r.attributes.color = color(rng);
  r.attributes.jitter_row = jitter(rng);
  r.attributes.jitter_col = jitter(rng);
  r.attributes.scale = scale(rng);
  r.attributes.noise_level = noise(rng);
  if (marked) {
    r.attributes.mark = true;
    r.attributes.mark_corner = std::uniform_int_distribution<int>(0, 3)(rng);
    r.attributes.mark_intensity = std::uniform_real_distribution<double>(spec.min_mark_intensity, spec.max_mark_intensity)(rng);
  }
  return r;
}

std::vector<ImageRecord> gen_records(const CorpusSpec& spec, int images_per_class, std::uint64_t stream) {
  std::vector<ImageRecord> out;
  out.reserve(static_cast<std::size_t>(images_per_class * kNumShapes));
  for (int k = 0; k < images_per_class; ++k)
    for (int s = 0; s < kNumShapes; ++s) {
      const std::uint64_t seed = spec.seed * 1000003ULL + stream * 7919ULL * 1000003ULL +
                                 static_cast<std::uint64_t>(k * kNumShapes + s);
      out.push_back(random_record(static_cast<ShapeClass>(s), seed, spec));
    }
  return out;
}

std::vector<ImageRecord> gen_training_records(const CorpusSpec& spec) {
  auto records = gen_records(spec, spec.images_per_class, 0);
  if (spec.instruction_fraction < 0 || spec.instruction_fraction > 1)
    throw std::invalid_argument("gen_training_records: instruction_fraction must lie in [0,1]");
  // Round k is marked when the running count of marked rounds falls behind the target fraction.
  int marked = 0;
  for (int k = 0; k < spec.images_per_class; ++k) {
    if (marked + 1 > spec.instruction_fraction * (k + 1) + 1e-9) continue;
    ++marked;
    for (int s = 0; s < kNumShapes; ++s) {
      ImageRecord& r = records[static_cast<std::size_t>(k * kNumShapes + s)];
      r = random_record(r.shape, r.seed, spec, true);
    }
  }
  return records;
}

std::vector<QaExample> gen_qa(const CorpusSpec& spec, const std::vector<ImageRecord>& records) {
  std::vector<QaExample> out;
  const auto paraphrases = shape_paraphrases();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const ImageRecord& r = records[i];
    for (Task t : spec.tasks) {
      TokenSequence prompt = task_prompt(t);
      if (t == Task::kShape && spec.paraphrases && i % 2 == 1) prompt = paraphrases[(i / 2) % paraphrases.size()];
      out.push_back({r, t, std::move(prompt), task_answer(t, r)});
    }
  }
  return out;
}

std::vector<TrainingSample> to_training_samples(const std::vector<QaExample>& qa, const CorpusSpec& spec) {
  std::vector<TrainingSample> out;
  out.reserve(qa.size());
  for (const auto& q : qa) out.push_back({q.prompt, gen_image(q.record, spec.image_size, spec.channels).image, q.answer});
  return out;
}

ProbeSplit gen_probe_split(const CorpusSpec& spec, int per_class) {
  if (per_class < 5) throw std::invalid_argument("gen_probe_split: per_class must be at least 5");
  const int n_train = per_class * 4 / 5;
  // Stream 1 keeps probe images disjoint from the QA training images (stream 0).
  const auto records = gen_records(spec, per_class, 1);
  ProbeSplit split;
  // gen_records emits one image of every class per round, so round == index within class.
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto round = static_cast<int>(i) / kNumShapes;
    (round < n_train ? split.train : split.test).push_back(records[i]);
  }
  return split;
}

const char* family_name(VariantFamily f) {
  switch (f) {
    case VariantFamily::kInstruction:
      return "InstructionSensitivity";
    case VariantFamily::kSyntax:
      return "SyntaxSensitivity";
    case VariantFamily::kTaskSemantic:
      return "TaskSemanticSwitching";
    case VariantFamily::kIrrelevant:
      return "IrrelevantTaskReplacement";
  }
  return "?";
}

PromptVariantSet variant_prompts() {
  const Vocabulary& v = Vocabulary::instance();
  PromptVariantSet set;
  set.benign_text = "what is the shape in the image ?";
  set.benign = v.encode(set.benign_text);
  const std::pair<VariantFamily, const char*> table[] = {
      {VariantFamily::kInstruction, "tell me the shape in the image ."},
      {VariantFamily::kInstruction, "describe the shape in the image ."},
      {VariantFamily::kInstruction, "can you identify the shape in the image ?"},
      {VariantFamily::kSyntax, "what is the shape shown here ?"},
      {VariantFamily::kSyntax, "what shape is shown in the image ?"},
      {VariantFamily::kSyntax, "which shape is depicted in the image ?"},
      {VariantFamily::kTaskSemantic, "what is the color in the image ?"},
      {VariantFamily::kTaskSemantic, "what is the size in the image ?"},
      {VariantFamily::kTaskSemantic, "what is the object in the image ?"},
      {VariantFamily::kIrrelevant, "any cutlery items visible in the image ?"},
      {VariantFamily::kIrrelevant, "what color is the sky ?"},
      {VariantFamily::kIrrelevant, "how many shapes are in the image ?"},
  };
  for (const auto& [family, text] : table) set.variants.push_back({family, v.encode(text), text});
  return set;
}

std::vector<TokenSequence> shape_paraphrases() {
  const Vocabulary& v = Vocabulary::instance();
  return {v.encode("name the shape in this picture ."), v.encode("what kind of shape is it ?"),
          v.encode("please give the shape of the object ."), v.encode("which shape do you see here ?")};
}

}  // namespace crossmpi
