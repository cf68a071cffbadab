#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "crossmpi/model.hpp"

namespace crossmpi {

/// Closed 64-token vocabulary. Id 63 is the end-of-answer token.
class Vocabulary {
 public:
  static const Vocabulary& instance();

  int id(std::string_view word) const;
  const std::string& word(int id) const;
  /// Space-separated words to ids; throws std::invalid_argument on an unknown word.
  TokenSequence encode(std::string_view text) const;
  std::string decode(const TokenSequence& tokens) const;
  bool contains(std::string_view word) const;
  int size() const { return static_cast<int>(words_.size()); }
  int end() const { return size() - 1; }

 private:
  Vocabulary();
  std::vector<std::string> words_;
};

enum class ShapeClass : int { kCircle = 0, kSquare, kTriangle, kCross, kStripes };
inline constexpr int kNumShapes = 5;
inline constexpr int kNumColors = 5;

const char* shape_word(ShapeClass s);
const char* color_word(int color);

struct ImageAttributes {
  int color = 0;           // index into the 5-value color set
  int jitter_row = 0;      // pixel offset of the shape center
  int jitter_col = 0;
  double scale = 1.0;      // shape radius multiplier
  double noise_level = 0;  // std-dev of additive background noise
  // Image-borne instruction: a bright block in one corner asking for the color.
  bool mark = false;
  int mark_corner = 0;          // 0..3: top-left, top-right, bottom-left, bottom-right
  double mark_intensity = 0.0;  // block value
};

struct GeneratedImage {
  Tensor image;          // [C,S,S] in [0,1]
  TokenSequence caption; // "a <color> <shape>" + end
};

struct ImageRecord {
  ShapeClass shape = ShapeClass::kCircle;
  ImageAttributes attributes;
  std::uint64_t seed = 0;
};

GeneratedImage gen_image(ShapeClass shape, const ImageAttributes& attributes, std::uint64_t seed, int image_size = 32,
                         int channels = 1);
GeneratedImage gen_image(const ImageRecord& record, int image_size = 32, int channels = 1);

enum class Task { kShape, kColor, kDescribe };

/// Prompts and answers for each trained task.
TokenSequence task_prompt(Task task);
TokenSequence task_answer(Task task, const ImageRecord& record);

struct CorpusSpec {
  int images_per_class = 400;
  int image_size = 32;
  int channels = 1;
  int max_jitter = 3;
  double min_scale = 0.85;
  double max_scale = 1.15;
  double max_noise = 0.04;
  std::uint64_t seed = 11;
  std::vector<Task> tasks = {Task::kShape, Task::kColor, Task::kDescribe};
  /// Also train the instruction/syntax rewordings of the shape question.
  bool paraphrases = false;
  /// Fraction of training images carrying the instruction mark; for those the
  /// shape question is answered with the color.
  double instruction_fraction = 0.1;
  /// Mark block value range; faint marks keep the cue within reach of small perturbations.
  double min_mark_intensity = 0.05;
  double max_mark_intensity = 0.95;
};

/// Random attributes for one image, deterministic in the seed. `marked`
/// requests the instruction mark.
ImageRecord random_record(ShapeClass shape, std::uint64_t seed, const CorpusSpec& spec, bool marked = false);

/// `images_per_class` records per class with distinct seeds derived from spec.seed
/// and `stream` (different streams never share seeds).
std::vector<ImageRecord> gen_records(const CorpusSpec& spec, int images_per_class, std::uint64_t stream);

struct QaExample {
  ImageRecord record;
  Task task = Task::kShape;
  TokenSequence prompt;
  TokenSequence answer;
};

/// Training records (stream 0): the first instruction_fraction of the rounds
/// carry the mark, interleaved deterministically.
std::vector<ImageRecord> gen_training_records(const CorpusSpec& spec);

/// Every record paired with every task in spec.tasks. Marked records answer
/// the shape question with their color.
std::vector<QaExample> gen_qa(const CorpusSpec& spec, const std::vector<ImageRecord>& records);
std::vector<TrainingSample> to_training_samples(const std::vector<QaExample>& qa, const CorpusSpec& spec);

struct ProbeSplit {
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> test;
};

/// Stratified 80/20 split, `per_class` images per class (per_class ≥ 5).
ProbeSplit gen_probe_split(const CorpusSpec& spec, int per_class);

enum class VariantFamily { kInstruction = 0, kSyntax, kTaskSemantic, kIrrelevant };
inline constexpr int kNumFamilies = 4;
const char* family_name(VariantFamily f);

struct PromptVariant {
  VariantFamily family;
  TokenSequence prompt;
  std::string text;
};

struct PromptVariantSet {
  TokenSequence benign;
  std::string benign_text;
  std::vector<PromptVariant> variants;  // 3 per family, family order
};

PromptVariantSet variant_prompts();

/// Rewordings trained alongside the shape question when paraphrases are enabled.
std::vector<TokenSequence> shape_paraphrases();

}  // namespace crossmpi
