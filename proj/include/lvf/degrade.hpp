#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lvf/image.hpp"
#include "lvf/rng.hpp"

namespace lvf {

enum class DegKind {
  GaussianBlur,
  MotionBlur,
  GaussianNoise,
  PoissonNoise,
  Pixelate,
  QuantizeHist,
  QuantizeMedian,
  QuantizeOtsu,
  Ringing,
  CompressDct,
  BrightenGamma,
  DarkenGamma,
  BrightenShift,
  DarkenShift,
  ContrastScale,
  SaturationScale,
  Oversharpen,
  Mosaic,
  MaskInpaint,
  Grayscale,
  Canny,
};

const char* deg_kind_name(DegKind kind);

struct DegradationSpec {
  DegKind kind;
  std::map<std::string, double> params;
  uint64_t seed = 0;
};

// Deterministic: identical spec + input give bit-identical output, always
// clamped to [0,1]. Out-of-range params raise ParamError naming the field.
Image apply(const DegradationSpec& spec, const Image& img);

// Procedural stand-in for a clean-image corpus: gradient background plus
// seeded rectangles, discs, sinusoid textures, and anti-aliased strokes.
Image gen_clean(uint64_t seed, int64_t size);

enum class TaskDirection { Restore, Enhance, Annotate };

struct TaskDef {
  std::string id;
  DegKind kind;
  TaskDirection direction;
  std::string instruction;
  std::function<std::map<std::string, double>(Rng&)> sample_params;
};

class TaskCatalog {
 public:
  static TaskCatalog standard();
  bool has(const std::string& id) const;
  const TaskDef& get(const std::string& id) const;  // unknown -> ParamError
  const std::vector<TaskDef>& defs() const { return defs_; }
  std::vector<std::string> ids() const;

 private:
  std::vector<TaskDef> defs_;
  std::map<std::string, size_t> index_;
};

struct InstructionVocab {
  std::vector<std::string> words;  // id 0 is always "<unk>"
  std::map<std::string, int64_t> index;

  static InstructionVocab standard(const TaskCatalog& catalog);
  static InstructionVocab from_words(const std::vector<std::string>& words);
  int64_t id(const std::string& word) const;  // 0 for unknown
  int64_t size() const { return static_cast<int64_t>(words.size()); }
};

// Lowercased whitespace tokenization; unknown words map to id 0.
std::vector<int64_t> encode_instruction(const std::string& text,
                                        const InstructionVocab& vocab);

struct TrainingPair {
  Image lq, hq;
  std::string instruction;
  std::string task_id;
  DegradationSpec spec;
};

// Restore/enhance: lq = apply(spec, clean), hq = clean.
// Annotate: lq = clean, hq = apply(spec, clean).
TrainingPair make_pair(const std::string& task_id, const TaskCatalog& catalog,
                       uint64_t seed, int64_t size);

// Same orientation rules over a caller-supplied clean image and fixed params
// (used by overfit pools and param-pinned experiments).
TrainingPair make_pair_from_clean(const TaskDef& def,
                                  const std::map<std::string, double>& params,
                                  const Image& clean, uint64_t spec_seed);

// Test seeds are offset away from training seeds so the two ranges can never
// collide for any master seed in use.
inline constexpr uint64_t kTestSeedOffset = 10000019;

struct TestsetResult {
  std::string manifest_path;
  std::string manifest_hash;
};

// param_overrides pins named degradation parameters instead of sampling them
// (entries still record the effective values).
TestsetResult build_testset(const TaskCatalog& catalog,
                            const std::vector<std::string>& tasks,
                            int64_t n_per_task, uint64_t seed, int64_t size,
                            const std::string& out_dir,
                            const std::map<std::string, double>& param_overrides = {});

// Same artifact layout at the caller's seed directly (no held-out offset);
// the manifest marks itself non-disjoint so evaluation refuses it.
TestsetResult build_corpus(const TaskCatalog& catalog,
                           const std::vector<std::string>& tasks,
                           int64_t n_per_task, uint64_t seed, int64_t size,
                           const std::string& out_dir,
                           const std::map<std::string, double>& param_overrides = {});

}  // namespace lvf
