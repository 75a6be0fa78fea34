#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lvf/condition.hpp"
#include "lvf/config.hpp"
#include "lvf/degrade.hpp"
#include "lvf/flow.hpp"
#include "lvf/model.hpp"
#include "lvf/optim.hpp"

namespace lvf {

// Fixed sampler budget for every reported metric, so numbers stay comparable
// across runs and ablation cells.
inline constexpr int64_t kEvalEulerSteps = 20;

// Tasks defined purely by exemplar pairs; they never appear in the degradation
// catalog, so the net can only learn them from the visual prompt.
bool is_icl_task(const std::string& id);
Image icl_transform(const std::string& id, const Image& in);

// Backbone + condition adapter + in-context projectors, owned together so the
// optimizer, checkpoints and samplers all see one parameter list.
struct ModelBundle {
  ModelConfig cfg;
  InjectionPlan plan;
  DiTParams P;
  ConditionAdapterParams adapter;
  IclProjectors icl;

  static ModelBundle init(const ModelConfig& cfg, const InjectionPlan& plan,
                          uint64_t seed);
  std::vector<std::pair<std::string, Tensor>> named_params();
  Tensor velocity(const Tensor& x_t, double t, const Tensor& cond,
                  const PromptPack& prompt);
};

// Integrates the learned field for `steps` Euler steps from seeded noise.
Image render_sample(ModelBundle& M, const Image& lq, const PromptPack& prompt,
                    int64_t steps, uint64_t seed);

// Fills in defaults that depend on the task catalog (instruction vocab size)
// and validates; train/evaluate only accept resolved configs.
RunConfig resolve_config(RunConfig cfg);

// Deterministic batch for one optimizer step: tasks rotate round-robin over
// the global sample counter, clean images come from a small seeded pool.
std::vector<FlowSample> make_batch(const RunConfig& cfg, const TaskCatalog& catalog,
                                   const InstructionVocab& vocab,
                                   const std::vector<Image>& pool, int64_t step);

std::vector<Image> make_pool(const RunConfig& cfg);

struct TaskMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  double baseline_psnr = 0.0;  // degraded input scored against the target
  int64_t n = 0;
};

struct MetricReport {
  std::map<std::string, TaskMetrics> per_task;
  std::string config_hash;
  std::string manifest_hash;  // empty when the run has no catalog tasks
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

// Scores the bundle on the held-out set under `testset_dir` (built with the
// test seed range, never the training seeds). Exemplar-defined tasks are
// scored from the same held-out seed range directly.
MetricReport evaluate(ModelBundle& M, const RunConfig& cfg,
                      const std::string& testset_dir);

struct TrainResult {
  int64_t steps_run = 0;
  std::vector<LossRecord> losses;
  std::string checkpoint_dir;
  std::string testset_dir;
  MetricReport report;
};

// Runs the flow-matching loop, writing loss.csv, checkpoints, report.json and
// the resolved config under cfg.out_dir. `resume_dir` restarts mid-run from a
// saved checkpoint and replays the remaining steps bit-identically.
TrainResult train(const RunConfig& cfg, const std::string& resume_dir = "");

void save_bundle_checkpoint(const std::string& dir, ModelBundle& M,
                            const AdamState& opt, int64_t step,
                            const RunConfig& cfg);
// Returns the step count stored in the checkpoint; rejects checkpoints written
// under a different resolved config.
int64_t load_bundle_checkpoint(const std::string& dir, ModelBundle& M,
                               AdamState* opt, const RunConfig& cfg);

// Rebuilds bundle and config from the checkpoint's embedded document alone.
std::pair<ModelBundle, RunConfig> load_bundle(const std::string& dir);

// Trains one cell per setting of `axis` ("injection", "fusion" or
// "prompt-format") and writes a variant x task CSV of final metrics. All cells
// share the base seed; their eval manifests must hash identically.
std::string ablate(const std::string& axis, const RunConfig& base);

}  // namespace lvf
