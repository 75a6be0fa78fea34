#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "lvf/model.hpp"
#include "lvf/plan.hpp"

namespace lvf {

struct TrainConfig {
  int stage = 1;
  int64_t steps = 200;
  int64_t batch_size = 8;
  double learning_rate = 1e-4;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  uint64_t seed = 1;
  std::vector<std::string> tasks;
  InjectionPlan plan = InjectionPlan::make(Variant::FirstHalf);
  FusionMode fusion = FusionMode::ProjectionAddition;
  PromptFormat prompt_format = PromptFormat::Text;
  int64_t eval_every = 0;  // 0 = evaluate only at the end
  // Variant (b) trains the whole net for this many steps before freezing the
  // backbone (a frozen backbone with a zero output head can never learn).
  int64_t frozen_warmup_steps = 0;
  int64_t image_pool = 8;       // distinct clean images cycled during training
  int64_t eval_n_per_task = 4;  // held-out images per task
  std::map<std::string, double> param_overrides;  // pin degradation params
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string out_dir = "run";

  static RunConfig from_json(const nlohmann::json& j);  // unknown keys rejected
  static RunConfig from_file(const std::string& path);
  nlohmann::json to_json() const;
  std::string hash() const;  // stable over the resolved document; out_dir excluded
  void validate() const;
};

}  // namespace lvf
