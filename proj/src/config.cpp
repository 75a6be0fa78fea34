#include "lvf/config.hpp"

#include <fstream>
#include <set>

#include "lvf/error.hpp"
#include "lvf/hash.hpp"

namespace lvf {

namespace {

using nlohmann::json;

void check_keys(const json& j, const char* ctx, std::set<std::string> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(ctx) + " must be a JSON object");
  for (auto& [key, _] : j.items())
    if (!allowed.count(key))
      throw ConfigError("unknown key '" + key + "' in " + ctx);
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("bad value for '") + key + "'");
  }
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  check_keys(j, "run config", {"model", "train", "out_dir"});
  read(j, "out_dir", c.out_dir);

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, "model config",
               {"image_size", "channels", "patch_size", "hidden_dim", "num_heads",
                "num_blocks", "instr_vocab_size", "max_icl_pairs", "adapter_depth",
                "rope_base"});
    read(m, "image_size", c.model.image_size);
    read(m, "channels", c.model.channels);
    read(m, "patch_size", c.model.patch_size);
    read(m, "hidden_dim", c.model.hidden_dim);
    read(m, "num_heads", c.model.num_heads);
    read(m, "num_blocks", c.model.num_blocks);
    read(m, "instr_vocab_size", c.model.instr_vocab_size);
    read(m, "max_icl_pairs", c.model.max_icl_pairs);
    read(m, "adapter_depth", c.model.adapter_depth);
    read(m, "rope_base", c.model.rope_base);
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train config",
               {"stage", "steps", "batch_size", "learning_rate", "weight_decay",
                "grad_clip", "seed", "tasks", "inject", "interval_stride", "fusion",
                "prompt_format", "eval_every", "frozen_warmup_steps", "image_pool",
                "eval_n_per_task", "param_overrides"});
    read(t, "stage", c.train.stage);
    read(t, "steps", c.train.steps);
    read(t, "batch_size", c.train.batch_size);
    read(t, "learning_rate", c.train.learning_rate);
    read(t, "weight_decay", c.train.weight_decay);
    read(t, "grad_clip", c.train.grad_clip);
    read(t, "seed", c.train.seed);
    read(t, "tasks", c.train.tasks);
    std::string inject = c.train.plan.name();
    int64_t stride = c.train.plan.interval_stride;
    read(t, "inject", inject);
    read(t, "interval_stride", stride);
    try {
      c.train.plan = InjectionPlan::make(InjectionPlan::from_name(inject).variant, stride);
    } catch (const ParamError& e) {
      throw ConfigError(e.what());
    }
    std::string fusion = fusion_name(c.train.fusion);
    std::string pf = prompt_format_name(c.train.prompt_format);
    read(t, "fusion", fusion);
    read(t, "prompt_format", pf);
    try {
      c.train.fusion = fusion_from_name(fusion);
      c.train.prompt_format = prompt_format_from_name(pf);
    } catch (const ParamError& e) {
      throw ConfigError(e.what());
    }
    read(t, "eval_every", c.train.eval_every);
    read(t, "frozen_warmup_steps", c.train.frozen_warmup_steps);
    read(t, "image_pool", c.train.image_pool);
    read(t, "eval_n_per_task", c.train.eval_n_per_task);
    read(t, "param_overrides", c.train.param_overrides);
  }
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json m{{"image_size", model.image_size},
                   {"channels", model.channels},
                   {"patch_size", model.patch_size},
                   {"hidden_dim", model.hidden_dim},
                   {"num_heads", model.num_heads},
                   {"num_blocks", model.num_blocks},
                   {"instr_vocab_size", model.instr_vocab_size},
                   {"max_icl_pairs", model.max_icl_pairs},
                   {"adapter_depth", model.adapter_depth},
                   {"rope_base", model.rope_base}};
  nlohmann::json t{{"stage", train.stage},
                   {"steps", train.steps},
                   {"batch_size", train.batch_size},
                   {"learning_rate", train.learning_rate},
                   {"weight_decay", train.weight_decay},
                   {"grad_clip", train.grad_clip},
                   {"seed", train.seed},
                   {"tasks", train.tasks},
                   {"inject", train.plan.name()},
                   {"interval_stride", train.plan.interval_stride},
                   {"fusion", fusion_name(train.fusion)},
                   {"prompt_format", prompt_format_name(train.prompt_format)},
                   {"eval_every", train.eval_every},
                   {"frozen_warmup_steps", train.frozen_warmup_steps},
                   {"image_pool", train.image_pool},
                   {"eval_n_per_task", train.eval_n_per_task},
                   {"param_overrides", train.param_overrides}};
  return nlohmann::json{{"model", m}, {"train", t}, {"out_dir", out_dir}};
}

std::string RunConfig::hash() const {
  // Identifies the experiment; where its outputs land is not part of that, so
  // a run resumed into a fresh directory still matches its own checkpoints.
  nlohmann::json j = to_json();
  j.erase("out_dir");
  return hex64(fnv1a64(j.dump()));
}

void RunConfig::validate() const {
  model.validate();
  if (train.stage != 1 && train.stage != 2)
    throw ConfigError("stage must be 1 or 2");
  if (train.stage == 2 && model.max_icl_pairs < 1)
    throw ConfigError("stage 2 needs max_icl_pairs >= 1");
  if (train.steps < 0) throw ConfigError("steps must be >= 0");
  if (train.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (train.learning_rate <= 0) throw ConfigError("learning_rate must be > 0");
  if (train.grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
  if (train.image_pool < 1) throw ConfigError("image_pool must be >= 1");
  if (train.eval_n_per_task < 1) throw ConfigError("eval_n_per_task must be >= 1");
  if (train.frozen_warmup_steps < 0)
    throw ConfigError("frozen_warmup_steps must be >= 0");
  if (train.tasks.empty()) throw ConfigError("task list is empty");
}

}  // namespace lvf
