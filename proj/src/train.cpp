#include "lvf/train.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "lvf/checkpoint.hpp"
#include "lvf/error.hpp"
#include "lvf/hash.hpp"
#include "lvf/image.hpp"
#include "lvf/metrics.hpp"
#include "lvf/rng.hpp"
#include "lvf/version.hpp"

namespace lvf {

namespace fs = std::filesystem;

namespace {

// Stream tags keeping the run's rng lanes independent of each other.
constexpr uint64_t kTagModel = 0x6d6f64;
constexpr uint64_t kTagPool = 0x706f6f6c;
constexpr uint64_t kTagSample = 0x73616d70;
constexpr uint64_t kTagLoss = 0x636d66;
constexpr uint64_t kTagEval = 0x6576616c;

bool wants_text(const TrainConfig& tc) {
  return tc.prompt_format == PromptFormat::Text ||
         tc.prompt_format == PromptFormat::Both;
}

bool wants_visual(const TrainConfig& tc) {
  return tc.stage == 2 && (tc.prompt_format == PromptFormat::Visual ||
                           tc.prompt_format == PromptFormat::Both);
}

}  // namespace

bool is_icl_task(const std::string& id) {
  return id == "icl_identity" || id == "icl_invert";
}

Image icl_transform(const std::string& id, const Image& in) {
  if (id == "icl_identity") return in;
  if (id == "icl_invert") {
    Image out = in;
    for (double& v : out.pix) v = 1.0 - v;
    return out;
  }
  throw ParamError("unknown exemplar task '" + id + "'");
}

ModelBundle ModelBundle::init(const ModelConfig& cfg, const InjectionPlan& plan,
                              uint64_t seed) {
  ModelBundle M;
  M.cfg = cfg;
  M.plan = plan;
  M.P = DiTParams::init(cfg, mix_seed(seed, 1, 0));
  M.adapter = ConditionAdapterParams::init(cfg, plan, mix_seed(seed, 2, 0));
  M.icl = IclProjectors::init(cfg);
  return M;
}

std::vector<std::pair<std::string, Tensor>> ModelBundle::named_params() {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& it : P.store.items) out.push_back(it);
  for (const auto& it : adapter.store.items) out.push_back(it);
  for (const auto& it : icl.store.items) out.push_back(it);
  return out;
}

Tensor ModelBundle::velocity(const Tensor& x_t, double t, const Tensor& cond,
                             const PromptPack& prompt) {
  return conditional_velocity(P, adapter, icl, plan, x_t, t, cond, prompt);
}

Image render_sample(ModelBundle& M, const Image& lq, const PromptPack& prompt,
                    int64_t steps, uint64_t seed) {
  Tensor cond = signed_from_image(lq);
  Tensor out = euler_sample(
      [&](const Tensor& x, double t) { return M.velocity(x, t, cond, prompt); },
      cond.shape(), steps, seed);
  return image_from_signed(out);
}

RunConfig resolve_config(RunConfig cfg) {
  TaskCatalog catalog = TaskCatalog::standard();
  bool any_catalog = false;
  for (const auto& t : cfg.train.tasks) {
    if (is_icl_task(t)) {
      if (cfg.train.stage != 2)
        throw ConfigError("task '" + t +
                          "' is exemplar-defined and needs stage 2");
      if (cfg.train.prompt_format == PromptFormat::Text)
        throw ConfigError("task '" + t +
                          "' is exemplar-defined and needs a visual prompt");
    } else if (catalog.has(t)) {
      any_catalog = true;
    } else {
      throw ConfigError("unknown task '" + t + "'");
    }
  }
  if (cfg.model.instr_vocab_size == 0)
    cfg.model.instr_vocab_size = InstructionVocab::standard(catalog).size();
  if (any_catalog && wants_text(cfg.train)) {
    int64_t need = InstructionVocab::standard(catalog).size();
    if (cfg.model.instr_vocab_size < need)
      throw ConfigError("instr_vocab_size " +
                        std::to_string(cfg.model.instr_vocab_size) +
                        " is smaller than the instruction vocabulary (" +
                        std::to_string(need) + ")");
  }
  cfg.validate();
  return cfg;
}

std::vector<Image> make_pool(const RunConfig& cfg) {
  std::vector<Image> pool;
  pool.reserve(static_cast<size_t>(cfg.train.image_pool));
  for (int64_t i = 0; i < cfg.train.image_pool; ++i)
    pool.push_back(gen_clean(mix_seed(cfg.train.seed, kTagPool, (uint64_t)i),
                             cfg.model.image_size));
  return pool;
}

std::vector<FlowSample> make_batch(const RunConfig& cfg, const TaskCatalog& catalog,
                                   const InstructionVocab& vocab,
                                   const std::vector<Image>& pool, int64_t step) {
  if (pool.empty()) throw ContractError("empty image pool");
  const TrainConfig& tc = cfg.train;
  const bool text = wants_text(tc);
  const bool visual = wants_visual(tc);
  std::vector<FlowSample> batch;
  batch.reserve(static_cast<size_t>(tc.batch_size));
  for (int64_t j = 0; j < tc.batch_size; ++j) {
    const uint64_t k = static_cast<uint64_t>(step * tc.batch_size + j);
    const std::string& task = tc.tasks[k % tc.tasks.size()];
    const uint64_t base = mix_seed(tc.seed, kTagSample, k);
    Rng rr(base);
    const size_t qi = (size_t)rr.uniform_int(0, (int64_t)pool.size() - 1);
    size_t ei = (size_t)rr.uniform_int(0, (int64_t)pool.size() - 1);
    if (pool.size() > 1 && ei == qi) ei = (ei + 1) % pool.size();
    const Image& query = pool[qi];

    FlowSample s;
    s.task_id = task;
    s.prompt.fusion = tc.fusion;
    if (is_icl_task(task)) {
      s.cond = signed_from_image(query);
      s.x1 = signed_from_image(icl_transform(task, query));
      s.prompt.icl_pairs.emplace_back(pool[ei], icl_transform(task, pool[ei]));
    } else {
      const TaskDef& def = catalog.get(task);
      Rng prng(mix_seed(base, 1, 0));
      auto params = def.sample_params(prng);
      for (const auto& [pk, pv] : tc.param_overrides) params[pk] = pv;
      TrainingPair pair = make_pair_from_clean(def, params, query, mix_seed(base, 2, 0));
      s.cond = signed_from_image(pair.lq);
      s.x1 = signed_from_image(pair.hq);
      if (text) s.prompt.instr_ids = encode_instruction(def.instruction, vocab);
      if (visual) {
        Rng eprng(mix_seed(base, 3, 0));
        auto eparams = def.sample_params(eprng);
        for (const auto& [pk, pv] : tc.param_overrides) eparams[pk] = pv;
        TrainingPair ex =
            make_pair_from_clean(def, eparams, pool[ei], mix_seed(base, 4, 0));
        s.prompt.icl_pairs.emplace_back(ex.lq, ex.hq);
      }
    }
    s.prompt.validate(cfg.model);
    batch.push_back(std::move(s));
  }
  return batch;
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["tool_version"] = kToolVersion;
  j["config_hash"] = config_hash;
  j["manifest_hash"] = manifest_hash;
  j["eval_steps"] = kEvalEulerSteps;
  j["wall_seconds"] = wall_seconds;
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [task, m] : per_task)
    per[task] = {{"psnr", m.psnr},
                 {"ssim", m.ssim},
                 {"baseline_psnr", m.baseline_psnr},
                 {"n", m.n}};
  j["per_task"] = per;
  return j;
}

MetricReport evaluate(ModelBundle& M, const RunConfig& cfg,
                      const std::string& testset_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig& tc = cfg.train;
  TaskCatalog catalog = TaskCatalog::standard();
  InstructionVocab vocab = InstructionVocab::standard(catalog);
  const bool text = wants_text(tc);
  const bool visual = wants_visual(tc);

  std::vector<std::string> cat_tasks, ex_tasks;
  for (const auto& t : tc.tasks)
    (is_icl_task(t) ? ex_tasks : cat_tasks).push_back(t);

  MetricReport rep;
  rep.config_hash = cfg.hash();

  struct Acc {
    double psnr = 0, ssim = 0, base = 0;
    int64_t n = 0;
  };
  std::map<std::string, Acc> acc;

  if (!cat_tasks.empty()) {
    fs::path mpath = fs::path(testset_dir) / "manifest.json";
    std::ifstream in(mpath);
    if (!in) throw IoError("cannot read manifest: " + mpath.string());
    nlohmann::json man;
    try {
      man = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("bad manifest " + mpath.string() + ": " + e.what());
    }
    const auto& pol = man.at("seed_policy");
    if (!pol.value("disjoint", false) ||
        pol.value("test_base", (uint64_t)0) != tc.seed + kTestSeedOffset)
      throw ContractError("eval manifest seeds are not the held-out range for this run");
    rep.manifest_hash = man.at("manifest_hash").get<std::string>();

    for (const auto& e : man.at("entries")) {
      const std::string task = e.at("task").get<std::string>();
      bool wanted = false;
      for (const auto& t : cat_tasks) wanted = wanted || t == task;
      if (!wanted) continue;
      const uint64_t eseed = e.at("seed").get<uint64_t>();
      Image lq = image_from_tensor(
          load_tensor((fs::path(testset_dir) / e.at("lq_olvt").get<std::string>()).string()));
      Image hq = image_from_tensor(
          load_tensor((fs::path(testset_dir) / e.at("hq_olvt").get<std::string>()).string()));

      PromptPack prompt;
      prompt.fusion = tc.fusion;
      const TaskDef& def = catalog.get(task);
      if (text) prompt.instr_ids = encode_instruction(def.instruction, vocab);
      if (visual) {
        Rng eprng(mix_seed(eseed, 5, 0));
        auto eparams = def.sample_params(eprng);
        for (const auto& [pk, pv] : tc.param_overrides) eparams[pk] = pv;
        Image ex_clean = gen_clean(mix_seed(eseed, 6, 0), cfg.model.image_size);
        TrainingPair ex =
            make_pair_from_clean(def, eparams, ex_clean, mix_seed(eseed, 7, 0));
        prompt.icl_pairs.emplace_back(ex.lq, ex.hq);
      }
      prompt.validate(cfg.model);

      Image out = render_sample(M, lq, prompt, kEvalEulerSteps,
                                mix_seed(eseed, kTagEval, 0));
      Acc& a = acc[task];
      a.psnr += psnr(out, hq);
      a.ssim += ssim(out, hq);
      a.base += psnr(lq, hq);
      a.n += 1;
    }
  }

  for (const auto& task : ex_tasks) {
    const uint64_t tbase = mix_seed(tc.seed + kTestSeedOffset, fnv1a64(task), 0);
    for (int64_t i = 0; i < tc.eval_n_per_task; ++i) {
      const uint64_t base = mix_seed(tbase, 1, (uint64_t)i);
      Image query = gen_clean(mix_seed(base, 1, 0), cfg.model.image_size);
      Image target = icl_transform(task, query);
      Image ex = gen_clean(mix_seed(base, 2, 0), cfg.model.image_size);
      PromptPack prompt;
      prompt.fusion = tc.fusion;
      prompt.icl_pairs.emplace_back(ex, icl_transform(task, ex));
      prompt.validate(cfg.model);
      Image out = render_sample(M, query, prompt, kEvalEulerSteps,
                                mix_seed(base, kTagEval, 0));
      Acc& a = acc[task];
      a.psnr += psnr(out, target);
      a.ssim += ssim(out, target);
      a.base += psnr(query, target);
      a.n += 1;
    }
  }

  for (const auto& [task, a] : acc) {
    TaskMetrics m;
    m.n = a.n;
    if (a.n > 0) {
      m.psnr = a.psnr / a.n;
      m.ssim = a.ssim / a.n;
      m.baseline_psnr = a.base / a.n;
    }
    rep.per_task[task] = m;
  }
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

void save_bundle_checkpoint(const std::string& dir, ModelBundle& M,
                            const AdamState& opt, int64_t step,
                            const RunConfig& cfg) {
  auto named = M.named_params();
  std::vector<std::pair<std::string, Tensor>> tensors = named;
  if (opt.m.size() == named.size()) {
    for (size_t i = 0; i < named.size(); ++i) {
      tensors.emplace_back("opt.m." + named[i].first,
                           Tensor::from_data({(int64_t)opt.m[i].size()}, opt.m[i]));
      tensors.emplace_back("opt.v." + named[i].first,
                           Tensor::from_data({(int64_t)opt.v[i].size()}, opt.v[i]));
    }
  }
  nlohmann::json meta;
  meta["step"] = step;
  meta["opt_step"] = opt.step;
  meta["config_hash"] = cfg.hash();
  meta["tool_version"] = kToolVersion;
  // The experiment document itself, so samplers can rebuild the model from
  // the checkpoint alone. out_dir stays out: it is not part of the identity.
  nlohmann::json doc = cfg.to_json();
  doc.erase("out_dir");
  meta["config"] = std::move(doc);
  save_checkpoint(dir, tensors, meta);
}

int64_t load_bundle_checkpoint(const std::string& dir, ModelBundle& M,
                               AdamState* opt, const RunConfig& cfg) {
  LoadedCheckpoint ck = load_checkpoint(dir);
  const std::string want = cfg.hash();
  const std::string got = ck.meta.value("config_hash", "");
  if (got != want)
    throw ContractError("checkpoint config hash " + got +
                        " does not match this run's config " + want);
  auto named = M.named_params();
  for (auto& [name, t] : named) {
    const Tensor& src = ck.get(name);
    if (src.shape() != t.shape())
      throw ContractError("checkpoint tensor '" + name + "' has the wrong shape");
    t.data() = src.data();
  }
  if (opt) {
    std::vector<Tensor> plist;
    for (auto& [name, t] : named) plist.push_back(t);
    opt->init_for(plist);
    for (size_t i = 0; i < named.size(); ++i) {
      opt->m[i] = ck.get("opt.m." + named[i].first).data();
      opt->v[i] = ck.get("opt.v." + named[i].first).data();
    }
    opt->step = ck.meta.value("opt_step", (int64_t)0);
  }
  return ck.meta.value("step", (int64_t)0);
}

std::pair<ModelBundle, RunConfig> load_bundle(const std::string& dir) {
  LoadedCheckpoint ck = load_checkpoint(dir);
  if (!ck.meta.contains("config"))
    throw ContractError("checkpoint has no embedded config: " + dir);
  RunConfig cfg = resolve_config(RunConfig::from_json(ck.meta.at("config")));
  ModelBundle M = ModelBundle::init(cfg.model, cfg.train.plan,
                                    mix_seed(cfg.train.seed, kTagModel, 0));
  load_bundle_checkpoint(dir, M, nullptr, cfg);
  return {std::move(M), std::move(cfg)};
}

TrainResult train(const RunConfig& raw, const std::string& resume_dir) {
  RunConfig cfg = resolve_config(raw);
  const TrainConfig& tc = cfg.train;
  TaskCatalog catalog = TaskCatalog::standard();
  InstructionVocab vocab = InstructionVocab::standard(catalog);

  fs::create_directories(cfg.out_dir);
  {
    std::ofstream out(fs::path(cfg.out_dir) / "config.json");
    if (!out) throw IoError("cannot write config under " + cfg.out_dir);
    out << cfg.to_json().dump(2) << "\n";
  }

  std::vector<std::string> cat_tasks;
  for (const auto& t : tc.tasks)
    if (!is_icl_task(t)) cat_tasks.push_back(t);
  std::string testset_dir = (fs::path(cfg.out_dir) / "testset").string();
  if (!cat_tasks.empty())
    build_testset(catalog, cat_tasks, tc.eval_n_per_task, tc.seed,
                  cfg.model.image_size, testset_dir, tc.param_overrides);

  ModelBundle M = ModelBundle::init(cfg.model, tc.plan, mix_seed(tc.seed, kTagModel, 0));
  auto named = M.named_params();
  std::vector<Tensor> params;
  for (auto& [n, t] : named) params.push_back(t);
  AdamState opt;
  opt.init_for(params);

  int64_t start_step = 0;
  if (!resume_dir.empty()) {
    start_step = load_bundle_checkpoint(resume_dir, M, &opt, cfg);
    if (start_step > tc.steps)
      throw ContractError("checkpoint step " + std::to_string(start_step) +
                          " is past the configured " + std::to_string(tc.steps));
  }

  OptimConfig ocfg;
  ocfg.lr = tc.learning_rate;
  ocfg.weight_decay = tc.weight_decay;
  ocfg.grad_clip = tc.grad_clip;

  auto pool = make_pool(cfg);

  fs::path loss_path = fs::path(cfg.out_dir) / "loss.csv";
  std::ofstream loss_csv;
  if (start_step == 0) {
    loss_csv.open(loss_path);
    loss_csv << "# config " << cfg.hash() << " tool_version " << kToolVersion
             << "\n";
    loss_csv << "step,loss,task,t\n";
  } else {
    loss_csv.open(loss_path, std::ios::app);
  }
  if (!loss_csv) throw IoError("cannot write " + loss_path.string());
  loss_csv << std::setprecision(10);

  TrainResult res;
  res.testset_dir = cat_tasks.empty() ? "" : testset_dir;

  const bool frozen_variant = tc.plan.variant == Variant::FirstHalfFrozen;

  for (int64_t s = start_step; s < tc.steps; ++s) {
    // Variant (b) co-trains the backbone during warmup; frozen afterwards.
    // Frozen params get their grad buffers dropped so the optimizer skips
    // them entirely (stale buffers would otherwise keep applying updates).
    const bool frozen_now = frozen_variant && s >= tc.frozen_warmup_steps;
    for (auto& [name, t] : named) {
      const bool backbone =
          name.rfind("adapter.", 0) != 0 && name.rfind("icl.", 0) != 0;
      const bool train_this = !backbone || !frozen_now;
      t.set_requires_grad(train_this);
      if (train_this)
        t.zero_grad();
      else
        t.clear_grad();
    }

    auto batch = make_batch(cfg, catalog, vocab, pool, s);
    Tape tape;
    CfmLossOut out = cfm_loss(
        [&](const Tensor& x_t, double t, const FlowSample& smp) {
          return M.velocity(x_t, t, smp.cond, smp.prompt);
        },
        batch, mix_seed(tc.seed, kTagLoss, (uint64_t)s));
    const double lv = out.loss.data()[0];
    if (!std::isfinite(lv)) {
      std::string lg = (fs::path(cfg.out_dir) / "checkpoint_last_good").string();
      save_bundle_checkpoint(lg, M, opt, s, cfg);
      throw NumericError("loss became non-finite at step " + std::to_string(s) +
                         "; last good checkpoint: " + lg);
    }
    tape.backward(out.loss);
    adamw_step(params, opt, ocfg);

    LossRecord rec{s, lv, batch[0].task_id, out.ts[0]};
    res.losses.push_back(rec);
    loss_csv << rec.step << "," << rec.loss << "," << rec.task_id << "," << rec.t
             << "\n";

    if (tc.eval_every > 0 && (s + 1) % tc.eval_every == 0 && s + 1 < tc.steps) {
      std::string tag = std::to_string(s + 1);
      save_bundle_checkpoint(
          (fs::path(cfg.out_dir) / ("checkpoint_step" + tag)).string(), M, opt,
          s + 1, cfg);
      MetricReport rep = evaluate(M, cfg, testset_dir);
      std::ofstream rj(fs::path(cfg.out_dir) / ("report_step" + tag + ".json"));
      rj << rep.to_json().dump(2) << "\n";
    }
  }
  loss_csv.flush();

  res.steps_run = tc.steps - start_step;
  res.checkpoint_dir = (fs::path(cfg.out_dir) / "checkpoint_final").string();
  save_bundle_checkpoint(res.checkpoint_dir, M, opt, tc.steps, cfg);
  res.report = evaluate(M, cfg, testset_dir);
  {
    std::ofstream rj(fs::path(cfg.out_dir) / "report.json");
    if (!rj) throw IoError("cannot write report under " + cfg.out_dir);
    rj << res.report.to_json().dump(2) << "\n";
  }
  return res;
}

std::string ablate(const std::string& axis, const RunConfig& base) {
  std::vector<std::pair<std::string, std::function<void(RunConfig&)>>> cells;
  if (axis == "injection") {
    for (const char* name :
         {"input", "first-frozen", "first", "second", "interval"}) {
      std::string n = name;
      cells.emplace_back(n, [n](RunConfig& c) {
        InjectionPlan p = InjectionPlan::from_name(n);
        p.interval_stride = c.train.plan.interval_stride;
        p.validate();
        c.train.plan = p;
        if (p.variant == Variant::FirstHalfFrozen &&
            c.train.frozen_warmup_steps == 0)
          c.train.frozen_warmup_steps = std::max<int64_t>(1, c.train.steps / 4);
      });
    }
  } else if (axis == "fusion") {
    for (const char* name : {"concat", "projection"}) {
      std::string n = name;
      cells.emplace_back(
          n, [n](RunConfig& c) { c.train.fusion = fusion_from_name(n); });
    }
  } else if (axis == "prompt-format") {
    for (const char* name : {"text", "visual", "both"}) {
      std::string n = name;
      cells.emplace_back(n, [n](RunConfig& c) {
        c.train.prompt_format = prompt_format_from_name(n);
      });
    }
  } else {
    throw ParamError("unknown ablation axis '" + axis +
                     "' (expected injection, fusion or prompt-format)");
  }

  fs::create_directories(base.out_dir);
  std::string manifest_hash;
  struct Row {
    std::string cell, task;
    TaskMetrics m;
  };
  std::vector<Row> rows;
  for (const auto& [name, tweak] : cells) {
    RunConfig c = base;
    c.out_dir = (fs::path(base.out_dir) / ("cell_" + name)).string();
    tweak(c);
    TrainResult r = train(c);
    if (!r.report.manifest_hash.empty()) {
      if (manifest_hash.empty())
        manifest_hash = r.report.manifest_hash;
      else if (manifest_hash != r.report.manifest_hash)
        throw ContractError("ablation cells evaluated on different manifests");
    }
    for (const auto& [task, m] : r.report.per_task) rows.push_back({name, task, m});
  }

  fs::path csv_path = fs::path(base.out_dir) / ("ablation_" + axis + ".csv");
  std::ofstream out(csv_path);
  if (!out) throw IoError("cannot write " + csv_path.string());
  out << "# config " << resolve_config(base).hash() << " tool_version "
      << kToolVersion << "\n";
  out << "# eval_manifest " << (manifest_hash.empty() ? "none" : manifest_hash)
      << "\n";
  out << "variant,task,psnr,ssim,baseline_psnr\n";
  out << std::fixed << std::setprecision(4);
  for (const auto& r : rows)
    out << r.cell << "," << r.task << "," << r.m.psnr << "," << r.m.ssim << ","
        << r.m.baseline_psnr << "\n";
  return csv_path.string();
}

}  // namespace lvf
