#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lvf/checkpoint.hpp"
#include "lvf/config.hpp"
#include "lvf/degrade.hpp"
#include "lvf/error.hpp"
#include "lvf/hash.hpp"
#include "lvf/image.hpp"
#include "lvf/metrics.hpp"
#include "lvf/train.hpp"
#include "lvf/version.hpp"

namespace fs = std::filesystem;
using namespace lvf;

namespace {

// Partial outputs must never be left behind silently; the marker names the
// failure so a later inspection knows the contents are incomplete.
void mark_failed(const std::string& target, const std::string& why) {
  if (target.empty()) return;
  std::error_code ec;
  fs::path marker;
  if (fs::is_directory(target, ec)) {
    marker = fs::path(target) / ".failed";
  } else if (fs::exists(target, ec) || fs::exists(target + ".ppm", ec) ||
             fs::exists(target + ".olvt", ec)) {
    marker = fs::path(target + ".failed");
  } else {
    return;
  }
  std::ofstream out(marker);
  out << why << "\n";
}

std::string pix_hash(const Image& img) {
  std::string bytes(reinterpret_cast<const char*>(img.pix.data()),
                    img.pix.size() * sizeof(double));
  return hex64(fnv1a64(bytes));
}

int run_degrade(const std::string& task, int64_t n, uint64_t seed, int64_t size,
                const std::string& out_dir) {
  TaskCatalog catalog = TaskCatalog::standard();
  TestsetResult r = build_corpus(catalog, {task}, n, seed, size, out_dir);
  std::cout << "wrote " << r.manifest_path << " (" << n << " pairs, hash "
            << r.manifest_hash << ")\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& resume) {
  RunConfig cfg = RunConfig::from_file(config_path);
  TrainResult res = train(cfg, resume);
  std::cout << "trained " << res.steps_run << " steps";
  if (!res.losses.empty())
    std::cout << ", final loss " << res.losses.back().loss;
  std::cout << "\ncheckpoint: " << res.checkpoint_dir << "\n";
  for (const auto& [t, m] : res.report.per_task)
    std::cout << t << ": psnr " << m.psnr << " ssim " << m.ssim
              << " (input " << m.baseline_psnr << ")\n";
  return 0;
}

int run_sample(const std::string& ckpt, const std::string& input,
               const std::string& instruction,
               const std::vector<std::string>& pair_specs, int64_t steps,
               uint64_t seed, const std::string& out_base) {
  auto [M, cfg] = load_bundle(ckpt);
  Image lq = load_ppm(input);
  if (lq.height != cfg.model.image_size || lq.width != cfg.model.image_size)
    throw ShapeError("input is " + std::to_string(lq.height) + "x" +
                     std::to_string(lq.width) + " but the checkpoint expects " +
                     std::to_string(cfg.model.image_size) + "x" +
                     std::to_string(cfg.model.image_size));

  PromptPack prompt;
  prompt.fusion = cfg.train.fusion;
  if (!instruction.empty()) {
    InstructionVocab vocab = InstructionVocab::standard(TaskCatalog::standard());
    auto ids = encode_instruction(instruction, vocab);
    bool any_known = false;
    for (int64_t id : ids) any_known = any_known || id != 0;
    if (any_known) {
      prompt.instr_ids = ids;
    } else if (!ids.empty()) {
      std::cerr << "warning: instruction contains no known words; "
                   "running with visual prompts only\n";
    }
  }
  for (const auto& spec : pair_specs) {
    auto colon = spec.find(':');
    if (colon == std::string::npos)
      throw ConfigError("--icl-pair wants LQ.ppm:HQ.ppm, got '" + spec + "'");
    prompt.icl_pairs.emplace_back(load_ppm(spec.substr(0, colon)),
                                  load_ppm(spec.substr(colon + 1)));
  }
  prompt.validate(cfg.model);

  Image out = render_sample(M, lq, prompt, steps, seed);
  std::vector<std::string> notes = {
      std::string("tool_version ") + kToolVersion, "config " + cfg.hash(),
      "seed " + std::to_string(seed) + " steps " + std::to_string(steps)};
  save_ppm(out_base + ".ppm", out, notes);
  save_tensor(out_base + ".olvt", tensor_from_image(out));
  nlohmann::json meta;
  meta["tool_version"] = kToolVersion;
  meta["config_hash"] = cfg.hash();
  meta["checkpoint"] = ckpt;
  meta["input"] = input;
  meta["instruction"] = instruction;
  meta["instruction_ids"] = prompt.instr_ids;
  meta["icl_pairs"] = pair_specs.size();
  meta["steps"] = steps;
  meta["seed"] = seed;
  meta["output_hash"] = pix_hash(out);
  std::ofstream mj(out_base + ".json");
  if (!mj) throw IoError("cannot write " + out_base + ".json");
  mj << meta.dump(2) << "\n";
  std::cout << "wrote " << out_base << ".ppm (hash " << pix_hash(out) << ")\n";
  return 0;
}

// Scores externally produced outputs ("<stem>_out.olvt" next to the manifest
// layout) against the manifest's HQ images.
MetricReport score_outputs(const std::string& manifest_path,
                           const std::string& outputs_dir) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot read manifest: " + manifest_path);
  nlohmann::json man;
  try {
    in >> man;
  } catch (const std::exception& e) {
    throw IoError("bad manifest " + manifest_path + ": " + e.what());
  }
  fs::path root = fs::path(manifest_path).parent_path();
  MetricReport rep;
  rep.config_hash = "external-outputs";
  rep.manifest_hash = man.value("manifest_hash", "");
  struct Acc {
    double p = 0, s = 0, b = 0;
    int64_t n = 0;
  };
  std::map<std::string, Acc> acc;
  for (const auto& e : man.at("entries")) {
    const std::string task = e.at("task").get<std::string>();
    const std::string lq_rel = e.at("lq_olvt").get<std::string>();
    Image lq = image_from_tensor(load_tensor((root / lq_rel).string()));
    Image hq = image_from_tensor(
        load_tensor((root / e.at("hq_olvt").get<std::string>()).string()));
    std::string out_rel = lq_rel;
    auto tag = out_rel.rfind("_lq.olvt");
    if (tag == std::string::npos)
      throw ContractError("manifest entry without an _lq.olvt path: " + lq_rel);
    out_rel.replace(tag, std::string("_lq.olvt").size(), "_out.olvt");
    Image out = image_from_tensor(
        load_tensor((fs::path(outputs_dir) / out_rel).string()));
    Acc& a = acc[task];
    a.p += psnr(out, hq);
    a.s += ssim(out, hq);
    a.b += psnr(lq, hq);
    a.n += 1;
  }
  for (const auto& [task, a] : acc) {
    TaskMetrics m;
    m.n = a.n;
    if (a.n) {
      m.psnr = a.p / a.n;
      m.ssim = a.s / a.n;
      m.baseline_psnr = a.b / a.n;
    }
    rep.per_task[task] = m;
  }
  return rep;
}

int run_eval(const std::string& ckpt, const std::string& manifest_path,
             const std::string& outputs_dir, const std::string& report_path) {
  if (ckpt.empty() == outputs_dir.empty())
    throw ConfigError("pass exactly one of --checkpoint and --outputs");
  MetricReport rep;
  if (!ckpt.empty()) {
    auto [M, cfg] = load_bundle(ckpt);
    rep = evaluate(M, cfg, fs::path(manifest_path).parent_path().string());
  } else {
    rep = score_outputs(manifest_path, outputs_dir);
  }
  std::ofstream out(report_path);
  if (!out) throw IoError("cannot write " + report_path);
  out << rep.to_json().dump(2) << "\n";
  for (const auto& [t, m] : rep.per_task)
    std::cout << t << ": psnr " << m.psnr << " ssim " << m.ssim << " (input "
              << m.baseline_psnr << ", n=" << m.n << ")\n";
  std::cout << "wrote " << report_path << "\n";
  return 0;
}

int run_ablate(const std::string& axis, const std::string& config_path) {
  RunConfig base = RunConfig::from_file(config_path);
  std::string csv = ablate(axis, base);
  std::cout << "wrote " << csv << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flow-matching restoration models: data, training, sampling, eval"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  auto* deg = app.add_subcommand("degrade", "synthesize a degradation pair corpus");
  std::string deg_task, deg_out;
  int64_t deg_n = 8, deg_size = 32;
  uint64_t deg_seed = 1;
  deg->add_option("--task", deg_task, "task id from the catalog")->required();
  deg->add_option("--n", deg_n, "pairs to generate")->check(CLI::NonNegativeNumber);
  deg->add_option("--seed", deg_seed, "base seed");
  deg->add_option("--size", deg_size, "square image size");
  deg->add_option("--out", deg_out, "output directory")->required();

  auto* trn = app.add_subcommand("train", "run the training loop from a config");
  std::string trn_config, trn_resume;
  trn->add_option("--config", trn_config, "run config JSON")->required();
  trn->add_option("--resume", trn_resume, "checkpoint directory to resume from");

  auto* smp = app.add_subcommand("sample", "restore one image with a checkpoint");
  std::string smp_ckpt, smp_input, smp_instr, smp_out = "sample";
  std::vector<std::string> smp_pairs;
  int64_t smp_steps = 20;
  uint64_t smp_seed = 1;
  smp->add_option("--checkpoint", smp_ckpt, "checkpoint directory")->required();
  smp->add_option("--input", smp_input, "degraded input PPM")->required();
  smp->add_option("--instruction", smp_instr, "text prompt");
  smp->add_option("--icl-pair", smp_pairs,
                  "exemplar pair LQ.ppm:HQ.ppm (repeatable)");
  smp->add_option("--steps", smp_steps, "Euler steps")->check(CLI::PositiveNumber);
  smp->add_option("--seed", smp_seed, "sampler seed");
  smp->add_option("--out", smp_out, "output basename (writes .ppm/.olvt/.json)");

  auto* evl = app.add_subcommand("eval", "score a checkpoint or saved outputs");
  std::string evl_ckpt, evl_manifest, evl_outputs, evl_report = "eval_report.json";
  evl->add_option("--checkpoint", evl_ckpt, "checkpoint directory");
  evl->add_option("--manifest", evl_manifest, "testset manifest.json")->required();
  evl->add_option("--outputs", evl_outputs,
                  "directory of <stem>_out.olvt files to score instead");
  evl->add_option("--report", evl_report, "report JSON path");

  auto* abl = app.add_subcommand("ablate", "sweep one axis and tabulate metrics");
  std::string abl_axis, abl_config;
  abl->add_option("--axis", abl_axis, "injection | fusion | prompt-format")
      ->required();
  abl->add_option("--config", abl_config, "base run config JSON")->required();

  CLI11_PARSE(app, argc, argv);

  std::string partial;
  try {
    if (deg->parsed()) {
      partial = deg_out;
      return run_degrade(deg_task, deg_n, deg_seed, deg_size, deg_out);
    }
    if (trn->parsed()) {
      try {
        partial = RunConfig::from_file(trn_config).out_dir;
      } catch (...) {
      }
      return run_train(trn_config, trn_resume);
    }
    if (smp->parsed()) {
      partial = smp_out;
      return run_sample(smp_ckpt, smp_input, smp_instr, smp_pairs, smp_steps,
                        smp_seed, smp_out);
    }
    if (evl->parsed()) {
      partial = evl_report;
      return run_eval(evl_ckpt, evl_manifest, evl_outputs, evl_report);
    }
    if (abl->parsed()) {
      try {
        partial = RunConfig::from_file(abl_config).out_dir;
      } catch (...) {
      }
      return run_ablate(abl_axis, abl_config);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    mark_failed(partial, e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    mark_failed(partial, e.what());
    return 2;
  }
  return 0;
}
