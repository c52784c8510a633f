#include "neurmatch/suite.hpp"

#include <fmt/format.h>

#include "neurmatch/error.hpp"
#include "neurmatch/random.hpp"

namespace neurmatch::suite {
namespace {

enum Stream : std::uint64_t {
  kPretrain = 1000,
  kPretrainSigma = 2000,
  kFinetune = 3000,
  kBench = 4000,
  kGccmPretrainSet = 5000,
  kGccmFinetuneSet = 5001,
  kGccmPretrainInit = 5002,
  kFusionInit = 6000,
};

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

nlohmann::json train_json(const nn::TrainConfig& t) {
  return {{"learning_rate", t.learning_rate}, {"batch_size", t.batch_size},
          {"epochs", t.epochs}, {"seed", t.seed}};
}

}  // namespace

nlohmann::json SuiteConfig::to_json() const {
  return {{"name", name},
          {"seed", seed},
          {"scene", {{"image_size", scene.image_size}, {"n_neurons", scene.n_neurons}}},
          {"pretrain",
           {{"tasks", pretrain_tasks},
            {"rendered", pretrain_rendered},
            {"sigma_max", pretrain_sigma_max}}},
          {"finetune",
           {{"pairs", finetune_pairs},
            {"rotation_steps", finetune_aug.rotation_steps},
            {"contrast_variants", finetune_aug.contrast_variants},
            {"max_rotation", finetune_aug.max_rotation},
            {"sigma", finetune_sigma}}},
          {"bench", {{"tasks", bench_tasks}, {"sigma", bench_sigma}}},
          {"gccm",
           {{"subset_size", subset_size},
            {"pos_per_task", gccm_pos_per_task},
            {"finetune_pos_per_task", gccm_finetune_pos_per_task},
            {"min_displacement", corruption.min_displacement},
            {"max_displacement", corruption.max_displacement},
            {"wrong_index_fraction", corruption.wrong_index_fraction},
            {"single_fraction", corruption.single_fraction},
            {"pretrain", train_json(gccm_pretrain)},
            {"finetune", train_json(gccm_finetune)}}},
          {"fusion",
           {{"temperature", fusion_pretrain.temperature},
            {"hidden", fusion_pretrain.hidden},
            {"d_fused", fusion_pretrain.d_fused},
            {"pretrain", train_json(fusion_pretrain.train)},
            {"finetune", train_json(fusion_finetune.train)}}},
          {"pipeline", pipeline.to_json()}};
}

SuiteConfig default_suite() {
  SuiteConfig cfg;
  cfg.fusion_pretrain.train = {.learning_rate = 1e-3, .batch_size = 4, .epochs = 10};
  cfg.fusion_finetune.train = {.learning_rate = 5e-4, .batch_size = 4, .epochs = 20};
  cfg.corruption.single_fraction = 0.75;
  cfg.pipeline.verify.tau = 0.05;
  cfg.pipeline.matcher.min_score = 0.0;
  return cfg;
}

SuiteConfig suite_by_name(const std::string& name) {
  if (name == "default") return default_suite();
  if (name == "smoke") {
    SuiteConfig cfg = default_suite();
    cfg.name = "smoke";
    cfg.scene.image_size = 192;
    cfg.scene.n_neurons = 16;
    cfg.pretrain_tasks = 30;
    cfg.pretrain_rendered = 4;
    cfg.finetune_pairs = 2;
    cfg.finetune_aug = {2, 2, 0.3};
    cfg.gccm_finetune_pos_per_task = 40;  // 8 tasks, enough for the 100 per class floor
    cfg.bench_tasks = 3;
    cfg.gccm_pretrain.epochs = 2;
    cfg.gccm_finetune.epochs = 1;
    cfg.fusion_pretrain.train.epochs = 1;
    cfg.fusion_finetune.train.epochs = 1;
    cfg.fusion_pretrain.hidden = cfg.fusion_finetune.hidden = 32;
    cfg.fusion_pretrain.d_fused = cfg.fusion_finetune.d_fused = 16;
    return cfg;
  }
  throw ArgumentError("unknown suite '" + name + "'");
}

synth::DeformConfig deform_for(double sigma_fraction, int image_size) {
  synth::DeformConfig d;
  d.displacement_sigma = sigma_fraction * image_size;
  return d;
}

std::vector<synth::PairTask> pretrain_tasks(const SuiteConfig& cfg, int count,
                                            bool render) {
  synth::TaskOptions options;
  options.render = render;
  Rng sigma_rng(derive_seed(cfg.seed, kPretrainSigma));
  std::vector<synth::PairTask> tasks;
  tasks.reserve(count);
  for (int t = 0; t < count; ++t) {
    const double sigma = sigma_rng.uniform(0.0, cfg.pretrain_sigma_max);
    tasks.push_back(synth::make_pretrain_task(
        cfg.scene, deform_for(sigma, cfg.scene.image_size),
        derive_seed(cfg.seed, kPretrain + static_cast<std::uint64_t>(t) * 7919),
        options));
  }
  return tasks;
}

std::vector<synth::PairTask> finetune_tasks(const SuiteConfig& cfg) {
  std::vector<synth::PairTask> tasks;
  for (int p = 0; p < cfg.finetune_pairs; ++p) {
    auto batch = synth::make_crossmodal_task(
        cfg.scene, deform_for(cfg.finetune_sigma, cfg.scene.image_size),
        cfg.finetune_aug,
        derive_seed(cfg.seed, kFinetune + static_cast<std::uint64_t>(p) * 7919));
    for (auto& t : batch) tasks.push_back(std::move(t));
  }
  return tasks;
}

std::vector<synth::PairTask> bench_tasks(const SuiteConfig& cfg, double sigma_fraction,
                                         int count) {
  std::vector<synth::PairTask> tasks;
  const synth::AugConfig single{1, 1, 0.0};
  for (int p = 0; p < count; ++p) {
    auto batch = synth::make_crossmodal_task(
        cfg.scene, deform_for(sigma_fraction, cfg.scene.image_size), single,
        derive_seed(cfg.seed, kBench + static_cast<std::uint64_t>(p) * 7919));
    tasks.push_back(std::move(batch.front()));
  }
  return tasks;
}

GccmStages train_gccm_stages(const SuiteConfig& cfg, std::span<const synth::PairTask> pre,
                             std::span<const synth::PairTask> fine, const Logger& log) {
  const int k = cfg.subset_size;
  const int n_pre = cfg.gccm_pos_per_task * static_cast<int>(pre.size());
  const auto pre_set = gccm::make_gccm_training_set(
      pre, n_pre, n_pre, cfg.corruption, derive_seed(cfg.seed, kGccmPretrainSet), k);
  auto gp = cfg.gccm_pretrain;
  gp.seed = derive_seed(cfg.seed, kGccmPretrainInit);
  auto pre_result = gccm::train_gccm(pre_set, gp, std::nullopt, k);
  pre_result.model.training = {{"stage", "pretrain"},
                               {"tasks", pre.size()},
                               {"samples", pre_set.size()},
                               {"seed", gp.seed},
                               {"heldout_accuracy", pre_result.heldout_accuracy}};
  say(log, fmt::format("gccm pretrain held-out accuracy {:.4f}",
                       pre_result.heldout_accuracy));

  const int n_fine = cfg.gccm_finetune_pos_per_task * static_cast<int>(fine.size());
  const auto fine_set = gccm::make_gccm_training_set(
      fine, n_fine, n_fine, cfg.corruption, derive_seed(cfg.seed, kGccmFinetuneSet), k);
  auto gf = cfg.gccm_finetune;
  gf.seed = derive_seed(cfg.seed, kGccmPretrainInit + 1);
  auto fine_result = gccm::train_gccm(fine_set, gf, pre_result.model, k);
  fine_result.model.training = {{"stage", "finetune"},
                                {"tasks", fine.size()},
                                {"samples", fine_set.size()},
                                {"seed", gf.seed},
                                {"init", pre_result.model.training},
                                {"heldout_accuracy", fine_result.heldout_accuracy}};
  say(log, fmt::format("gccm fine-tune held-out accuracy {:.4f}",
                       fine_result.heldout_accuracy));

  return {std::move(pre_result), std::move(fine_result)};
}

TrainedModels train_models(const SuiteConfig& cfg, const Logger& log) {
  TrainedModels out;

  say(log, fmt::format("generating {} pretrain tasks", cfg.pretrain_tasks));
  const auto pre = pretrain_tasks(cfg, cfg.pretrain_tasks, false);
  const auto pre_rendered = pretrain_tasks(cfg, cfg.pretrain_rendered, true);
  say(log, "generating fine-tune tasks");
  auto fine = finetune_tasks(cfg);

  auto fp = cfg.fusion_pretrain;
  fp.train.seed = derive_seed(cfg.seed, kFusionInit);
  const auto fusion_pre = fusion::train_fusion(pre_rendered, fp);
  auto ff = cfg.fusion_finetune;
  ff.train.seed = derive_seed(cfg.seed, kFusionInit + 1);
  const auto fusion_fine = fusion::train_fusion(fine, ff, fusion_pre.fusion);
  out.fusion = fusion_fine.fusion;
  say(log, fmt::format("fusion loss {:.4f} -> {:.4f}", fusion_pre.epoch_loss.front(),
                       fusion_fine.epoch_loss.back()));

  auto stages = train_gccm_stages(cfg, pre, fine, log);
  auto& pre_result = stages.pretrain;
  auto& fine_result = stages.finetune;
  out.gccm_pretrain = pre_result.model;
  out.gccm = fine_result.model;
  out.metrics = {{"fusion_pretrain_loss", fusion_pre.epoch_loss},
                 {"fusion_finetune_loss", fusion_fine.epoch_loss},
                 {"gccm_pretrain_loss", pre_result.epoch_loss},
                 {"gccm_pretrain_heldout_accuracy", pre_result.heldout_accuracy},
                 {"gccm_finetune_loss", fine_result.epoch_loss},
                 {"gccm_finetune_heldout_accuracy", fine_result.heldout_accuracy}};
  return out;
}

SuiteRun run_suite(const SuiteConfig& cfg, int workers, const Logger& log) {
  SuiteRun run;
  run.models = train_models(cfg, log);
  say(log, fmt::format("generating {} benchmark tasks", cfg.bench_tasks));
  auto tasks = bench_tasks(cfg, cfg.bench_sigma, cfg.bench_tasks);
  fusion::fuse_tasks(tasks, run.models.fusion);
  const auto methods = eval::default_methods();
  run.report = eval::benchmark(methods, tasks, cfg.pipeline, &run.models.gccm, workers);
  run.report.suite = cfg.name;
  run.report.seed = cfg.seed;
  run.report.config = {{"suite", cfg.to_json()}, {"pipeline", cfg.pipeline.to_json()}};
  run.report.config_hash = eval::config_hash(run.report.config);
  return run;
}

}  // namespace neurmatch::suite
