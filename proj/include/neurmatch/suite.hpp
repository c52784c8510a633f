#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neurmatch/evalmetrics.hpp"
#include "neurmatch/fusion_training.hpp"
#include "neurmatch/gccm.hpp"
#include "neurmatch/synthdata.hpp"

namespace neurmatch::suite {

// Everything needed to regenerate data, retrain both models and rerun the
// benchmark from a single seed.
struct SuiteConfig {
  std::string name = "default";
  std::uint64_t seed = 7;
  synth::SceneConfig scene;

  // Stage 1: single-modality pairs under random TPS warps. The warp strength
  // of each task is drawn uniformly up to pretrain_sigma_max * image size.
  int pretrain_tasks = 2000;
  int pretrain_rendered = 100;  // rendered subset used for the fusion net
  double pretrain_sigma_max = 0.10;

  // Stage 2: cross-modal pairs, each expanded by rotation and contrast.
  int finetune_pairs = 12;
  synth::AugConfig finetune_aug{5, 2, 0.3};
  double finetune_sigma = 0.05;

  // Held-out benchmark pairs, one augmentation each.
  int bench_tasks = 100;
  double bench_sigma = 0.05;

  int subset_size = gccm::kDefaultSubsetSize;  // K
  int gccm_pos_per_task = 40;  // pretrain samples per class per task
  int gccm_finetune_pos_per_task = 20;
  gccm::CorruptionConfig corruption;
  nn::TrainConfig gccm_pretrain{.learning_rate = 2e-3, .batch_size = 64, .epochs = 40};
  nn::TrainConfig gccm_finetune{.learning_rate = 5e-4, .batch_size = 64, .epochs = 10};
  fusion::FusionTrainConfig fusion_pretrain;
  fusion::FusionTrainConfig fusion_finetune;

  eval::PipelineConfig pipeline;

  nlohmann::json to_json() const;
};

SuiteConfig default_suite();
// "default" or "smoke" (a few tasks, for tests).
SuiteConfig suite_by_name(const std::string& name);

synth::DeformConfig deform_for(double sigma_fraction, int image_size);

std::vector<synth::PairTask> pretrain_tasks(const SuiteConfig& cfg, int count,
                                            bool render);
std::vector<synth::PairTask> finetune_tasks(const SuiteConfig& cfg);
std::vector<synth::PairTask> bench_tasks(const SuiteConfig& cfg, double sigma_fraction,
                                         int count);

struct TrainedModels {
  descriptors::FusionNet fusion;
  gccm::GccmModel gccm_pretrain;
  gccm::GccmModel gccm;  // after fine-tuning
  nlohmann::json metrics = nlohmann::json::object();
};

using Logger = std::function<void(const std::string&)>;

TrainedModels train_models(const SuiteConfig& cfg, const Logger& log = {});

struct GccmStages {
  gccm::GccmTrainResult pretrain;
  gccm::GccmTrainResult finetune;
};

// GCCM pretraining on `pre`, then fine-tuning on `fine`, with subsets of
// cfg.subset_size matches. Only the task geometry is used.
GccmStages train_gccm_stages(const SuiteConfig& cfg, std::span<const synth::PairTask> pre,
                             std::span<const synth::PairTask> fine, const Logger& log = {});

struct SuiteRun {
  TrainedModels models;
  eval::EvalReport report;
};

SuiteRun run_suite(const SuiteConfig& cfg, int workers = 1, const Logger& log = {});

}  // namespace neurmatch::suite
