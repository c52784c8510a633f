#pragma once

#include <optional>
#include <span>
#include <vector>

#include "neurmatch/descriptors.hpp"
#include "neurmatch/nn.hpp"
#include "neurmatch/synthdata.hpp"

namespace neurmatch::fusion {

struct FusionTrainConfig {
  nn::TrainConfig train{.learning_rate = 1e-3, .batch_size = 4, .epochs = 20};
  double temperature = 0.1;
  int hidden = 256;
  int d_fused = 128;

  void validate() const;
};

// Symmetric cross-entropy over the similarity matrix of fused descriptors:
// each gt-matched A row must pick its partner among all B rows, and each
// gt-matched B column its partner among all A rows. Adds the parameter
// gradient into `grads` when given.
double contrastive_loss(const descriptors::FusionNet& fusion,
                        const descriptors::DescriptorSet& a,
                        const descriptors::DescriptorSet& b,
                        std::span<const synth::IndexPair> gt,
                        double temperature, nn::Gradients* grads = nullptr);

struct FusionTrainResult {
  descriptors::FusionNet fusion;
  std::vector<double> epoch_loss;
};

// Adam over tasks, batch_size tasks per step. Starts from `init` when given.
FusionTrainResult train_fusion(std::span<const synth::PairTask> tasks,
                               const FusionTrainConfig& cfg,
                               const std::optional<descriptors::FusionNet>& init =
                                   std::nullopt);

// Attaches fused descriptors to both sides of every task in place.
void fuse_tasks(std::span<synth::PairTask> tasks,
                const descriptors::FusionNet& fusion);

}  // namespace neurmatch::fusion
