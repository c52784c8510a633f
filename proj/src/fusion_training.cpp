#include "neurmatch/fusion_training.hpp"

#include <cmath>
#include <numeric>

#include "neurmatch/error.hpp"
#include "neurmatch/random.hpp"

namespace neurmatch::fusion {
namespace {

// Row-wise log-softmax of m.
Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    const double lse = mx + std::log((m.row(r).array() - mx).exp().sum());
    out.row(r) = m.row(r).array() - lse;
  }
  return out;
}

// dL/dy for f = y / |y|, given dL/df.
Eigen::MatrixXd normalization_backward(const Eigen::MatrixXd& y,
                                       const Eigen::MatrixXd& f,
                                       const Eigen::MatrixXd& g) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(y.rows(), y.cols());
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const double norm = y.col(c).norm();
    if (norm == 0.0) continue;
    out.col(c) = (g.col(c) - f.col(c) * f.col(c).dot(g.col(c))) / norm;
  }
  return out;
}

}  // namespace

void FusionTrainConfig::validate() const {
  train.validate();
  if (!(temperature > 0.0)) throw ArgumentError("temperature must be > 0");
  if (hidden <= 0 || d_fused <= 0) throw ArgumentError("fusion widths must be positive");
}

double contrastive_loss(const descriptors::FusionNet& fusion,
                        const descriptors::DescriptorSet& a,
                        const descriptors::DescriptorSet& b,
                        std::span<const synth::IndexPair> gt,
                        double temperature, nn::Gradients* grads) {
  if (gt.empty()) return 0.0;
  const Eigen::MatrixXd xa = descriptors::fusion_inputs(a);
  const Eigen::MatrixXd xb = descriptors::fusion_inputs(b);
  const Eigen::MatrixXd ya = fusion.net.forward_batch(xa);
  const Eigen::MatrixXd yb = fusion.net.forward_batch(xb);
  const Eigen::MatrixXd fa = descriptors::normalize_columns(ya);
  const Eigen::MatrixXd fb = descriptors::normalize_columns(yb);
  const Eigen::MatrixXd s = fa.transpose() * fb / temperature;  // n_a x n_b

  const Eigen::MatrixXd lr = log_softmax_rows(s);
  const Eigen::MatrixXd lc = log_softmax_rows(s.transpose());  // n_b x n_a
  const double m = static_cast<double>(gt.size());
  double loss = 0.0;
  for (const auto& p : gt) loss -= lr(p.a, p.b) + lc(p.b, p.a);
  loss /= 2.0 * m;
  if (grads == nullptr) return loss;

  // dL/dS.
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(s.rows(), s.cols());
  for (const auto& p : gt) {
    g.row(p.a) += lr.row(p.a).array().exp().matrix();
    g(p.a, p.b) -= 1.0;
    g.col(p.b) += lc.row(p.b).array().exp().matrix().transpose();
    g(p.a, p.b) -= 1.0;
  }
  g /= 2.0 * m * temperature;
  const Eigen::MatrixXd gfa = fb * g.transpose();
  const Eigen::MatrixXd gfb = fa * g;
  *grads += nn::backward_batch(fusion.net, xa, normalization_backward(ya, fa, gfa));
  *grads += nn::backward_batch(fusion.net, xb, normalization_backward(yb, fb, gfb));
  return loss;
}

FusionTrainResult train_fusion(std::span<const synth::PairTask> tasks,
                               const FusionTrainConfig& cfg,
                               const std::optional<descriptors::FusionNet>& init) {
  cfg.validate();
  std::vector<std::size_t> usable;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    const auto& task = tasks[t];
    if (!task.descriptors_a.has_local() || !task.descriptors_a.has_semantic() ||
        !task.descriptors_b.has_local() || !task.descriptors_b.has_semantic()) {
      throw PreconditionError("train_fusion: tasks need local and semantic descriptors");
    }
    if (!task.gt_matches.empty()) usable.push_back(t);
  }
  if (usable.empty()) throw PreconditionError("train_fusion: no task has gt matches");

  FusionTrainResult result;
  if (init) {
    result.fusion = *init;
  } else {
    const auto& ds = tasks[usable.front()].descriptors_a;
    result.fusion = descriptors::make_fusion_net(
        static_cast<int>(ds.local.cols()), static_cast<int>(ds.semantic.cols()),
        cfg.hidden, cfg.d_fused, cfg.train.seed);
  }
  nn::Optimizer opt(result.fusion.net, cfg.train);
  Rng rng(derive_seed(cfg.train.seed, 0xf05e));
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(usable));
    double total = 0.0;
    for (std::size_t start = 0; start < usable.size();
         start += static_cast<std::size_t>(cfg.train.batch_size)) {
      const std::size_t end =
          std::min(usable.size(), start + static_cast<std::size_t>(cfg.train.batch_size));
      auto grads = nn::Gradients::zeros_like(result.fusion.net);
      for (std::size_t k = start; k < end; ++k) {
        const auto& task = tasks[usable[k]];
        total += contrastive_loss(result.fusion, task.descriptors_a,
                                  task.descriptors_b, task.gt_matches,
                                  cfg.temperature, &grads);
      }
      grads *= 1.0 / static_cast<double>(end - start);
      opt.step(result.fusion.net, grads);
    }
    const double mean = total / static_cast<double>(usable.size());
    if (!std::isfinite(mean)) {
      throw DivergenceError("fusion training loss became non-finite", epoch);
    }
    result.epoch_loss.push_back(mean);
  }
  return result;
}

void fuse_tasks(std::span<synth::PairTask> tasks,
                const descriptors::FusionNet& fusion) {
  for (auto& task : tasks) {
    task.descriptors_a = descriptors::fuse(task.descriptors_a, fusion);
    task.descriptors_b = descriptors::fuse(task.descriptors_b, fusion);
  }
}

}  // namespace neurmatch::fusion
