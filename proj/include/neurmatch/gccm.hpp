#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "neurmatch/geometry.hpp"
#include "neurmatch/matcher.hpp"
#include "neurmatch/nn.hpp"
#include "neurmatch/synthdata.hpp"

namespace neurmatch::gccm {

using geometry::Point2;
using geometry::PointPair;

inline constexpr int kDefaultSubsetSize = 4;
inline constexpr int kGccmFormatVersion = 1;

// Coordinate-only feature vector for a subset of k matches: each side is
// centered on its centroid and divided by sqrt(k - 1) times its RMS radius,
// members are ordered by A-side x then y, and the layout is
// (x_a, y_a, x_b, y_b) per member. Members are sorted (A then B
// coordinates) before any arithmetic, so the result is bit-identical for
// every member order. Entries lie in [-1, 1].
Eigen::VectorXd canonicalize_subset(std::span<const PointPair> pairs,
                                    double image_extent_a,
                                    double image_extent_b);

struct SubsetSample {
  std::vector<int> member_indices;
  Eigen::VectorXd feature;
};

struct LabeledSubset {
  Eigen::VectorXd feature;
  double label = 0.0;  // 1 = plausible
  int task_index = -1;
};

// Learned subset classifier f(subset) in (0, 1).
struct GccmModel {
  nn::DenseNet net;
  int subset_size = kDefaultSubsetSize;
  nlohmann::json training = nlohmann::json::object();
};

// 4k -> 64 -> 64 -> 1, relu / relu / sigmoid.
GccmModel make_gccm_model(std::uint64_t seed,
                          int subset_size = kDefaultSubsetSize,
                          int hidden = 64);

double score_subset(const GccmModel& model, const Eigen::VectorXd& feature);
// One score per column of `features`.
Eigen::VectorXd score_subsets(const GccmModel& model,
                              const Eigen::MatrixXd& features);

struct VerifyConfig {
  double tau = 0.05;
  // Sampling budget: subsets_per_match * |initial| / k subsets, topped up
  // until every match sits in at least min_coverage subsets. A positive
  // n_subsets overrides the budget.
  int subsets_per_match = 64;
  int n_subsets = 0;
  int min_coverage = 8;
  std::uint64_t seed = 0;
  double image_extent_a = 512.0;
  double image_extent_b = 512.0;

  void validate() const;
};

struct VerificationResult {
  std::vector<double> confidence;  // per initial match, same order
  std::vector<int> subsets_seen;
  matcher::MatchSet final;
  double tau = 0.05;
  std::size_t n_subsets = 0;
};

// Seeded uniform k-subsets of {0..n-1} with a coverage top-up pass.
std::vector<std::vector<int>> sample_subsets(int n_matches, int subset_size,
                                             std::size_t n_subsets,
                                             int min_coverage,
                                             std::uint64_t seed);

// Mean subset score per match and the number of subsets containing it.
void aggregate_confidence(int n_matches,
                          std::span<const std::vector<int>> subsets,
                          std::span<const double> scores,
                          std::vector<double>& confidence,
                          std::vector<int>& seen);

// Throws InsufficientMatchesError when |initial| < k.
VerificationResult verify(const GccmModel& model,
                          const matcher::MatchSet& initial,
                          std::span<const Point2> keypoints_a,
                          std::span<const Point2> keypoints_b,
                          const VerifyConfig& cfg);

// Keeps matches with confidence > tau and adequate coverage.
matcher::MatchSet threshold(const matcher::MatchSet& initial,
                            const VerificationResult& result, double tau,
                            int min_coverage);

struct CorruptionConfig {
  double min_displacement = 30.0;  // >= 10 x gt tolerance by default
  double max_displacement = 120.0;
  double wrong_index_fraction = 0.5;
  // Share of negatives with exactly one corrupted member; the rest replace
  // a uniform 1..k members.
  double single_fraction = 0.0;

  void validate(double gt_tolerance) const;
};

// Balanced positives (k gt matches) and negatives (a positive with 1..k
// members replaced by a wrong B index or a displaced B coordinate, each at
// least min_displacement from the true position). Tasks with fewer than k gt
// matches are skipped.
std::vector<LabeledSubset> make_gccm_training_set(
    std::span<const synth::PairTask> tasks, int n_pos, int n_neg,
    const CorruptionConfig& corruption, std::uint64_t seed,
    int subset_size = kDefaultSubsetSize);

struct GccmTrainResult {
  GccmModel model;
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  std::size_t n_train = 0;
  std::size_t n_heldout = 0;
};

// Binary cross-entropy on a seeded 80/20 split. Starts from `init` when
// given (fine-tuning), else from a fresh model seeded with cfg.seed.
GccmTrainResult train_gccm(std::span<const LabeledSubset> samples,
                           const nn::TrainConfig& cfg,
                           const std::optional<GccmModel>& init = std::nullopt,
                           int subset_size = kDefaultSubsetSize);

double accuracy(const GccmModel& model, std::span<const LabeledSubset> samples);

nlohmann::json to_json(const GccmModel& model);
GccmModel gccm_from_json(const nlohmann::json& j);
void write_gccm(const GccmModel& model, const std::filesystem::path& path);
GccmModel read_gccm(const std::filesystem::path& path);

nlohmann::json to_json(const VerificationResult& r,
                       const matcher::MatchSet& initial);

}  // namespace neurmatch::gccm
