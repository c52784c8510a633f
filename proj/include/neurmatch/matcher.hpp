#pragma once

#include <filesystem>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "neurmatch/descriptors.hpp"
#include "neurmatch/synthdata.hpp"

namespace neurmatch::matcher {

struct Match {
  int i = 0;  // index into A
  int j = 0;  // index into B
  double score = 0.0;

  friend bool operator==(const Match&, const Match&) = default;
};

// One-to-one scored correspondences between two keypoint sets.
struct MatchSet {
  std::vector<Match> matches;
  int n_a = 0;
  int n_b = 0;

  std::size_t size() const { return matches.size(); }
  bool empty() const { return matches.empty(); }
  // Throws FormatError on out-of-range or repeated indices or scores
  // outside [0, 1].
  void validate() const;

  friend bool operator==(const MatchSet&, const MatchSet&) = default;
};

struct MatcherConfig {
  double temperature = 0.1;
  double min_score = 0.2;
  bool local_only = false;  // ignore fused descriptors even when present

  void validate() const;
};

// Elementwise product of the row-wise and column-wise softmax of
// similarity / temperature.
Eigen::MatrixXd dual_softmax(const Eigen::MatrixXd& similarity,
                             double temperature);

// Mutual-argmax filter over dual-softmax scores. Ties resolve to the lowest
// index.
MatchSet match_from_similarity(const Eigen::MatrixXd& similarity,
                               double temperature, double min_score);

// Fused descriptors are used when both sets carry them (unless
// cfg.local_only), otherwise local descriptors.
MatchSet match_initial(const descriptors::DescriptorSet& a,
                       const descriptors::DescriptorSet& b,
                       const MatcherConfig& cfg = {});

// Correct iff |gt(p_a) - p_b| <= tolerance.
std::vector<bool> apply_gt_labels(const MatchSet& m, const synth::PairTask& task);

nlohmann::json to_json(const MatchSet& m);
MatchSet matches_from_json(const nlohmann::json& j);
void write_matches(const MatchSet& m, const std::filesystem::path& path);
MatchSet read_matches(const std::filesystem::path& path);

}  // namespace neurmatch::matcher
