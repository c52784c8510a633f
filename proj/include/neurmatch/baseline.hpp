#pragma once

#include <cstdint>
#include <span>

#include <nlohmann/json_fwd.hpp>

#include "neurmatch/geometry.hpp"
#include "neurmatch/matcher.hpp"

namespace neurmatch::baseline {

using geometry::Point2;

enum class RansacModel { kSimilarity, kAffine };

struct RansacConfig {
  int iterations = 1000;
  double inlier_threshold = 3.0;  // pixels
  int min_inliers = 3;
  std::uint64_t seed = 0;
  RansacModel model = RansacModel::kSimilarity;

  void validate() const;
};

struct RansacResult {
  matcher::MatchSet inliers;
  geometry::SimilarityTransform similarity;
  geometry::AffineTransform affine;
  bool consensus = false;  // false: no hypothesis reached min_inliers
  int best_iteration = -1;
};

// Hypothesize-and-verify on minimal samples (2 matches for a similarity, 3
// for an affine map). Iteration t draws from substream (seed, t); the first
// hypothesis with the largest consensus wins and is not refitted.
RansacResult ransac_similarity(const matcher::MatchSet& initial,
                               std::span<const Point2> keypoints_a,
                               std::span<const Point2> keypoints_b,
                               const RansacConfig& cfg);

nlohmann::json to_json(const RansacResult& r);

}  // namespace neurmatch::baseline
