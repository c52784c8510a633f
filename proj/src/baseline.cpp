#include "neurmatch/baseline.hpp"

#include <nlohmann/json.hpp>

#include "neurmatch/error.hpp"
#include "neurmatch/random.hpp"

namespace neurmatch::baseline {

void RansacConfig::validate() const {
  if (iterations <= 0) throw ArgumentError("iterations must be positive");
  if (!(inlier_threshold > 0.0)) throw ArgumentError("inlier_threshold must be > 0");
  if (min_inliers <= 0) throw ArgumentError("min_inliers must be positive");
}

RansacResult ransac_similarity(const matcher::MatchSet& initial,
                               std::span<const Point2> keypoints_a,
                               std::span<const Point2> keypoints_b,
                               const RansacConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(initial.size());
  const int sample_size = cfg.model == RansacModel::kSimilarity ? 2 : 3;
  if (n < sample_size) {
    throw InsufficientMatchesError("ransac needs at least " +
                                   std::to_string(sample_size) + " matches");
  }
  std::vector<geometry::PointPair> pairs(n);
  for (int m = 0; m < n; ++m) {
    const auto& x = initial.matches[m];
    pairs[m] = {keypoints_a[x.i], keypoints_b[x.j]};
  }

  RansacResult best;
  best.inliers.n_a = initial.n_a;
  best.inliers.n_b = initial.n_b;
  std::vector<char> mask(n), best_mask;
  int best_count = 0;
  geometry::PointPair sample[3];
  for (int t = 0; t < cfg.iterations; ++t) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(t)));
    int picks[3] = {-1, -1, -1};
    for (int s = 0; s < sample_size; ++s) {
      int m;
      do {
        m = static_cast<int>(rng.index(n));
      } while (m == picks[0] || m == picks[1]);
      picks[s] = m;
      sample[s] = pairs[m];
    }
    geometry::SimilarityTransform sim;
    geometry::AffineTransform aff;
    try {
      if (cfg.model == RansacModel::kSimilarity) {
        sim = geometry::similarity_fit(std::span(sample, 2));
      } else {
        aff = geometry::affine_fit(std::span(sample, 3));
      }
    } catch (const DegenerateConfigurationError&) {
      continue;
    }
    int count = 0;
    for (int m = 0; m < n; ++m) {
      const Point2 p = cfg.model == RansacModel::kSimilarity
                           ? sim.apply(pairs[m].first)
                           : aff.apply(pairs[m].first);
      mask[m] = geometry::distance(p, pairs[m].second) <= cfg.inlier_threshold;
      count += mask[m];
    }
    if (count > best_count) {
      best_count = count;
      best_mask = mask;
      best.similarity = sim;
      best.affine = aff;
      best.best_iteration = t;
    }
  }
  if (best_count < cfg.min_inliers) {
    best.consensus = false;
    return best;
  }
  best.consensus = true;
  for (int m = 0; m < n; ++m) {
    if (best_mask[m]) best.inliers.matches.push_back(initial.matches[m]);
  }
  return best;
}

nlohmann::json to_json(const RansacResult& r) {
  return {{"consensus", r.consensus},
          {"best_iteration", r.best_iteration},
          {"similarity", geometry::to_json(r.similarity)},
          {"affine", geometry::to_json(r.affine)},
          {"inliers", matcher::to_json(r.inliers)}};
}

}  // namespace neurmatch::baseline
