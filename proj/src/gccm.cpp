#include "neurmatch/gccm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <tuple>

#include "neurmatch/error.hpp"
#include "neurmatch/random.hpp"

namespace neurmatch::gccm {
namespace {

constexpr double kMinRadius = 1.0;

// Centers one side of the subset and returns the divisor that maps it into
// the unit square.
double side_scale(std::span<const Point2> pts, Point2& centroid, double extent) {
  const double k = static_cast<double>(pts.size());
  centroid = {};
  for (Point2 p : pts) centroid = centroid + p;
  centroid = (1.0 / k) * centroid;
  double sq = 0.0;
  for (Point2 p : pts) {
    const Point2 d = p - centroid;
    sq += d.x * d.x + d.y * d.y;
  }
  const double rms = std::sqrt(sq / k);
  if (rms < kMinRadius) return 0.5 * std::numbers::sqrt2 * extent;
  return std::sqrt(k - 1.0) * rms;
}

nlohmann::json canonicalization_spec(int k) {
  return {{"subset_size", k},
          {"center", "centroid"},
          {"scale", "sqrt(k-1) * rms_radius"},
          {"fallback_scale", "image_half_diagonal"},
          {"min_radius_px", kMinRadius},
          {"member_order", "a_x,a_y,b_x,b_y"},
          {"layout", "x_a,y_a,x_b,y_b"},
          {"clamp", {-1.0, 1.0}}};
}

}  // namespace

Eigen::VectorXd canonicalize_subset(std::span<const PointPair> pairs,
                                    double image_extent_a,
                                    double image_extent_b) {
  const std::size_t k = pairs.size();
  if (k < 2) throw ArgumentError("subset needs at least 2 pairs");
  for (const auto& [pa, pb] : pairs) {
    if (!geometry::is_finite(pa) || !geometry::is_finite(pb)) {
      throw ArgumentError("subset coordinates must be finite");
    }
  }
  // Sort before any arithmetic so sums run in the same order for every
  // permutation of the members.
  std::vector<PointPair> sorted(pairs.begin(), pairs.end());
  std::sort(sorted.begin(), sorted.end(), [](const PointPair& l, const PointPair& r) {
    return std::tie(l.first.x, l.first.y, l.second.x, l.second.y) <
           std::tie(r.first.x, r.first.y, r.second.x, r.second.y);
  });
  std::vector<Point2> a(k), b(k);
  for (std::size_t m = 0; m < k; ++m) {
    a[m] = sorted[m].first;
    b[m] = sorted[m].second;
  }
  Point2 ca, cb;
  const double sa = side_scale(a, ca, image_extent_a);
  const double sb = side_scale(b, cb, image_extent_b);

  Eigen::VectorXd f(4 * k);
  auto put = [&](Eigen::Index at, double v) { f(at) = std::clamp(v, -1.0, 1.0); };
  for (std::size_t m = 0; m < k; ++m) {
    put(4 * m + 0, (a[m].x - ca.x) / sa);
    put(4 * m + 1, (a[m].y - ca.y) / sa);
    put(4 * m + 2, (b[m].x - cb.x) / sb);
    put(4 * m + 3, (b[m].y - cb.y) / sb);
  }
  return f;
}

GccmModel make_gccm_model(std::uint64_t seed, int subset_size, int hidden) {
  if (subset_size < 2) throw ArgumentError("subset size must be >= 2");
  const nn::LayerSpec specs[] = {{hidden, nn::Activation::kRelu},
                                 {hidden, nn::Activation::kRelu},
                                 {1, nn::Activation::kSigmoid}};
  GccmModel model;
  model.net = nn::DenseNet::make(4 * subset_size, specs, seed);
  model.subset_size = subset_size;
  return model;
}

double score_subset(const GccmModel& model, const Eigen::VectorXd& feature) {
  return model.net.forward(feature)(0);
}

Eigen::VectorXd score_subsets(const GccmModel& model,
                              const Eigen::MatrixXd& features) {
  Eigen::VectorXd scores(features.cols());
  constexpr Eigen::Index kChunk = 4096;
  for (Eigen::Index start = 0; start < features.cols(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, features.cols() - start);
    scores.segment(start, n) =
        model.net.forward_batch(features.middleCols(start, n)).row(0).transpose();
  }
  return scores;
}

void VerifyConfig::validate() const {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ArgumentError("tau must lie in [0, 1]");
  if (subsets_per_match <= 0 && n_subsets <= 0) {
    throw ArgumentError("subset budget must be positive");
  }
  if (n_subsets < 0) throw ArgumentError("n_subsets must be >= 0");
  if (min_coverage < 0) throw ArgumentError("min_coverage must be >= 0");
}

std::vector<std::vector<int>> sample_subsets(int n_matches, int subset_size,
                                             std::size_t n_subsets,
                                             int min_coverage,
                                             std::uint64_t seed) {
  if (n_matches < subset_size) {
    throw InsufficientMatchesError("need at least " + std::to_string(subset_size) +
                                   " matches, have " + std::to_string(n_matches));
  }
  Rng rng(seed);
  std::vector<std::vector<int>> subsets;
  subsets.reserve(n_subsets);
  std::vector<int> seen(n_matches, 0);
  auto draw = [&](std::vector<int> members) {
    while (static_cast<int>(members.size()) < subset_size) {
      const int m = static_cast<int>(rng.index(n_matches));
      if (std::find(members.begin(), members.end(), m) == members.end()) {
        members.push_back(m);
      }
    }
    for (int m : members) ++seen[m];
    subsets.push_back(std::move(members));
  };
  for (std::size_t s = 0; s < n_subsets; ++s) draw({});
  for (int m = 0; m < n_matches; ++m) {
    while (seen[m] < min_coverage) draw({m});
  }
  return subsets;
}

void aggregate_confidence(int n_matches,
                          std::span<const std::vector<int>> subsets,
                          std::span<const double> scores,
                          std::vector<double>& confidence,
                          std::vector<int>& seen) {
  if (subsets.size() != scores.size()) {
    throw ArgumentError("one score per subset is required");
  }
  std::vector<double> sum(n_matches, 0.0);
  seen.assign(n_matches, 0);
  for (std::size_t s = 0; s < subsets.size(); ++s) {
    for (int m : subsets[s]) {
      sum[m] += scores[s];
      ++seen[m];
    }
  }
  confidence.assign(n_matches, 0.0);
  for (int m = 0; m < n_matches; ++m) {
    if (seen[m] > 0) confidence[m] = sum[m] / seen[m];
  }
}

matcher::MatchSet threshold(const matcher::MatchSet& initial,
                            const VerificationResult& result, double tau,
                            int min_coverage) {
  matcher::MatchSet out;
  out.n_a = initial.n_a;
  out.n_b = initial.n_b;
  for (std::size_t m = 0; m < initial.size(); ++m) {
    if (result.confidence[m] > tau && result.subsets_seen[m] >= min_coverage) {
      out.matches.push_back(initial.matches[m]);
    }
  }
  return out;
}

VerificationResult verify(const GccmModel& model,
                          const matcher::MatchSet& initial,
                          std::span<const Point2> keypoints_a,
                          std::span<const Point2> keypoints_b,
                          const VerifyConfig& cfg) {
  cfg.validate();
  const int k = model.subset_size;
  const int n = static_cast<int>(initial.size());
  if (n < k) {
    throw InsufficientMatchesError("verify needs at least " + std::to_string(k) +
                                   " initial matches, have " + std::to_string(n));
  }
  const std::size_t budget =
      cfg.n_subsets > 0
          ? static_cast<std::size_t>(cfg.n_subsets)
          : std::max<std::size_t>(
                1, static_cast<std::size_t>(cfg.subsets_per_match) * n / k);
  const auto subsets = sample_subsets(n, k, budget, cfg.min_coverage, cfg.seed);

  Eigen::MatrixXd features(4 * k, static_cast<Eigen::Index>(subsets.size()));
  std::vector<PointPair> pairs(k);
  for (std::size_t s = 0; s < subsets.size(); ++s) {
    for (int m = 0; m < k; ++m) {
      const auto& match = initial.matches[subsets[s][m]];
      pairs[m] = {keypoints_a[match.i], keypoints_b[match.j]};
    }
    features.col(static_cast<Eigen::Index>(s)) =
        canonicalize_subset(pairs, cfg.image_extent_a, cfg.image_extent_b);
  }
  const Eigen::VectorXd scores = score_subsets(model, features);

  VerificationResult result;
  result.tau = cfg.tau;
  result.n_subsets = subsets.size();
  aggregate_confidence(n, subsets,
                       std::span<const double>(scores.data(), scores.size()),
                       result.confidence, result.subsets_seen);
  result.final = threshold(initial, result, cfg.tau, cfg.min_coverage);
  return result;
}

void CorruptionConfig::validate(double gt_tolerance) const {
  if (!(min_displacement > gt_tolerance)) {
    throw ArgumentError(
        "corruption displacement must exceed the gt tolerance so negatives "
        "violate it");
  }
  if (!(max_displacement >= min_displacement)) {
    throw ArgumentError("max_displacement must be >= min_displacement");
  }
  if (!(wrong_index_fraction >= 0.0 && wrong_index_fraction <= 1.0)) {
    throw ArgumentError("wrong_index_fraction must lie in [0, 1]");
  }
  if (!(single_fraction >= 0.0 && single_fraction <= 1.0)) {
    throw ArgumentError("single_fraction must lie in [0, 1]");
  }
}

std::vector<LabeledSubset> make_gccm_training_set(
    std::span<const synth::PairTask> tasks, int n_pos, int n_neg,
    const CorruptionConfig& corruption, std::uint64_t seed, int subset_size) {
  if (n_pos < 0 || n_neg < 0) throw ArgumentError("sample counts must be >= 0");
  std::vector<int> eligible;
  double tolerance = 0.0;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    tolerance = std::max(tolerance, tasks[t].meta.gt_tolerance);
    if (static_cast<int>(tasks[t].gt_matches.size()) >= subset_size) {
      eligible.push_back(static_cast<int>(t));
    }
  }
  corruption.validate(tolerance);
  if (eligible.empty()) {
    throw InsufficientMatchesError("no task has enough gt matches for a subset");
  }

  Rng rng(seed);
  std::vector<LabeledSubset> out;
  out.reserve(static_cast<std::size_t>(n_pos) + n_neg);
  std::vector<PointPair> pairs(subset_size);

  auto draw_positive = [&](const synth::PairTask& task) {
    std::vector<int> picks;
    const int n = static_cast<int>(task.gt_matches.size());
    while (static_cast<int>(picks.size()) < subset_size) {
      const int m = static_cast<int>(rng.index(n));
      if (std::find(picks.begin(), picks.end(), m) == picks.end()) picks.push_back(m);
    }
    for (int s = 0; s < subset_size; ++s) {
      const auto& gm = task.gt_matches[picks[s]];
      pairs[s] = {task.keypoints_a[gm.a], task.keypoints_b[gm.b]};
    }
    return picks;
  };

  for (int s = 0; s < n_pos + n_neg; ++s) {
    const bool positive = s < n_pos;
    const int t = eligible[rng.index(eligible.size())];
    const auto& task = tasks[t];
    const auto picks = draw_positive(task);
    if (positive) {
      for (const auto& [pa, pb] : pairs) {
        if (geometry::distance(task.gt_transform.apply(pa), pb) > task.meta.gt_tolerance) {
          throw FormatError("training positive violates the gt tolerance");
        }
      }
    } else {
      std::vector<int> slots(subset_size);
      std::iota(slots.begin(), slots.end(), 0);
      rng.shuffle(std::span<int>(slots));
      const int replaced = rng.uniform() < corruption.single_fraction
                               ? 1
                               : 1 + static_cast<int>(rng.index(subset_size));
      for (int r = 0; r < replaced; ++r) {
        const int slot = slots[r];
        const Point2 truth = task.gt_transform.apply(pairs[slot].first);
        bool done = false;
        if (rng.uniform() < corruption.wrong_index_fraction) {
          for (int attempt = 0; attempt < 20 && !done; ++attempt) {
            const Point2 cand = task.keypoints_b[rng.index(task.keypoints_b.size())];
            const bool in_use = std::any_of(pairs.begin(), pairs.end(),
                                            [&](const PointPair& p) { return p.second == cand; });
            if (!in_use && geometry::distance(cand, truth) >= corruption.min_displacement) {
              pairs[slot].second = cand;
              done = true;
            }
          }
        }
        if (!done) {
          const double mag =
              rng.uniform(corruption.min_displacement, corruption.max_displacement);
          const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
          pairs[slot].second = {truth.x + mag * std::cos(dir),
                                truth.y + mag * std::sin(dir)};
        }
      }
    }
    const double extent = task.meta.image_size > 0 ? task.meta.image_size : 512.0;
    out.push_back({canonicalize_subset(pairs, extent, extent),
                   positive ? 1.0 : 0.0, t});
  }
  return out;
}

double accuracy(const GccmModel& model, std::span<const LabeledSubset> samples) {
  if (samples.empty()) return 0.0;
  Eigen::MatrixXd features(samples.front().feature.size(),
                           static_cast<Eigen::Index>(samples.size()));
  for (std::size_t s = 0; s < samples.size(); ++s) {
    features.col(static_cast<Eigen::Index>(s)) = samples[s].feature;
  }
  const Eigen::VectorXd scores = score_subsets(model, features);
  std::size_t correct = 0;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    correct += (scores(static_cast<Eigen::Index>(s)) > 0.5) == (samples[s].label > 0.5);
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

GccmTrainResult train_gccm(std::span<const LabeledSubset> samples,
                           const nn::TrainConfig& cfg,
                           const std::optional<GccmModel>& init,
                           int subset_size) {
  std::size_t positives = 0;
  for (const auto& s : samples) positives += s.label > 0.5;
  const std::size_t negatives = samples.size() - positives;
  if (positives < 100 || negatives < 100) {
    throw PreconditionError("train_gccm needs at least 100 samples per class (have " +
                            std::to_string(positives) + " / " +
                            std::to_string(negatives) + ")");
  }
  GccmModel model = init ? *init : make_gccm_model(cfg.seed, subset_size);
  const auto dim = static_cast<std::size_t>(model.net.input_dim());
  for (const auto& s : samples) {
    if (static_cast<std::size_t>(s.feature.size()) != dim) {
      throw ArgumentError("sample feature width does not match the model");
    }
  }

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cfg.seed, 0x5117));
  rng.shuffle(std::span<std::size_t>(order));
  const std::size_t n_train = samples.size() * 4 / 5;

  std::vector<LabeledSubset> train_set, heldout;
  for (std::size_t k = 0; k < order.size(); ++k) {
    (k < n_train ? train_set : heldout).push_back(samples[order[k]]);
  }
  nn::Dataset data;
  data.inputs.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(train_set.size()));
  data.targets.resize(1, static_cast<Eigen::Index>(train_set.size()));
  for (std::size_t k = 0; k < train_set.size(); ++k) {
    data.inputs.col(static_cast<Eigen::Index>(k)) = train_set[k].feature;
    data.targets(0, static_cast<Eigen::Index>(k)) = train_set[k].label;
  }

  auto trained = nn::train(std::move(model.net), data, cfg,
                           nn::Loss::kBinaryCrossEntropy);
  GccmTrainResult result;
  result.model = std::move(model);
  result.model.net = std::move(trained.net);
  result.epoch_loss = std::move(trained.epoch_loss);
  result.train_accuracy = accuracy(result.model, train_set);
  result.heldout_accuracy = accuracy(result.model, heldout);
  result.n_train = train_set.size();
  result.n_heldout = heldout.size();
  return result;
}

nlohmann::json to_json(const GccmModel& model) {
  return {{"format", "neurmatch-gccm"},
          {"format_version", kGccmFormatVersion},
          {"gccm",
           {{"canonicalization", canonicalization_spec(model.subset_size)},
            {"training", model.training}}},
          {"net", nn::to_json(model.net)}};
}

GccmModel gccm_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "neurmatch-gccm") {
      throw FormatError("GCCM model JSON: wrong format tag");
    }
    if (j.at("format_version").get<int>() != kGccmFormatVersion) {
      throw FormatError("GCCM model JSON: unsupported format_version");
    }
    GccmModel model;
    model.net = nn::net_from_json(j.at("net"));
    const auto& gj = j.at("gccm");
    model.subset_size = gj.at("canonicalization").at("subset_size").get<int>();
    model.training = gj.value("training", nlohmann::json::object());
    if (model.net.input_dim() != 4 * model.subset_size || model.net.output_dim() != 1) {
      throw FormatError("GCCM model JSON: network shape does not fit the subset size");
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("GCCM model JSON: ") + e.what());
  }
}

void write_gccm(const GccmModel& model, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << to_json(model).dump() << '\n';
}

GccmModel read_gccm(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  try {
    return gccm_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("GCCM model JSON: ") + e.what());
  }
}

nlohmann::json to_json(const VerificationResult& r,
                       const matcher::MatchSet& initial) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t m = 0; m < initial.size(); ++m) {
    const auto& x = initial.matches[m];
    rows.push_back({{"i", x.i}, {"j", x.j}, {"score", x.score},
                    {"confidence", r.confidence[m]},
                    {"subsets_seen", r.subsets_seen[m]}});
  }
  return {{"tau", r.tau},
          {"n_subsets", r.n_subsets},
          {"initial", rows},
          {"final", matcher::to_json(r.final)}};
}

}  // namespace neurmatch::gccm
