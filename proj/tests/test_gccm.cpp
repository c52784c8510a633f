#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <tuple>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "neurmatch/error.hpp"
#include "neurmatch/gccm.hpp"
#include "neurmatch/random.hpp"
#include "neurmatch/synthdata.hpp"
#include "test_util.hpp"

using namespace neurmatch;
using namespace neurmatch::gccm;
using matcher::MatchSet;

namespace {

// Straight transcription of the canonical form: center, divide by
// sqrt(k-1) * rms (or the half diagonal), order by A x then y, clamp.
std::vector<double> oracle_feature(std::vector<PointPair> pairs, double extent) {
  const double k = static_cast<double>(pairs.size());
  auto scale_of = [&](auto get, double& cx, double& cy) {
    cx = cy = 0;
    for (auto& p : pairs) {
      cx += get(p).x / k;
      cy += get(p).y / k;
    }
    double ss = 0;
    for (auto& p : pairs) ss += std::pow(get(p).x - cx, 2) + std::pow(get(p).y - cy, 2);
    const double rms = std::sqrt(ss / k);
    return rms < 1.0 ? extent * std::sqrt(2.0) / 2 : std::sqrt(k - 1) * rms;
  };
  double ax, ay, bx, by;
  const double sa = scale_of([](const PointPair& p) { return p.first; }, ax, ay);
  const double sb = scale_of([](const PointPair& p) { return p.second; }, bx, by);
  std::stable_sort(pairs.begin(), pairs.end(), [](const PointPair& l, const PointPair& r) {
    return std::tie(l.first.x, l.first.y, l.second.x, l.second.y) <
           std::tie(r.first.x, r.first.y, r.second.x, r.second.y);
  });
  std::vector<double> f;
  auto c = [](double v) { return std::max(-1.0, std::min(1.0, v)); };
  for (auto& p : pairs) {
    f.push_back(c((p.first.x - ax) / sa));
    f.push_back(c((p.first.y - ay) / sa));
    f.push_back(c((p.second.x - bx) / sb));
    f.push_back(c((p.second.y - by) / sb));
  }
  return f;
}

GccmModel constant_model(double bias) {
  GccmModel m;
  m.net = nn::DenseNet({nn::DenseLayer{Eigen::MatrixXd::Zero(1, 16), Eigen::VectorXd::Constant(1, bias),
                                       nn::Activation::kSigmoid}});
  return m;
}

std::vector<Point2> line_points(int n) {
  std::vector<Point2> p;
  for (int k = 0; k < n; ++k) p.push_back({10.0 * k, 3.0 * k * k});
  return p;
}

MatchSet diagonal_matches(int n) {
  MatchSet m{{}, n, n};
  for (int k = 0; k < n; ++k) m.matches.push_back({k, k, 0.5});
  return m;
}

synth::SceneConfig scene512() {
  synth::SceneConfig s;
  s.image_size = 512;
  s.n_neurons = 50;
  return s;
}

std::vector<synth::PairTask> geometry_tasks(int count, std::uint64_t base, double sigma) {
  synth::DeformConfig d;
  d.displacement_sigma = sigma * 512;
  std::vector<synth::PairTask> out;
  for (int t = 0; t < count; ++t)
    out.push_back(synth::make_pretrain_task(scene512(), d, base + t, {.render = false, .patch = 15, .context = {}}));
  return out;
}

// One model shared by the tests that need a trained classifier.
const GccmTrainResult& trained() {
  static const GccmTrainResult r = [] {
    const auto tasks = geometry_tasks(300, 1000, 0.05);
    CorruptionConfig corr;
    corr.single_fraction = 0.75;
    const auto samples = make_gccm_training_set(tasks, 300 * 30, 300 * 30, corr, 5);
    nn::TrainConfig cfg{.learning_rate = 2e-3, .batch_size = 64, .epochs = 40, .seed = 3};
    return train_gccm(samples, cfg);
  }();
  return r;
}

}  // namespace

TEST(Canonicalize, HandExample) {
  const std::vector<PointPair> pairs{{{2, 2}, {8, 4}}, {{0, 0}, {2, 4}}, {{2, 0}, {8, -2}},
                                     {{0, 2}, {2, 10}}};
  const auto f = canonicalize_subset(pairs, 512, 512);
  // A: centroid (1, 1), rms sqrt(2), scale sqrt(3) * sqrt(2).
  // B: centroid (5, 4), rms sqrt(27), scale sqrt(3) * sqrt(27) = 9.
  const double sa = std::sqrt(6.0), sb = 9.0;
  const double expect[16] = {-1 / sa, -1 / sa, -3 / sb, 0 / sb,  -1 / sa, 1 / sa, -3 / sb, 6 / sb,
                             1 / sa,  -1 / sa, 3 / sb,  -6 / sb, 1 / sa,  1 / sa, 3 / sb,  0 / sb};
  ASSERT_EQ(f.size(), 16);
  for (int k = 0; k < 16; ++k) EXPECT_NEAR(f(k), expect[k], 1e-15) << k;
}

TEST(Canonicalize, MatchesOracleOnRandomSubsets) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    std::vector<PointPair> pairs;
    for (int k = 0; k < 4; ++k)
      pairs.push_back({{rng.uniform(0, 512), rng.uniform(0, 512)}, {rng.uniform(0, 512), rng.uniform(0, 512)}});
    const auto f = canonicalize_subset(pairs, 512, 512);
    const auto o = oracle_feature(pairs, 512);
    for (int k = 0; k < 16; ++k) {
      EXPECT_NEAR(f(k), o[k], 1e-14);
      EXPECT_LE(std::abs(f(k)), 1.0);
    }
  }
}

TEST(Canonicalize, CollapsedSideUsesHalfDiagonal) {
  const std::vector<PointPair> pairs{{{0, 0}, {5, 5}}, {{10, 0}, {5, 5}}, {{0, 10}, {5.2, 5}},
                                     {{10, 10}, {5, 5}}};
  const auto f = canonicalize_subset(pairs, 100, 100);
  const auto o = oracle_feature(pairs, 100);
  for (int k = 0; k < 16; ++k) EXPECT_NEAR(f(k), o[k], 1e-15);
  EXPECT_NEAR(f(2), -0.05 / (50 * std::sqrt(2.0)), 1e-15);
}

TEST(Canonicalize, DyadicTranslationAndScaleAreBitExact) {
  Rng rng(2);
  const auto model = make_gccm_model(9);
  for (int t = 0; t < 100; ++t) {
    std::vector<PointPair> pairs, moved, scaled;
    const Point2 da{double(rng.index(200)) - 100, double(rng.index(200)) - 100};
    const Point2 db{double(rng.index(200)) - 100, double(rng.index(200)) - 100};
    for (int k = 0; k < 4; ++k) {
      const Point2 a{double(rng.index(512)), double(rng.index(512))};
      const Point2 b{double(rng.index(512)), double(rng.index(512))};
      pairs.push_back({a, b});
      moved.push_back({a + da, b + db});
      scaled.push_back({2.0 * a, 2.0 * b});
    }
    const auto f = canonicalize_subset(pairs, 512, 512);
    EXPECT_EQ(f, canonicalize_subset(moved, 512, 512));
    EXPECT_EQ(f, canonicalize_subset(scaled, 512, 512));
    EXPECT_EQ(score_subset(model, f), score_subset(model, canonicalize_subset(moved, 512, 512)));
  }
}

TEST(Canonicalize, MemberOrderDoesNotMatter) {
  Rng rng(3);
  const auto model = make_gccm_model(4);
  for (int t = 0; t < 100; ++t) {
    std::vector<PointPair> pairs;
    for (int k = 0; k < 4; ++k)
      pairs.push_back({{rng.uniform(0, 512), rng.uniform(0, 512)}, {rng.uniform(0, 512), rng.uniform(0, 512)}});
    auto shuffled = pairs;
    rng.shuffle(std::span<PointPair>(shuffled));
    EXPECT_EQ(canonicalize_subset(pairs, 512, 512), canonicalize_subset(shuffled, 512, 512));
  }
  const std::vector<PointPair> one{{{0, 0}, {0, 0}}};
  EXPECT_THROW(canonicalize_subset(one, 1, 1), ArgumentError);
}

TEST(Score, ZeroFinalLayerGivesHalf) {
  auto model = make_gccm_model(5);
  model.net.mutable_layers().back().weight.setZero();
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    Eigen::VectorXd x(16);
    for (int k = 0; k < 16; ++k) x(k) = rng.uniform(-1, 1);
    EXPECT_EQ(score_subset(model, x), 0.5);
  }
}

TEST(Score, BatchMatchesSingle) {
  const auto model = make_gccm_model(6);
  Rng rng(6);
  Eigen::MatrixXd xs(16, 5000);
  for (Eigen::Index c = 0; c < xs.cols(); ++c)
    for (int k = 0; k < 16; ++k) xs(k, c) = rng.uniform(-1, 1);
  const auto s = score_subsets(model, xs);
  for (Eigen::Index c : {Eigen::Index(0), Eigen::Index(4095), Eigen::Index(4096), Eigen::Index(4999)})
    EXPECT_NEAR(s(c), score_subset(model, xs.col(c)), 1e-15);
}

TEST(Aggregate, ArithmeticMean) {
  const std::vector<std::vector<int>> subsets{{0, 1, 2, 3}, {0, 4, 5, 6}, {0, 1, 5, 6}};
  const std::vector<double> scores{0.2, 0.8, 0.5};
  std::vector<double> c;
  std::vector<int> seen;
  aggregate_confidence(7, subsets, scores, c, seen);
  EXPECT_DOUBLE_EQ(c[0], 0.5);
  EXPECT_EQ(seen[0], 3);
  EXPECT_DOUBLE_EQ(c[1], 0.35);
  EXPECT_DOUBLE_EQ(c[4], 0.8);
  EXPECT_THROW(aggregate_confidence(7, subsets, std::vector<double>{1.0}, c, seen), ArgumentError);
}

TEST(Sampling, CoverageTopUpAndDistinctMembers) {
  const auto subsets = sample_subsets(37, 4, 1, 8, 11);
  std::vector<int> seen(37, 0);
  for (const auto& s : subsets) {
    ASSERT_EQ(s.size(), 4u);
    for (int m : s) ++seen[m];
    EXPECT_EQ(std::set<int>(s.begin(), s.end()).size(), 4u);
  }
  EXPECT_GE(*std::min_element(seen.begin(), seen.end()), 8);
  EXPECT_EQ(sample_subsets(37, 4, 50, 8, 11), sample_subsets(37, 4, 50, 8, 11));
  EXPECT_THROW(sample_subsets(3, 4, 10, 8, 1), InsufficientMatchesError);
}

TEST(Verify, ConstantStubs) {
  const auto pts = line_points(12);
  const auto initial = diagonal_matches(12);
  VerifyConfig cfg;
  for (double tau : {0.0, 0.3, 0.999}) {
    cfg.tau = tau;
    EXPECT_EQ(verify(constant_model(40), initial, pts, pts, cfg).final, initial);
    EXPECT_TRUE(verify(constant_model(-800), initial, pts, pts, cfg).final.empty());
  }
  cfg.tau = 1.0;
  EXPECT_TRUE(verify(constant_model(40), initial, pts, pts, cfg).final.empty());
}

TEST(Verify, BudgetCoverageAndDeterminism) {
  const auto pts = line_points(40);
  const auto initial = diagonal_matches(40);
  const auto model = make_gccm_model(7);
  VerifyConfig cfg;
  cfg.seed = 9;
  const auto r = verify(model, initial, pts, pts, cfg);
  EXPECT_GE(r.n_subsets, 64u * 40 / 4);
  EXPECT_GE(*std::min_element(r.subsets_seen.begin(), r.subsets_seen.end()), 8);
  const auto r2 = verify(model, initial, pts, pts, cfg);
  EXPECT_EQ(r.confidence, r2.confidence);
  EXPECT_EQ(r.final, r2.final);
  for (std::size_t m = 0; m < initial.size(); ++m) {
    const bool kept = std::find(r.final.matches.begin(), r.final.matches.end(), initial.matches[m]) !=
                      r.final.matches.end();
    EXPECT_EQ(kept, r.confidence[m] > cfg.tau && r.subsets_seen[m] >= cfg.min_coverage);
  }
  cfg.n_subsets = 5;
  cfg.min_coverage = 0;
  EXPECT_EQ(verify(model, initial, pts, pts, cfg).n_subsets, 5u);
}

TEST(Verify, InsufficientMatchesAndBadConfig) {
  const auto pts = line_points(3);
  EXPECT_THROW(verify(make_gccm_model(1), diagonal_matches(3), pts, pts, {}), InsufficientMatchesError);
  VerifyConfig bad;
  bad.tau = 1.5;
  EXPECT_THROW(bad.validate(), ArgumentError);
}

TEST(TrainingSet, CountsLabelsAndConstructionRules) {
  const auto tasks = geometry_tasks(5, 50, 0.05);
  const auto samples = make_gccm_training_set(tasks, 500, 500, {}, 1);
  ASSERT_EQ(samples.size(), 1000u);
  int pos = 0;
  for (const auto& s : samples) {
    pos += s.label == 1.0;
    EXPECT_EQ(s.feature.size(), 16);
    EXPECT_LE(s.feature.cwiseAbs().maxCoeff(), 1.0);
  }
  EXPECT_EQ(pos, 500);
  const auto again = make_gccm_training_set(tasks, 500, 500, {}, 1);
  for (std::size_t k = 0; k < samples.size(); ++k) EXPECT_EQ(samples[k].feature, again[k].feature);

  CorruptionConfig zero;
  zero.min_displacement = 0;
  EXPECT_THROW(make_gccm_training_set(tasks, 5, 5, zero, 1), ArgumentError);
  CorruptionConfig inverted;
  inverted.max_displacement = 10;
  EXPECT_THROW(make_gccm_training_set(tasks, 5, 5, inverted, 1), ArgumentError);
}

TEST(TrainingSet, NegativesViolateGroundTruth) {
  // Rebuild negatives by hand to check each one has a member off the truth:
  // with a single task and a tiny corruption window the features differ
  // from every positive drawn from the same members.
  const auto tasks = geometry_tasks(1, 70, 0.02);
  CorruptionConfig corr;
  corr.wrong_index_fraction = 0.0;
  corr.min_displacement = corr.max_displacement = 60;
  const auto samples = make_gccm_training_set(tasks, 0, 200, corr, 2);
  for (const auto& s : samples) EXPECT_EQ(s.label, 0.0);
  EXPECT_THROW(make_gccm_training_set(geometry_tasks(0, 0, 0.0), 1, 1, {}, 1), InsufficientMatchesError);
}

TEST(Train, ZeroLearningRateIsChance) {
  const auto tasks = geometry_tasks(10, 80, 0.05);
  const auto samples = make_gccm_training_set(tasks, 300, 300, {}, 3);
  nn::TrainConfig cfg{.learning_rate = 0.0, .batch_size = 32, .epochs = 1, .seed = 1};
  auto model = make_gccm_model(1);
  model.net.mutable_layers().back().weight.setZero();
  const auto r = train_gccm(samples, cfg, model);
  EXPECT_NEAR(r.heldout_accuracy, 0.5, 0.1);
  EXPECT_EQ(r.n_train + r.n_heldout, 600u);
  EXPECT_EQ(r.n_train, 480u);
  EXPECT_THROW(train_gccm(std::span(samples).subspan(0, 150), cfg), PreconditionError);
}

TEST(Train, SameSeedSameModelFile) {
  const auto tasks = geometry_tasks(10, 90, 0.05);
  const auto samples = make_gccm_training_set(tasks, 200, 200, {}, 4);
  nn::TrainConfig cfg{.learning_rate = 1e-3, .batch_size = 32, .epochs = 3, .seed = 8};
  EXPECT_EQ(to_json(train_gccm(samples, cfg).model).dump(), to_json(train_gccm(samples, cfg).model).dump());
}

TEST(Train, LearnsAndLossDecreasesWhenSmoothed) {
  const auto& r = trained();
  EXPECT_GE(r.heldout_accuracy, 0.85);
  const auto& l = r.epoch_loss;
  ASSERT_GE(l.size(), 10u);
  for (std::size_t e = 5; e + 5 <= l.size(); e += 5) {
    double prev = 0, cur = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      prev += l[e - 5 + k];
      cur += l[e + k];
    }
    EXPECT_LE(cur, prev) << "window at epoch " << e;
  }
}

TEST(Train, GroundTruthSubsetOutscoresDisplacedOne) {
  const auto& model = trained().model;
  const auto tasks = geometry_tasks(20, 5000, 0.02);
  Rng rng(77);
  int wins = 0, total = 0;
  for (const auto& task : tasks) {
    for (int rep = 0; rep < 10; ++rep) {
      std::vector<PointPair> pairs;
      while (pairs.size() < 4) {
        const auto g = task.gt_matches[rng.index(task.gt_matches.size())];
        const PointPair p{task.keypoints_a[g.a], task.keypoints_b[g.b]};
        if (std::find(pairs.begin(), pairs.end(), p) == pairs.end()) pairs.push_back(p);
      }
      auto bad = pairs;
      const double dir = rng.uniform(0, 2 * std::numbers::pi);
      const auto k = rng.index(4);
      bad[k].second = bad[k].second + Point2{50 * std::cos(dir), 50 * std::sin(dir)};
      wins += score_subset(model, canonicalize_subset(pairs, 512, 512)) >
              score_subset(model, canonicalize_subset(bad, 512, 512));
      ++total;
    }
  }
  std::printf("gt subset beats displaced copy in %d of %d\n", wins, total);
  EXPECT_GE(wins, 0.9 * total);
}

TEST(Train, SeparatesCorrectFromPlantedWrongMatches) {
  const auto& model = trained().model;
  const auto tasks = geometry_tasks(10, 7000, 0.05);
  double sum_good = 0, sum_bad = 0;
  int n_good = 0, n_bad = 0;
  for (const auto& task : tasks) {
    const int n = static_cast<int>(task.gt_matches.size());
    MatchSet initial{{}, static_cast<int>(task.keypoints_a.size()), static_cast<int>(task.keypoints_b.size())};
    std::vector<bool> wrong(n, false);
    // Every fifth match gets its B index rotated inside the planted block.
    std::vector<int> planted;
    for (int k = 0; k < n; k += 5) planted.push_back(k);
    for (int k = 0; k < n; ++k) initial.matches.push_back({task.gt_matches[k].a, task.gt_matches[k].b, 0.5});
    for (std::size_t p = 0; p < planted.size(); ++p) {
      initial.matches[planted[p]].j = task.gt_matches[planted[(p + 1) % planted.size()]].b;
      wrong[planted[p]] = true;
    }
    VerifyConfig cfg;
    cfg.seed = task.meta.seed;
    const auto r = verify(model, initial, task.keypoints_a, task.keypoints_b, cfg);
    for (int k = 0; k < n; ++k) (wrong[k] ? sum_bad : sum_good) += r.confidence[k], ++(wrong[k] ? n_bad : n_good);
  }
  const double good = sum_good / n_good, bad = sum_bad / n_bad;
  EXPECT_GE(good - bad, 0.2) << "good " << good << " bad " << bad;
}

TEST(ModelIo, JsonRoundTrip) {
  neurmatch::testing::TempDir dir;
  auto model = make_gccm_model(12);
  model.training = {{"tasks", 3}};
  write_gccm(model, dir / "g.json");
  const auto back = read_gccm(dir / "g.json");
  EXPECT_TRUE(back.net == model.net);
  EXPECT_EQ(back.subset_size, 4);
  EXPECT_EQ(back.training, model.training);
  auto j = to_json(model);
  EXPECT_EQ(j.at("gccm").at("canonicalization").at("layout"), "x_a,y_a,x_b,y_b");
  j["format"] = "other";
  EXPECT_THROW(gccm_from_json(j), FormatError);
}

TEST(ModelIo, VerificationJson) {
  const auto pts = line_points(8);
  const auto initial = diagonal_matches(8);
  const auto r = verify(constant_model(40), initial, pts, pts, {});
  const auto j = to_json(r, initial);
  EXPECT_EQ(j.at("initial").size(), 8u);
  EXPECT_EQ(j.at("final").at("matches").size(), 8u);
  EXPECT_DOUBLE_EQ(j.at("tau").get<double>(), r.tau);
}
