#include <cmath>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "neurmatch/error.hpp"
#include "neurmatch/evalmetrics.hpp"

using namespace neurmatch;
using namespace neurmatch::eval;
using geometry::Point2;
using matcher::MatchSet;

namespace {

synth::SceneConfig scene(std::uint64_t seed) {
  synth::SceneConfig cfg;
  cfg.image_size = 192;
  cfg.n_neurons = 20;
  cfg.seed = seed;
  return cfg;
}

synth::DeformConfig deform(double sigma) {
  synth::DeformConfig d;
  d.displacement_sigma = sigma;
  if (sigma == 0) d.max_rotation = d.max_scale_jitter = 0;
  return d;
}

MatchSet gt_set(const synth::PairTask& task) {
  MatchSet m{{}, int(task.keypoints_a.size()), int(task.keypoints_b.size())};
  for (auto g : task.gt_matches) m.matches.push_back({g.a, g.b, 1.0});
  return m;
}

// Three A points, B shifted by (1, 0) except the last which is off by
// (1, 3); identity ground-truth transform.
synth::PairTask hand_task() {
  synth::PairTask t;
  t.keypoints_a = {{0, 0}, {10, 0}, {0, 10}};
  t.keypoints_b = {{1, 0}, {11, 0}, {1, 13}};
  t.gt_matches = {{0, 0}, {1, 1}, {2, 2}};
  t.gt_transform = geometry::ThinPlateSpline::identity();
  return t;
}

std::vector<synth::PairTask> rendered_tasks(int n, double sigma) {
  std::vector<synth::PairTask> out;
  for (int k = 0; k < n; ++k)
    out.push_back(synth::make_pretrain_task(scene(40 + k), deform(sigma), 40 + k));
  return out;
}

const std::vector<MethodSpec> kLocalMethods{
    {"plain", false, Verifier::kNone},
    {"gccm", false, Verifier::kGccm},
    {"ransac", false, Verifier::kRansac}};

PipelineConfig pipeline() {
  PipelineConfig cfg;
  cfg.matcher.min_score = 0.0;
  cfg.ransac.iterations = 200;
  return cfg;
}

}  // namespace

TEST(Precision, HandCounts) {
  MatchSet m{{{0, 0, 1}, {1, 1, 1}, {2, 2, 1}, {3, 3, 1}}, 4, 4};
  const auto p = precision(m, {true, true, false, true});
  EXPECT_DOUBLE_EQ(p.precision, 0.75);
  EXPECT_EQ(p.n_inliers, 3);
  EXPECT_EQ(p.n_predicted, 4);
  EXPECT_FALSE(p.empty);

  const auto e = precision(MatchSet{{}, 4, 4}, {});
  EXPECT_TRUE(e.empty);
  EXPECT_EQ(e.precision, 0.0);
  EXPECT_THROW(precision(m, {true}), ArgumentError);
}

TEST(Tre, HandBuiltSimilarity) {
  const auto task = hand_task();
  const MatchSet two{{{0, 0, 1}, {1, 1, 1}}, 3, 3};
  const auto r = tre(two, task, TreEstimator::kSimilarity);
  ASSERT_TRUE(r.defined);
  // Fitted map is the (1, 0) shift: errors 0, 0, 3 on the gt pairs and
  // 1 against the identity on both predicted points.
  EXPECT_NEAR(r.tre_gt, 1.0, 1e-12);
  EXPECT_NEAR(r.tre_pred, 1.0, 1e-12);
}

TEST(Tre, UndefinedBelowMinimumOrWhenDegenerate) {
  const auto task = hand_task();
  EXPECT_FALSE(tre(MatchSet{{{0, 0, 1}}, 3, 3}, task, TreEstimator::kSimilarity).defined);
  EXPECT_FALSE(tre(MatchSet{{{0, 0, 1}, {1, 1, 1}}, 3, 3}, task, TreEstimator::kTps).defined);
  auto dup = task;
  dup.keypoints_a[1] = dup.keypoints_a[0];
  EXPECT_FALSE(tre(MatchSet{{{0, 0, 1}, {1, 1, 1}}, 3, 3}, dup, TreEstimator::kSimilarity).defined);
}

TEST(Tre, IdentityTaskIsZero) {
  const auto task = synth::make_pretrain_task(scene(3), deform(0), 3);
  auto half = gt_set(task);
  half.matches.resize(half.size() / 2);
  for (auto est : {TreEstimator::kTps, TreEstimator::kSimilarity}) {
    const auto r = tre(half, task, est, 0.0);
    ASSERT_TRUE(r.defined);
    EXPECT_LE(r.tre_gt, 1e-6);
    EXPECT_LE(r.tre_pred, 1e-6);
  }
}

TEST(Tre, GroundTruthInterpolantWithinTolerance) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto task = synth::make_pretrain_task(scene(seed), deform(12), seed);
    const auto r = tre(gt_set(task), task, TreEstimator::kTps, 0.0);
    ASSERT_TRUE(r.defined);
    EXPECT_LE(r.tre_gt, task.meta.gt_tolerance) << seed;
  }
}

TEST(Tre, OutlierIncreasesError) {
  const auto task = synth::make_pretrain_task(scene(5), deform(6), 5);
  const auto clean = gt_set(task);
  auto dirty = clean;
  dirty.matches[0].j = clean.matches[1].j;
  dirty.matches.erase(dirty.matches.begin() + 1);
  for (auto est : {TreEstimator::kTps, TreEstimator::kSimilarity}) {
    EXPECT_GT(tre(dirty, task, est).tre_gt, tre(clean, task, est).tre_gt);
  }
}

TEST(Stats, SummarizeAndAggregate) {
  const std::vector<double> v{1, 2, 3, 4};
  const auto s = summarize(v);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.std, std::sqrt(1.25), 1e-15);
  EXPECT_EQ(summarize(std::vector<double>{}).n, 0);

  std::vector<TaskRow> rows(5);
  const int inl[5] = {3, 0, 7, 2, 9}, pred[5] = {4, 0, 10, 2, 12};
  for (int k = 0; k < 5; ++k) {
    rows[k].n_inliers = inl[k];
    rows[k].n_predicted = pred[k];
    rows[k].precision = pred[k] ? double(inl[k]) / pred[k] : 0.0;
    rows[k].tre = {k != 1, 1.5 * k, 0.5 * k};
  }
  rows[3].error = "boom";
  const auto a = aggregate(rows);
  EXPECT_EQ(a.failures, 1);
  EXPECT_EQ(a.tre_undefined, 1);
  EXPECT_EQ(a.precision.n, 4);
  double m = 0;
  for (int k : {0, 1, 2, 4}) m += rows[k].precision;
  EXPECT_NEAR(a.precision.mean, m / 4, 1e-12);
  EXPECT_NEAR(a.n_inliers.mean, (3 + 0 + 7 + 9) / 4.0, 1e-12);
  EXPECT_NEAR(a.pooled_precision, 19.0 / 26.0, 1e-12);
  EXPECT_NEAR(a.tre_gt.mean, (0 + 3 + 6) / 3.0, 1e-12);
}

TEST(Names, RoundTripAndErrors) {
  for (auto e : {TreEstimator::kTps, TreEstimator::kSimilarity})
    EXPECT_EQ(tre_estimator_from_string(to_string(e)), e);
  EXPECT_THROW(tre_estimator_from_string("spline"), ArgumentError);
  EXPECT_EQ(default_methods().size(), 5u);
  for (const auto& m : default_methods()) EXPECT_EQ(method_by_name(m.name).name, m.name);
  EXPECT_THROW(method_by_name("magic"), ArgumentError);
}

TEST(ConfigHash, KnownValueAndSensitivity) {
  EXPECT_EQ(config_hash(nlohmann::json{{"a", 1}}), "9c3e82dd6fcae8b1");
  const auto base = pipeline().to_json();
  EXPECT_EQ(config_hash(base), config_hash(pipeline().to_json()));
  auto other = pipeline();
  other.verify.tau = 0.5;
  EXPECT_NE(config_hash(base), config_hash(other.to_json()));
}

TEST(Benchmark, RowsAreConsistentAndWorkerIndependent) {
  const auto tasks = rendered_tasks(4, 8);
  const auto model = gccm::make_gccm_model(1);
  const auto one = benchmark(kLocalMethods, tasks, pipeline(), &model, 1);
  const auto four = benchmark(kLocalMethods, tasks, pipeline(), &model, 4);
  EXPECT_EQ(to_json(one).dump(), to_json(four).dump());
  ASSERT_EQ(one.rows.size(), 12u);
  for (const auto& r : one.rows) {
    EXPECT_TRUE(r.error.empty()) << r.error;
    EXPECT_NEAR(r.precision * r.n_predicted, r.n_inliers, 1e-9);
    EXPECT_LE(r.n_predicted, r.n_initial);
  }
  // Recomputing each aggregate from its rows.
  for (std::size_t m = 0; m < kLocalMethods.size(); ++m) {
    double sum = 0;
    for (std::size_t t = 0; t < 4; ++t) sum += one.rows[m * 4 + t].precision;
    EXPECT_NEAR(one.aggregates.at(kLocalMethods[m].name).precision.mean, sum / 4, 1e-12);
  }
  EXPECT_THROW(benchmark(kLocalMethods, tasks, pipeline(), &model, 0), ArgumentError);
}

TEST(Benchmark, TaskOrderOnlyReindexes) {
  auto tasks = rendered_tasks(3, 8);
  const auto model = gccm::make_gccm_model(1);
  const auto fwd = benchmark(kLocalMethods, tasks, pipeline(), &model);
  std::reverse(tasks.begin(), tasks.end());
  const auto rev = benchmark(kLocalMethods, tasks, pipeline(), &model);
  for (std::size_t m = 0; m < kLocalMethods.size(); ++m) {
    for (std::size_t t = 0; t < 3; ++t) {
      const auto& a = fwd.rows[m * 3 + t];
      const auto& b = rev.rows[m * 3 + (2 - t)];
      EXPECT_EQ(a.task_seed, b.task_seed);
      EXPECT_EQ(a.n_inliers, b.n_inliers);
      EXPECT_EQ(a.n_predicted, b.n_predicted);
      EXPECT_EQ(a.tre.tre_gt, b.tre.tre_gt);
    }
    const auto& x = fwd.aggregates.at(kLocalMethods[m].name);
    const auto& y = rev.aggregates.at(kLocalMethods[m].name);
    EXPECT_NEAR(x.precision.mean, y.precision.mean, 1e-12);
    EXPECT_EQ(x.pooled_precision, y.pooled_precision);
  }
}

TEST(Benchmark, IdenticalMethodsGiveIdenticalAggregates) {
  const auto tasks = rendered_tasks(2, 8);
  const std::vector<MethodSpec> twins{{"first", false, Verifier::kNone},
                                      {"second", false, Verifier::kNone}};
  const auto r = benchmark(twins, tasks, pipeline(), nullptr);
  auto j = to_json(r).at("aggregates");
  EXPECT_EQ(j.at("first"), j.at("second"));
}

TEST(Benchmark, MissingPrerequisitesAreRowErrors) {
  const auto tasks = rendered_tasks(1, 8);
  const std::vector<MethodSpec> m{{"sem", true, Verifier::kNone},
                                  {"gccm", false, Verifier::kGccm}};
  const auto r = benchmark(m, tasks, pipeline(), nullptr);
  for (const auto& row : r.rows) EXPECT_FALSE(row.error.empty());
  EXPECT_EQ(r.aggregates.at("sem").failures, 1);
}

TEST(Report, EmptyJsonTableAndCsv) {
  const auto empty = benchmark(kLocalMethods, std::span<const synth::PairTask>{}, pipeline(), nullptr);
  EXPECT_TRUE(empty.empty());
  EXPECT_EQ(to_json(empty).at("n_tasks"), 0);

  const auto tasks = rendered_tasks(2, 8);
  const auto model = gccm::make_gccm_model(1);
  const auto r = benchmark(kLocalMethods, tasks, pipeline(), &model);
  const auto j = to_json(r);
  EXPECT_EQ(j.at("format"), "neurmatch-report");
  EXPECT_EQ(j.at("n_tasks"), 2);
  EXPECT_EQ(j.dump().find("seconds"), std::string::npos);
  EXPECT_EQ(timing_json(r).at("rows").size(), 6u);

  const auto table = format_table(r);
  std::istringstream lines(table);
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) ++n;
  EXPECT_EQ(n, 4);
  for (const auto& m : kLocalMethods) EXPECT_NE(table.find(m.name), std::string::npos);

  const auto csv = format_csv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
  EXPECT_EQ(csv.rfind("method,task,", 0), 0u);
}
