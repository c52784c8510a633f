#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "neurmatch/baseline.hpp"
#include "neurmatch/gccm.hpp"
#include "neurmatch/matcher.hpp"
#include "neurmatch/synthdata.hpp"

namespace neurmatch::eval {

using geometry::Point2;

inline constexpr int kReportFormatVersion = 1;

struct PrecisionResult {
  double precision = 0.0;  // n_inliers / max(n_predicted, 1)
  int n_inliers = 0;
  int n_predicted = 0;
  bool empty = false;
};

PrecisionResult precision(const matcher::MatchSet& predicted,
                          const std::vector<bool>& labels);

enum class TreEstimator { kTps, kSimilarity };
std::string to_string(TreEstimator e);
TreEstimator tre_estimator_from_string(const std::string& name);

struct TreResult {
  bool defined = false;  // false: too few or degenerate matches
  double tre_gt = 0.0;   // mean over all gt pairs of the task
  double tre_pred = 0.0; // mean over the predicted matches themselves
};

// Fits the estimator to the final matches and measures how far it sends A
// keypoints from their true B positions.
TreResult tre(const matcher::MatchSet& final, const synth::PairTask& task,
              TreEstimator estimator = TreEstimator::kTps, double lambda = 1.0);

enum class Verifier { kNone, kGccm, kRansac };

struct MethodSpec {
  std::string name;
  bool semantic = false;
  Verifier verifier = Verifier::kNone;
};

// matcher-only, matcher+semantic, matcher+gccm, matcher+semantic+gccm,
// matcher+ransac (the last on fused descriptors).
std::vector<MethodSpec> default_methods();
MethodSpec method_by_name(const std::string& name);

struct PipelineConfig {
  matcher::MatcherConfig matcher;
  gccm::VerifyConfig verify;
  baseline::RansacConfig ransac;
  TreEstimator estimator = TreEstimator::kTps;
  double tre_lambda = 1.0;

  nlohmann::json to_json() const;
};

struct MethodOutput {
  matcher::MatchSet initial;
  matcher::MatchSet final;
  bool fallback = false;  // verifier could not run; final = initial
  double seconds = 0.0;   // matching + verification
};

// Tasks must already carry fused descriptors for semantic methods.
MethodOutput run_method(const MethodSpec& method, const synth::PairTask& task,
                        const PipelineConfig& cfg, const gccm::GccmModel* model);

struct TaskRow {
  std::string method;
  int task = 0;
  std::uint64_t task_seed = 0;
  int n_initial = 0;
  int n_predicted = 0;
  int n_inliers = 0;
  int n_gt = 0;
  double precision = 0.0;
  double recall = 0.0;  // n_inliers / n_gt
  bool empty = false;
  bool fallback = false;
  TreResult tre;
  double seconds = 0.0;
  std::string error;
};

struct Stat {
  double mean = 0.0;
  double std = 0.0;  // population
  int n = 0;
};

Stat summarize(std::span<const double> values);

struct MethodAggregate {
  Stat precision;
  Stat n_inliers;
  Stat recall;
  Stat tre_gt;
  Stat tre_pred;
  Stat seconds;
  double pooled_precision = 0.0;
  int tre_undefined = 0;
  int failures = 0;
  int fallbacks = 0;
};

struct EvalReport {
  std::string suite;
  std::uint64_t seed = 0;
  nlohmann::json config;
  std::string config_hash;
  std::vector<std::string> methods;
  std::vector<TaskRow> rows;  // method-major, then task order
  std::map<std::string, MethodAggregate> aggregates;

  bool empty() const { return rows.empty(); }
};

// FNV-1a 64 of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

// Runs every method on every task. Per-task failures are recorded in the row.
// `workers` threads share the task list; rows do not depend on it.
EvalReport benchmark(std::span<const MethodSpec> methods,
                     std::span<const synth::PairTask> tasks,
                     const PipelineConfig& cfg, const gccm::GccmModel* model,
                     int workers = 1);

MethodAggregate aggregate(std::span<const TaskRow> rows);

// Deterministic report: every field except wall time.
nlohmann::json to_json(const EvalReport& report);
// Wall times per row and per method.
nlohmann::json timing_json(const EvalReport& report);
std::string format_table(const EvalReport& report);
std::string format_csv(const EvalReport& report);

}  // namespace neurmatch::eval
