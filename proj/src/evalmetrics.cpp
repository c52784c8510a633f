#include "neurmatch/evalmetrics.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <thread>

#include <fmt/format.h>

#include "neurmatch/error.hpp"
#include "neurmatch/random.hpp"

namespace neurmatch::eval {

PrecisionResult precision(const matcher::MatchSet& predicted,
                          const std::vector<bool>& labels) {
  if (labels.size() != predicted.size()) {
    throw ArgumentError("one label per predicted match is required");
  }
  PrecisionResult r;
  r.n_predicted = static_cast<int>(predicted.size());
  for (bool l : labels) r.n_inliers += l;
  r.empty = predicted.empty();
  r.precision = static_cast<double>(r.n_inliers) / std::max(r.n_predicted, 1);
  return r;
}

std::string to_string(TreEstimator e) {
  return e == TreEstimator::kTps ? "tps" : "similarity";
}

TreEstimator tre_estimator_from_string(const std::string& name) {
  if (name == "tps") return TreEstimator::kTps;
  if (name == "similarity") return TreEstimator::kSimilarity;
  throw ArgumentError("unknown TRE estimator '" + name + "'");
}

TreResult tre(const matcher::MatchSet& final, const synth::PairTask& task,
              TreEstimator estimator, double lambda) {
  TreResult r;
  const std::size_t minimum = estimator == TreEstimator::kTps ? 3 : 2;
  if (final.size() < minimum || task.gt_matches.empty()) return r;

  std::vector<Point2> src, dst;
  std::vector<geometry::PointPair> pairs;
  for (const auto& m : final.matches) {
    src.push_back(task.keypoints_a[m.i]);
    dst.push_back(task.keypoints_b[m.j]);
    pairs.emplace_back(src.back(), dst.back());
  }
  std::function<Point2(Point2)> fitted;
  try {
    if (estimator == TreEstimator::kTps) {
      auto t = geometry::tps_fit(src, dst, lambda);
      fitted = [t = std::move(t)](Point2 p) { return t.apply(p); };
    } else {
      const auto s = geometry::similarity_fit(pairs);
      fitted = [s](Point2 p) { return s.apply(p); };
    }
  } catch (const DegenerateConfigurationError&) {
    return r;
  }
  double sum = 0.0;
  for (const auto& g : task.gt_matches) {
    sum += geometry::distance(fitted(task.keypoints_a[g.a]), task.keypoints_b[g.b]);
  }
  r.tre_gt = sum / static_cast<double>(task.gt_matches.size());
  sum = 0.0;
  for (Point2 p : src) {
    sum += geometry::distance(fitted(p), task.gt_transform.apply(p));
  }
  r.tre_pred = sum / static_cast<double>(src.size());
  r.defined = std::isfinite(r.tre_gt) && std::isfinite(r.tre_pred);
  return r;
}

std::vector<MethodSpec> default_methods() {
  return {{"matcher-only", false, Verifier::kNone},
          {"matcher+semantic", true, Verifier::kNone},
          {"matcher+gccm", false, Verifier::kGccm},
          {"matcher+semantic+gccm", true, Verifier::kGccm},
          {"matcher+ransac", true, Verifier::kRansac}};
}

MethodSpec method_by_name(const std::string& name) {
  for (auto& m : default_methods()) {
    if (m.name == name) return m;
  }
  throw ArgumentError("unknown method '" + name + "'");
}

nlohmann::json PipelineConfig::to_json() const {
  return {{"matcher",
           {{"temperature", matcher.temperature}, {"min_score", matcher.min_score}}},
          {"verify",
           {{"tau", verify.tau},
            {"subsets_per_match", verify.subsets_per_match},
            {"n_subsets", verify.n_subsets},
            {"min_coverage", verify.min_coverage},
            {"seed", verify.seed}}},
          {"ransac",
           {{"iterations", ransac.iterations},
            {"inlier_threshold", ransac.inlier_threshold},
            {"min_inliers", ransac.min_inliers},
            {"model", ransac.model == baseline::RansacModel::kSimilarity ? "similarity"
                                                                         : "affine"},
            {"seed", ransac.seed}}},
          {"tre", {{"estimator", to_string(estimator)}, {"lambda", tre_lambda}}}};
}

MethodOutput run_method(const MethodSpec& method, const synth::PairTask& task,
                        const PipelineConfig& cfg, const gccm::GccmModel* model) {
  MethodOutput out;
  matcher::MatcherConfig mc = cfg.matcher;
  mc.local_only = !method.semantic;
  if (method.semantic &&
      !(task.descriptors_a.has_fused() && task.descriptors_b.has_fused())) {
    throw PreconditionError(method.name + " needs fused descriptors");
  }
  const auto start = std::chrono::steady_clock::now();
  out.initial = matcher::match_initial(task.descriptors_a, task.descriptors_b, mc);
  out.final = out.initial;
  try {
    if (method.verifier == Verifier::kGccm) {
      if (model == nullptr) throw PreconditionError(method.name + " needs a GCCM model");
      gccm::VerifyConfig vc = cfg.verify;
      vc.seed = derive_seed(cfg.verify.seed, task.meta.seed);
      vc.image_extent_a = vc.image_extent_b = task.meta.image_size;
      out.final = gccm::verify(*model, out.initial, task.keypoints_a,
                               task.keypoints_b, vc).final;
    } else if (method.verifier == Verifier::kRansac) {
      baseline::RansacConfig rc = cfg.ransac;
      rc.seed = derive_seed(cfg.ransac.seed, task.meta.seed);
      out.final = baseline::ransac_similarity(out.initial, task.keypoints_a,
                                              task.keypoints_b, rc).inliers;
    }
  } catch (const InsufficientMatchesError&) {
    out.fallback = true;
  }
  out.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

Stat summarize(std::span<const double> values) {
  Stat s;
  s.n = static_cast<int>(values.size());
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= s.n;
  for (double v : values) s.std += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(s.std / s.n);
  return s;
}

MethodAggregate aggregate(std::span<const TaskRow> rows) {
  MethodAggregate a;
  std::vector<double> prec, inl, rec, tg, tp, sec;
  long inliers = 0, predicted = 0;
  for (const auto& r : rows) {
    if (!r.error.empty()) {
      ++a.failures;
      continue;
    }
    a.fallbacks += r.fallback;
    prec.push_back(r.precision);
    inl.push_back(r.n_inliers);
    rec.push_back(r.recall);
    sec.push_back(r.seconds);
    inliers += r.n_inliers;
    predicted += r.n_predicted;
    if (r.tre.defined) {
      tg.push_back(r.tre.tre_gt);
      tp.push_back(r.tre.tre_pred);
    } else {
      ++a.tre_undefined;
    }
  }
  a.precision = summarize(prec);
  a.n_inliers = summarize(inl);
  a.recall = summarize(rec);
  a.tre_gt = summarize(tg);
  a.tre_pred = summarize(tp);
  a.seconds = summarize(sec);
  a.pooled_precision = static_cast<double>(inliers) / std::max(predicted, 1L);
  return a;
}

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

namespace {

TaskRow evaluate(const MethodSpec& method, const synth::PairTask& task, int index,
                 const PipelineConfig& cfg, const gccm::GccmModel* model) {
  TaskRow row;
  row.method = method.name;
  row.task = index;
  row.task_seed = task.meta.seed;
  row.n_gt = static_cast<int>(task.gt_matches.size());
  try {
    const auto out = run_method(method, task, cfg, model);
    const auto p = precision(out.final, matcher::apply_gt_labels(out.final, task));
    row.n_initial = static_cast<int>(out.initial.size());
    row.n_predicted = p.n_predicted;
    row.n_inliers = p.n_inliers;
    row.precision = p.precision;
    row.recall = static_cast<double>(p.n_inliers) / std::max(row.n_gt, 1);
    row.empty = p.empty;
    row.fallback = out.fallback;
    row.seconds = out.seconds;
    row.tre = tre(out.final, task, cfg.estimator, cfg.tre_lambda);
  } catch (const Error& e) {
    row.error = e.what();
  }
  return row;
}

}  // namespace

EvalReport benchmark(std::span<const MethodSpec> methods,
                     std::span<const synth::PairTask> tasks,
                     const PipelineConfig& cfg, const gccm::GccmModel* model,
                     int workers) {
  if (workers < 1) throw ArgumentError("workers must be >= 1");
  EvalReport report;
  report.config = cfg.to_json();
  report.config_hash = config_hash(report.config);
  for (const auto& m : methods) report.methods.push_back(m.name);
  if (tasks.empty()) return report;

  const std::size_t n_tasks = tasks.size();
  report.rows.resize(methods.size() * n_tasks);
  // Each worker owns a fixed stride of tasks, so row contents do not depend
  // on scheduling.
  auto work = [&](std::size_t w, std::size_t stride) {
    for (std::size_t t = w; t < n_tasks; t += stride) {
      for (std::size_t m = 0; m < methods.size(); ++m) {
        report.rows[m * n_tasks + t] =
            evaluate(methods[m], tasks[t], static_cast<int>(t), cfg, model);
      }
    }
  };
  const std::size_t n_workers = std::min<std::size_t>(workers, n_tasks);
  if (n_workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(work, w, n_workers);
  }
  for (std::size_t m = 0; m < methods.size(); ++m) {
    report.aggregates[methods[m].name] = aggregate(
        std::span<const TaskRow>(report.rows).subspan(m * n_tasks, n_tasks));
  }
  return report;
}

namespace {

nlohmann::json stat_json(const Stat& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
}

}  // namespace

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json j = {{"method", r.method},
                        {"task", r.task},
                        {"task_seed", r.task_seed},
                        {"n_initial", r.n_initial},
                        {"n_predicted", r.n_predicted},
                        {"n_inliers", r.n_inliers},
                        {"n_gt", r.n_gt},
                        {"precision", r.precision},
                        {"recall", r.recall},
                        {"empty", r.empty},
                        {"fallback", r.fallback},
                        {"tre_defined", r.tre.defined}};
    if (r.tre.defined) {
      j["tre_gt"] = r.tre.tre_gt;
      j["tre_pred"] = r.tre.tre_pred;
    }
    if (!r.error.empty()) j["error"] = r.error;
    rows.push_back(std::move(j));
  }
  nlohmann::json aggs = nlohmann::json::object();
  for (const auto& name : report.methods) {
    const auto it = report.aggregates.find(name);
    if (it == report.aggregates.end()) continue;
    const auto& a = it->second;
    aggs[name] = {{"precision", stat_json(a.precision)},
                  {"pooled_precision", a.pooled_precision},
                  {"n_inliers", stat_json(a.n_inliers)},
                  {"recall", stat_json(a.recall)},
                  {"tre_gt", stat_json(a.tre_gt)},
                  {"tre_pred", stat_json(a.tre_pred)},
                  {"tre_undefined", a.tre_undefined},
                  {"failures", a.failures},
                  {"fallbacks", a.fallbacks}};
  }
  return {{"format", "neurmatch-report"},
          {"format_version", kReportFormatVersion},
          {"suite", report.suite},
          {"seed", report.seed},
          {"config_hash", report.config_hash},
          {"config", report.config},
          {"unit", "px"},
          {"methods", report.methods},
          {"n_tasks", report.methods.empty() ? 0 : report.rows.size() / report.methods.size()},
          {"aggregates", aggs},
          {"rows", rows}};
}

nlohmann::json timing_json(const EvalReport& report) {
  nlohmann::json per_method = nlohmann::json::object();
  for (const auto& [name, a] : report.aggregates) {
    per_method[name] = stat_json(a.seconds);
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"method", r.method}, {"task", r.task}, {"seconds", r.seconds}});
  }
  return {{"config_hash", report.config_hash}, {"seconds", per_method}, {"rows", rows}};
}

std::string format_table(const EvalReport& report) {
  std::string out = fmt::format("{:<24} {:>15} {:>9} {:>15} {:>15} {:>15} {:>10}\n",
                                "method", "precision", "pooled", "inliers",
                                "tre_gt", "tre_pred", "time_s");
  for (const auto& name : report.methods) {
    const auto it = report.aggregates.find(name);
    if (it == report.aggregates.end()) continue;
    const auto& a = it->second;
    out += fmt::format(
        "{:<24} {:>15} {:>9.3f} {:>15} {:>15} {:>15} {:>10.4f}\n", name,
        fmt::format("{:.3f}±{:.3f}", a.precision.mean, a.precision.std),
        a.pooled_precision,
        fmt::format("{:.1f}±{:.1f}", a.n_inliers.mean, a.n_inliers.std),
        fmt::format("{:.2f}±{:.2f}", a.tre_gt.mean, a.tre_gt.std),
        fmt::format("{:.2f}±{:.2f}", a.tre_pred.mean, a.tre_pred.std),
        a.seconds.mean);
  }
  return out;
}

std::string format_csv(const EvalReport& report) {
  std::string out =
      "method,task,task_seed,n_initial,n_predicted,n_inliers,n_gt,precision,"
      "recall,tre_gt,tre_pred,seconds,error\n";
  for (const auto& r : report.rows) {
    out += fmt::format("{},{},{},{},{},{},{},{:.17g},{:.17g},{},{},{:.6f},\"{}\"\n",
                       r.method, r.task, r.task_seed, r.n_initial, r.n_predicted,
                       r.n_inliers, r.n_gt, r.precision, r.recall,
                       r.tre.defined ? fmt::format("{:.17g}", r.tre.tre_gt) : "",
                       r.tre.defined ? fmt::format("{:.17g}", r.tre.tre_pred) : "",
                       r.seconds, r.error);
  }
  return out;
}

}  // namespace neurmatch::eval
