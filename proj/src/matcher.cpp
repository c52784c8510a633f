#include "neurmatch/matcher.hpp"

#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "neurmatch/error.hpp"

namespace neurmatch::matcher {

void MatchSet::validate() const {
  std::vector<bool> used_a(n_a, false);
  std::vector<bool> used_b(n_b, false);
  for (const auto& m : matches) {
    if (m.i < 0 || m.i >= n_a || m.j < 0 || m.j >= n_b) {
      throw FormatError("match (" + std::to_string(m.i) + ", " +
                        std::to_string(m.j) + ") out of range");
    }
    if (used_a[m.i] || used_b[m.j]) {
      throw FormatError("match set is not one-to-one at (" +
                        std::to_string(m.i) + ", " + std::to_string(m.j) + ")");
    }
    used_a[m.i] = used_b[m.j] = true;
    if (!(m.score >= 0.0 && m.score <= 1.0)) {
      throw FormatError("match score outside [0, 1]");
    }
  }
}

void MatcherConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ArgumentError("temperature must be positive");
  }
  if (!(min_score >= 0.0 && min_score <= 1.0)) {
    throw ArgumentError("min_score must lie in [0, 1]");
  }
}

Eigen::MatrixXd dual_softmax(const Eigen::MatrixXd& similarity,
                             double temperature) {
  const Eigen::MatrixXd logits = similarity / temperature;
  Eigen::MatrixXd rows(logits.rows(), logits.cols());
  Eigen::MatrixXd cols(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double peak = logits.row(r).maxCoeff();
    rows.row(r) = (logits.row(r).array() - peak).exp().matrix();
    rows.row(r) /= rows.row(r).sum();
  }
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const double peak = logits.col(c).maxCoeff();
    cols.col(c) = (logits.col(c).array() - peak).exp().matrix();
    cols.col(c) /= cols.col(c).sum();
  }
  return rows.cwiseProduct(cols);
}

MatchSet match_from_similarity(const Eigen::MatrixXd& similarity,
                               double temperature, double min_score) {
  MatchSet out;
  out.n_a = static_cast<int>(similarity.rows());
  out.n_b = static_cast<int>(similarity.cols());
  if (similarity.size() == 0) return out;
  const Eigen::MatrixXd scores = dual_softmax(similarity, temperature);
  // maxCoeff reports the first maximal entry, i.e. the lowest index.
  std::vector<Eigen::Index> best_in_col(scores.cols());
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    scores.col(c).maxCoeff(&best_in_col[c]);
  }
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    Eigen::Index c;
    const double s = scores.row(r).maxCoeff(&c);
    if (best_in_col[c] == r && s >= min_score) {
      out.matches.push_back({static_cast<int>(r), static_cast<int>(c),
                             std::min(1.0, s)});
    }
  }
  return out;
}

MatchSet match_initial(const descriptors::DescriptorSet& a,
                       const descriptors::DescriptorSet& b,
                       const MatcherConfig& cfg) {
  cfg.validate();
  const bool use_fused = !cfg.local_only && a.has_fused() && b.has_fused();
  const auto& da = use_fused ? a.fused : a.local;
  const auto& db = use_fused ? b.fused : b.local;
  if (a.size() == 0 || b.size() == 0) {
    MatchSet empty;
    empty.n_a = static_cast<int>(a.size());
    empty.n_b = static_cast<int>(b.size());
    return empty;
  }
  if (da.cols() == 0 || da.cols() != db.cols()) {
    throw ArgumentError("match_initial: descriptor dimensions differ (" +
                        std::to_string(da.cols()) + " vs " +
                        std::to_string(db.cols()) + ")");
  }
  const Eigen::MatrixXd sim =
      da.cast<double>() * db.cast<double>().transpose();
  return match_from_similarity(sim, cfg.temperature, cfg.min_score);
}

std::vector<bool> apply_gt_labels(const MatchSet& m, const synth::PairTask& task) {
  std::vector<bool> labels;
  labels.reserve(m.size());
  for (const auto& match : m.matches) {
    const auto pa = task.keypoints_a.at(match.i);
    const auto pb = task.keypoints_b.at(match.j);
    labels.push_back(geometry::distance(task.gt_transform.apply(pa), pb) <=
                     task.meta.gt_tolerance);
  }
  return labels;
}

nlohmann::json to_json(const MatchSet& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& x : m.matches) rows.push_back({x.i, x.j, x.score});
  return {{"n_a", m.n_a}, {"n_b", m.n_b}, {"matches", rows}};
}

MatchSet matches_from_json(const nlohmann::json& j) {
  MatchSet m;
  try {
    m.n_a = j.at("n_a").get<int>();
    m.n_b = j.at("n_b").get<int>();
    for (const auto& row : j.at("matches")) {
      m.matches.push_back({row.at(0).get<int>(), row.at(1).get<int>(),
                           row.at(2).get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("match JSON: ") + e.what());
  }
  m.validate();
  return m;
}

void write_matches(const MatchSet& m, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << to_json(m).dump() << '\n';
}

MatchSet read_matches(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  try {
    return matches_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("match JSON: ") + e.what());
  }
}

}  // namespace neurmatch::matcher
