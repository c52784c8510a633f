#include "neurmatch/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <nlohmann/json.hpp>

#include "neurmatch/error.hpp"

namespace neurmatch::geometry {

double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

bool is_finite(Point2 p) { return std::isfinite(p.x) && std::isfinite(p.y); }

Point2 SimilarityTransform::apply(Point2 p) const {
  const double c = scale * std::cos(rotation);
  const double s = scale * std::sin(rotation);
  return {c * p.x - s * p.y + translation.x, s * p.x + c * p.y + translation.y};
}

SimilarityTransform SimilarityTransform::inverse() const {
  SimilarityTransform inv;
  inv.scale = 1.0 / scale;
  inv.rotation = -rotation;
  const Point2 t = inv.apply(translation);
  inv.translation = {-t.x, -t.y};
  return inv;
}

SimilarityTransform SimilarityTransform::compose(
    const SimilarityTransform& inner) const {
  SimilarityTransform out;
  out.scale = scale * inner.scale;
  out.rotation = std::remainder(rotation + inner.rotation, 2.0 * M_PI);
  out.translation = apply(inner.translation);
  return out;
}

SimilarityTransform similarity_fit(std::span<const PointPair> pairs) {
  if (pairs.size() < 2) {
    throw ArgumentError("similarity_fit needs at least 2 pairs");
  }
  using C = std::complex<double>;
  C src_mean = 0.0;
  C dst_mean = 0.0;
  for (const auto& [a, b] : pairs) {
    src_mean += C(a.x, a.y);
    dst_mean += C(b.x, b.y);
  }
  const double n = static_cast<double>(pairs.size());
  src_mean /= n;
  dst_mean /= n;

  // Minimizes sum |b' - z a'|^2 over complex z = scale * exp(i rotation).
  C cross = 0.0;
  double src_var = 0.0;
  double extent = 0.0;
  for (const auto& [a, b] : pairs) {
    const C ac = C(a.x, a.y) - src_mean;
    const C bc = C(b.x, b.y) - dst_mean;
    cross += bc * std::conj(ac);
    src_var += std::norm(ac);
    extent = std::max({extent, std::abs(a.x), std::abs(a.y)});
  }
  const double floor = 1e-24 * std::max(1.0, extent * extent);
  if (src_var <= floor) {
    throw DegenerateConfigurationError(
        "similarity_fit: source points coincide");
  }
  const C z = cross / src_var;
  if (std::abs(z) <= 1e-15) {
    throw DegenerateConfigurationError(
        "similarity_fit: target points coincide (zero scale)");
  }
  SimilarityTransform t;
  t.scale = std::abs(z);
  t.rotation = std::arg(z);
  const C offset = dst_mean - z * src_mean;
  t.translation = {offset.real(), offset.imag()};
  return t;
}

Point2 AffineTransform::apply(Point2 p) const {
  return {m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]};
}

AffineTransform affine_fit(std::span<const PointPair> pairs) {
  if (pairs.size() < 3) {
    throw ArgumentError("affine_fit needs at least 3 pairs");
  }
  Eigen::MatrixXd design(pairs.size(), 3);
  Eigen::MatrixXd rhs(pairs.size(), 2);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    design.row(k) << pairs[k].first.x, pairs[k].first.y, 1.0;
    rhs.row(k) << pairs[k].second.x, pairs[k].second.y;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(
      design, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv(2) <= 1e-10 * sv(0)) {
    throw DegenerateConfigurationError("affine_fit: collinear source points");
  }
  const Eigen::MatrixXd coef = svd.solve(rhs);
  AffineTransform out;
  out.m = {coef(0, 0), coef(1, 0), coef(2, 0),
           coef(0, 1), coef(1, 1), coef(2, 1)};
  return out;
}

double tps_kernel(double r) { return r > 0.0 ? r * r * std::log(r) : 0.0; }

ThinPlateSpline::ThinPlateSpline(std::vector<Point2> control_points,
                                 std::array<double, 6> affine,
                                 std::vector<Point2> weights,
                                 double regularization)
    : control_points_(std::move(control_points)),
      affine_(affine),
      weights_(std::move(weights)),
      regularization_(regularization) {
  if (control_points_.size() != weights_.size()) {
    throw ArgumentError("ThinPlateSpline: weight count must match controls");
  }
  if (!(regularization_ >= 0.0)) {
    throw ArgumentError("ThinPlateSpline: regularization must be >= 0");
  }
}

ThinPlateSpline ThinPlateSpline::identity() { return ThinPlateSpline(); }

Point2 ThinPlateSpline::apply(Point2 p) const {
  double x = affine_[0] * p.x + affine_[1] * p.y + affine_[2];
  double y = affine_[3] * p.x + affine_[4] * p.y + affine_[5];
  for (std::size_t k = 0; k < control_points_.size(); ++k) {
    const double dx = p.x - control_points_[k].x;
    const double dy = p.y - control_points_[k].y;
    const double r2 = dx * dx + dy * dy;
    if (r2 > 0.0) {
      const double u = 0.5 * r2 * std::log(r2);
      x += weights_[k].x * u;
      y += weights_[k].y * u;
    }
  }
  return {x, y};
}

std::array<double, 4> ThinPlateSpline::jacobian(Point2 p) const {
  std::array<double, 4> j{affine_[0], affine_[1], affine_[3], affine_[4]};
  // dU/dx = dx (2 log r + 1) = dx (log r^2 + 1).
  for (std::size_t k = 0; k < control_points_.size(); ++k) {
    const double dx = p.x - control_points_[k].x;
    const double dy = p.y - control_points_[k].y;
    const double r2 = dx * dx + dy * dy;
    if (r2 > 0.0) {
      const double g = std::log(r2) + 1.0;
      j[0] += weights_[k].x * dx * g;
      j[1] += weights_[k].x * dy * g;
      j[2] += weights_[k].y * dx * g;
      j[3] += weights_[k].y * dy * g;
    }
  }
  return j;
}

double ThinPlateSpline::side_condition_residual() const {
  if (weights_.empty()) return 0.0;
  double sum_x = 0, sum_y = 0, mx_x = 0, mx_y = 0, my_x = 0, my_y = 0;
  double w_scale = 0.0;
  double c_scale = 1.0;
  for (std::size_t k = 0; k < weights_.size(); ++k) {
    const Point2 w = weights_[k];
    const Point2 c = control_points_[k];
    sum_x += w.x;
    sum_y += w.y;
    mx_x += w.x * c.x;
    mx_y += w.y * c.x;
    my_x += w.x * c.y;
    my_y += w.y * c.y;
    w_scale = std::max({w_scale, std::abs(w.x), std::abs(w.y)});
    c_scale = std::max({c_scale, std::abs(c.x), std::abs(c.y)});
  }
  if (w_scale == 0.0) return 0.0;
  const double n = static_cast<double>(weights_.size());
  const double sums = std::max(std::abs(sum_x), std::abs(sum_y)) / (n * w_scale);
  const double moments =
      std::max({std::abs(mx_x), std::abs(mx_y), std::abs(my_x), std::abs(my_y)}) /
      (n * w_scale * c_scale);
  return std::max(sums, moments);
}

ThinPlateSpline ThinPlateSpline::then(const SimilarityTransform& s) const {
  const double c = s.scale * std::cos(s.rotation);
  const double sn = s.scale * std::sin(s.rotation);
  const auto& a = affine_;
  std::array<double, 6> out{
      c * a[0] - sn * a[3], c * a[1] - sn * a[4],
      c * a[2] - sn * a[5] + s.translation.x,
      sn * a[0] + c * a[3], sn * a[1] + c * a[4],
      sn * a[2] + c * a[5] + s.translation.y};
  std::vector<Point2> w(weights_.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    w[k] = {c * weights_[k].x - sn * weights_[k].y,
            sn * weights_[k].x + c * weights_[k].y};
  }
  return ThinPlateSpline(control_points_, out, std::move(w), regularization_);
}

ThinPlateSpline tps_fit(std::span<const Point2> source,
                        std::span<const Point2> target, double lambda) {
  if (source.size() != target.size()) {
    throw ArgumentError("tps_fit: source and target sizes differ");
  }
  if (source.size() < 3) {
    throw ArgumentError("tps_fit: needs at least 3 control points");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw ArgumentError("tps_fit: lambda must be finite and >= 0");
  }
  const std::size_t n = source.size();

  // Solve in centered, RMS-scaled coordinates and map back. The r^2 log h
  // term that scaling introduces is annihilated by the side conditions except
  // for a constant, which lands in the translation.
  Point2 center;
  for (Point2 p : source) center = center + p;
  center = (1.0 / n) * center;
  double spread = 0.0;
  for (Point2 p : source) {
    const Point2 d = p - center;
    spread += d.x * d.x + d.y * d.y;
  }
  spread = std::sqrt(spread / n);
  if (!(spread > 0.0)) {
    throw DegenerateConfigurationError("tps_fit: all source points coincide");
  }

  std::vector<Point2> unit(n);
  for (std::size_t k = 0; k < n; ++k) {
    unit[k] = (1.0 / spread) * (source[k] - center);
  }
  const double scaled_lambda = lambda / (spread * spread);

  const Eigen::Index m = static_cast<Eigen::Index>(n) + 3;
  Eigen::MatrixXd system = Eigen::MatrixXd::Zero(m, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double u = tps_kernel(distance(unit[i], unit[j]));
      system(i, j) = u;
      system(j, i) = u;
    }
    system(i, i) = scaled_lambda;
    system(i, n) = 1.0;
    system(i, n + 1) = unit[i].x;
    system(i, n + 2) = unit[i].y;
    system(n, i) = 1.0;
    system(n + 1, i) = unit[i].x;
    system(n + 2, i) = unit[i].y;
  }

  Eigen::BDCSVD<Eigen::MatrixXd> svd(system);
  const auto& sv = svd.singularValues();
  if (!(sv(m - 1) > 1e-10 * sv(0))) {
    throw DegenerateConfigurationError(
        "tps_fit: degenerate (collinear or coincident) control points");
  }

  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(m, 2);
  for (std::size_t k = 0; k < n; ++k) {
    rhs(k, 0) = target[k].x;
    rhs(k, 1) = target[k].y;
  }
  const Eigen::MatrixXd sol = system.partialPivLu().solve(rhs);

  const double inv_h = 1.0 / spread;
  const double inv_h2 = inv_h * inv_h;
  const double log_h = std::log(spread);
  std::vector<Point2> weights(n);
  Point2 kernel_offset;
  for (std::size_t k = 0; k < n; ++k) {
    weights[k] = {sol(k, 0) * inv_h2, sol(k, 1) * inv_h2};
    const double s2 = source[k].x * source[k].x + source[k].y * source[k].y;
    kernel_offset = kernel_offset + (s2 * log_h) * weights[k];
  }
  // Unit-space affine part: [a0 + ax x' + ay y'] per output coordinate.
  std::array<double, 6> affine{};
  for (int out = 0; out < 2; ++out) {
    const double a0 = sol(n, out);
    const double ax = sol(n + 1, out) * inv_h;
    const double ay = sol(n + 2, out) * inv_h;
    const double offset = out == 0 ? kernel_offset.x : kernel_offset.y;
    affine[3 * out + 0] = ax;
    affine[3 * out + 1] = ay;
    affine[3 * out + 2] = a0 - ax * center.x - ay * center.y - offset;
  }
  return ThinPlateSpline({source.begin(), source.end()}, affine,
                         std::move(weights), lambda);
}

nlohmann::json to_json(const ThinPlateSpline& t) {
  nlohmann::json controls = nlohmann::json::array();
  nlohmann::json weights = nlohmann::json::array();
  for (std::size_t k = 0; k < t.control_points().size(); ++k) {
    controls.push_back({t.control_points()[k].x, t.control_points()[k].y});
    weights.push_back({t.weights()[k].x, t.weights()[k].y});
  }
  return {{"type", "tps"},
          {"control_points", controls},
          {"affine", t.affine()},
          {"weights", weights},
          {"lambda", t.regularization()}};
}

ThinPlateSpline tps_from_json(const nlohmann::json& j) {
  try {
    if (j.at("type").get<std::string>() != "tps") {
      throw FormatError("transform JSON: expected type \"tps\"");
    }
    std::vector<Point2> controls;
    std::vector<Point2> weights;
    for (const auto& c : j.at("control_points")) {
      controls.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
    }
    for (const auto& w : j.at("weights")) {
      weights.push_back({w.at(0).get<double>(), w.at(1).get<double>()});
    }
    const auto affine = j.at("affine").get<std::vector<double>>();
    if (affine.size() != 6) {
      throw FormatError("transform JSON: affine needs 6 values");
    }
    std::array<double, 6> a{};
    std::copy(affine.begin(), affine.end(), a.begin());
    return ThinPlateSpline(std::move(controls), a, std::move(weights),
                           j.at("lambda").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("transform JSON: ") + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("transform JSON: ") + e.what());
  }
}

nlohmann::json to_json(const SimilarityTransform& s) {
  return {{"type", "similarity"},
          {"scale", s.scale},
          {"rotation", s.rotation},
          {"translation", {s.translation.x, s.translation.y}}};
}

SimilarityTransform similarity_from_json(const nlohmann::json& j) {
  try {
    if (j.at("type").get<std::string>() != "similarity") {
      throw FormatError("transform JSON: expected type \"similarity\"");
    }
    SimilarityTransform s;
    s.scale = j.at("scale").get<double>();
    s.rotation = j.at("rotation").get<double>();
    s.translation = {j.at("translation").at(0).get<double>(),
                     j.at("translation").at(1).get<double>()};
    if (!(s.scale > 0.0)) throw FormatError("similarity scale must be > 0");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("transform JSON: ") + e.what());
  }
}

nlohmann::json to_json(const AffineTransform& a) {
  return {{"type", "affine"}, {"matrix", a.m}};
}

}  // namespace neurmatch::geometry
