#pragma once

#include <array>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

namespace neurmatch::geometry {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }
  friend bool operator==(Point2 a, Point2 b) = default;
};

double distance(Point2 a, Point2 b);
bool is_finite(Point2 p);

using PointPair = std::pair<Point2, Point2>;

// p -> scale * R(rotation) * p + translation.
struct SimilarityTransform {
  double scale = 1.0;
  double rotation = 0.0;
  Point2 translation;

  Point2 apply(Point2 p) const;
  SimilarityTransform inverse() const;
  // (this ∘ inner)(p) = this->apply(inner.apply(p)).
  SimilarityTransform compose(const SimilarityTransform& inner) const;
};

// Least-squares similarity between the two sides of `pairs`.
// Throws ArgumentError for fewer than two pairs and
// DegenerateConfigurationError when the source points coincide.
SimilarityTransform similarity_fit(std::span<const PointPair> pairs);

// Full 2x3 affine map, row-major: x' = a0 x + a1 y + a2, y' = a3 x + a4 y + a5.
struct AffineTransform {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};
  Point2 apply(Point2 p) const;
};

AffineTransform affine_fit(std::span<const PointPair> pairs);

// Thin-plate spline f(p) = A p + t + sum_k w_k U(|p - c_k|), U(r) = r^2 log r.
// Immutable once fitted.
class ThinPlateSpline {
 public:
  ThinPlateSpline() = default;
  ThinPlateSpline(std::vector<Point2> control_points,
                  std::array<double, 6> affine, std::vector<Point2> weights,
                  double regularization);

  static ThinPlateSpline identity();

  Point2 apply(Point2 p) const;
  // Row-major 2x2 Jacobian at p.
  std::array<double, 4> jacobian(Point2 p) const;

  const std::vector<Point2>& control_points() const { return control_points_; }
  const std::array<double, 6>& affine() const { return affine_; }
  const std::vector<Point2>& weights() const { return weights_; }
  double regularization() const { return regularization_; }

  // Largest |sum_k w_k| and |sum_k w_k c_k| component, normalized by the
  // weight and control-point magnitudes.
  double side_condition_residual() const;

  // Rigidly post-composes a similarity: returns q -> s.apply(this->apply(q)).
  // The result is again a thin-plate spline over the same control points.
  ThinPlateSpline then(const SimilarityTransform& s) const;

  friend bool operator==(const ThinPlateSpline&,
                         const ThinPlateSpline&) = default;

 private:
  std::vector<Point2> control_points_;
  std::array<double, 6> affine_{1, 0, 0, 0, 1, 0};
  std::vector<Point2> weights_;
  double regularization_ = 0.0;
};

double tps_kernel(double r);

// Fits the bending-energy-regularized interpolant mapping source -> target.
// lambda = 0 interpolates exactly.
ThinPlateSpline tps_fit(std::span<const Point2> source,
                        std::span<const Point2> target, double lambda = 0.0);

inline Point2 tps_apply(const ThinPlateSpline& t, Point2 p) {
  return t.apply(p);
}

nlohmann::json to_json(const ThinPlateSpline& t);
ThinPlateSpline tps_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SimilarityTransform& s);
SimilarityTransform similarity_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AffineTransform& a);

}  // namespace neurmatch::geometry
