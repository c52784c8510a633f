#include "neurmatch/descriptors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "neurmatch/error.hpp"

namespace neurmatch::descriptors {

void DescriptorSet::validate() const {
  const auto n = static_cast<Eigen::Index>(keypoints.size());
  auto check = [&](const FloatMatrix& m, const char* name) {
    if (m.cols() > 0 && m.rows() != n) {
      throw FormatError(std::string("descriptor set: ") + name + " has " +
                        std::to_string(m.rows()) + " rows for " +
                        std::to_string(n) + " keypoints");
    }
    if (!m.allFinite()) {
      throw FormatError(std::string("descriptor set: ") + name +
                        " has non-finite entries");
    }
  };
  check(local, "local");
  check(semantic, "semantic");
  check(fused, "fused");
  for (const auto& p : keypoints) {
    if (!geometry::is_finite(p)) {
      throw FormatError("descriptor set: non-finite keypoint");
    }
  }
  for (Eigen::Index r = 0; r < fused.rows(); ++r) {
    const double norm = fused.row(r).cast<double>().norm();
    if (norm != 0.0 && std::abs(norm - 1.0) > 1e-6) {
      throw FormatError("descriptor set: fused row " + std::to_string(r) +
                        " is not unit length");
    }
  }
}

void FeatureMap::validate() const {
  if (height <= 0 || width <= 0 || channels <= 0) {
    throw FormatError("feature map: dimensions must be positive");
  }
  if (!(stride >= 1.0f) || !std::isfinite(stride)) {
    throw FormatError("feature map: stride must be >= 1");
  }
  if (data.size() != static_cast<std::size_t>(height) * width * channels) {
    throw FormatError("feature map: payload size mismatch");
  }
  for (float v : data) {
    if (!std::isfinite(v)) throw FormatError("feature map: non-finite entry");
  }
}

Eigen::VectorXd bilinear_sample(const FeatureMap& map, Point2 p) {
  const double u = p.x / map.stride;
  const double v = p.y / map.stride;
  if (!(u >= -0.5 && u <= map.width - 0.5 && v >= -0.5 &&
        v <= map.height - 0.5)) {
    throw OutOfBoundsError("bilinear_sample: (" + std::to_string(p.x) + ", " +
                           std::to_string(p.y) + ") lies outside the map");
  }
  const double cu = std::clamp(u, 0.0, static_cast<double>(map.width - 1));
  const double cv = std::clamp(v, 0.0, static_cast<double>(map.height - 1));
  const int c0 = std::min(static_cast<int>(std::floor(cu)), map.width - 1);
  const int r0 = std::min(static_cast<int>(std::floor(cv)), map.height - 1);
  const int c1 = std::min(c0 + 1, map.width - 1);
  const int r1 = std::min(r0 + 1, map.height - 1);
  const double au = cu - c0;
  const double av = cv - r0;
  Eigen::VectorXd out(map.channels);
  for (int ch = 0; ch < map.channels; ++ch) {
    const double top = (1 - au) * map.at(r0, c0, ch) + au * map.at(r0, c1, ch);
    const double bottom = (1 - au) * map.at(r1, c0, ch) + au * map.at(r1, c1, ch);
    out(ch) = (1 - av) * top + av * bottom;
  }
  return out;
}

DescriptorSet compute_patch_descriptor(const Image& image,
                                       std::span<const Point2> keypoints,
                                       int patch) {
  if (patch <= 0 || patch % 2 == 0) {
    throw ArgumentError("patch size must be a positive odd number");
  }
  const int half = patch / 2;
  const int dim = patch * patch;
  DescriptorSet ds;
  ds.source = DescriptorSource::kBuiltinPatch;
  ds.keypoints.assign(keypoints.begin(), keypoints.end());
  ds.local.resize(static_cast<Eigen::Index>(keypoints.size()), dim);
  ds.degenerate.assign(keypoints.size(), false);
  Eigen::VectorXd values(dim);
  for (std::size_t k = 0; k < keypoints.size(); ++k) {
    const Point2 p = keypoints[k];
    int idx = 0;
    for (int dy = -half; dy <= half; ++dy) {
      for (int dx = -half; dx <= half; ++dx) {
        values(idx++) = image.sample(p.x + dx, p.y + dy);
      }
    }
    const double mean = values.mean();
    values.array() -= mean;
    const double norm = values.norm();
    if (norm <= 1e-9 * std::sqrt(static_cast<double>(dim)) *
                     std::max(1.0, std::abs(mean))) {
      ds.local.row(k).setZero();
      ds.degenerate[k] = true;
    } else {
      ds.local.row(k) = (values / norm).cast<float>().transpose();
    }
  }
  return ds;
}

FeatureMap compute_context_map(const Image& image, const ContextMapConfig& cfg) {
  if (cfg.stride < 1) throw ArgumentError("context map stride must be >= 1");
  // Robust contrast normalization: background at the median, white at the
  // 99.5th percentile.
  std::vector<double> sorted = image.pixels;
  const auto pick = [&](double q) {
    const auto k = static_cast<std::size_t>(q * (sorted.size() - 1));
    std::nth_element(sorted.begin(), sorted.begin() + k, sorted.end());
    return sorted[k];
  };
  const double background = pick(0.5);
  const double white = pick(0.995);
  const double range = white - background;

  // Half-resolution smoothing; the context scale makes full resolution moot.
  const int hw = (image.width + 1) / 2;
  const int hh = (image.height + 1) / 2;
  Image half(hw, hh);
  for (int y = 0; y < hh; ++y) {
    for (int x = 0; x < hw; ++x) {
      double acc = 0.0;
      for (int j = 0; j < 2; ++j) {
        for (int i = 0; i < 2; ++i) {
          acc += image.reflected(std::min(2 * x + i, image.width - 1),
                                 std::min(2 * y + j, image.height - 1));
        }
      }
      const double v = range > 0.0 ? (0.25 * acc - background) / range : 0.0;
      half.at(x, y) = std::clamp(v, 0.0, 1.0);
    }
  }
  const Image smooth = gaussian_blur(half, 0.5 * cfg.smoothing_sigma);
  // Half-resolution pixel k covers full-resolution pixels 2k and 2k + 1.
  const auto probe = [&](double x, double y) {
    return smooth.sample(0.5 * x - 0.25, 0.5 * y - 0.25);
  };

  const int rows = (image.height - 1) / cfg.stride + 2;
  const int cols = (image.width - 1) / cfg.stride + 2;
  FeatureMap map(rows, cols, cfg.channels(), static_cast<float>(cfg.stride));
  std::vector<Point2> offsets{{0.0, 0.0}};
  for (double radius : cfg.ring_radii) {
    for (int s = 0; s < cfg.ring_samples; ++s) {
      const double angle = 2.0 * std::numbers::pi * s / cfg.ring_samples;
      offsets.push_back({radius * std::cos(angle), radius * std::sin(angle)});
    }
  }
  Eigen::VectorXd v(cfg.channels());
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const double x = static_cast<double>(c) * cfg.stride;
      const double y = static_cast<double>(r) * cfg.stride;
      for (std::size_t k = 0; k < offsets.size(); ++k) {
        v(k) = probe(x + offsets[k].x, y + offsets[k].y);
      }
      v /= std::max(v.norm(), 0.05);
      for (int ch = 0; ch < cfg.channels(); ++ch) {
        map.at(r, c, ch) = static_cast<float>(v(ch));
      }
    }
  }
  return map;
}

void attach_semantic(DescriptorSet& ds, const FeatureMap& map) {
  ds.semantic.resize(static_cast<Eigen::Index>(ds.size()), map.channels);
  for (std::size_t k = 0; k < ds.size(); ++k) {
    ds.semantic.row(k) =
        bilinear_sample(map, ds.keypoints[k]).cast<float>().transpose();
  }
}

FusionNet make_fusion_net(int d_local, int d_sem, int hidden, int d_fused,
                          std::uint64_t seed) {
  if (d_local <= 0 || d_sem < 0) {
    throw ArgumentError("fusion net needs d_local > 0 and d_sem >= 0");
  }
  const nn::LayerSpec specs[] = {{hidden, nn::Activation::kRelu},
                                 {d_fused, nn::Activation::kNone}};
  return FusionNet{nn::DenseNet::make(d_local + d_sem, specs, seed), d_local,
                   d_sem};
}

Eigen::MatrixXd fusion_inputs(const DescriptorSet& ds) {
  const auto n = static_cast<Eigen::Index>(ds.size());
  const Eigen::Index dl = ds.local.cols();
  const Eigen::Index dsem = ds.semantic.cols();
  Eigen::MatrixXd x(dl + dsem, n);
  if (n > 0) {
    if (dl > 0) x.topRows(dl) = ds.local.cast<double>().transpose();
    if (dsem > 0) x.bottomRows(dsem) = ds.semantic.cast<double>().transpose();
  }
  return x;
}

Eigen::MatrixXd normalize_columns(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out = m;
  for (Eigen::Index c = 0; c < out.cols(); ++c) {
    const double norm = out.col(c).norm();
    if (norm > 0.0) out.col(c) /= norm;
  }
  return out;
}

DescriptorSet fuse(const DescriptorSet& ds, const FusionNet& fusion) {
  if (!ds.has_local() || !ds.has_semantic()) {
    throw PreconditionError(
        "fuse: both local and semantic descriptors are required");
  }
  if (ds.local.cols() != fusion.d_local || ds.semantic.cols() != fusion.d_sem) {
    throw PreconditionError("fuse: descriptor widths (" +
                            std::to_string(ds.local.cols()) + ", " +
                            std::to_string(ds.semantic.cols()) +
                            ") do not match the fusion net (" +
                            std::to_string(fusion.d_local) + ", " +
                            std::to_string(fusion.d_sem) + ")");
  }
  DescriptorSet out = ds;
  const Eigen::MatrixXd y =
      normalize_columns(fusion.net.forward_batch(fusion_inputs(ds)));
  out.fused = y.transpose().cast<float>();
  // Re-normalize in single precision so stored rows are unit length.
  for (Eigen::Index r = 0; r < out.fused.rows(); ++r) {
    const float norm = out.fused.row(r).norm();
    if (norm > 0.0f) out.fused.row(r) /= norm;
  }
  return out;
}

nlohmann::json to_json(const FusionNet& f) {
  return {{"format", "neurmatch-fusion"},
          {"format_version", kFusionFormatVersion},
          {"fusion", {{"d_local", f.d_local}, {"d_sem", f.d_sem},
                      {"d_fused", f.d_fused()}, {"normalize_output", true}}},
          {"net", nn::to_json(f.net)}};
}

FusionNet fusion_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "neurmatch-fusion") {
      throw FormatError("fusion model JSON: wrong format tag");
    }
    if (j.at("format_version").get<int>() != kFusionFormatVersion) {
      throw FormatError("fusion model JSON: unsupported format_version");
    }
    FusionNet f;
    f.net = nn::net_from_json(j.at("net"));
    f.d_local = j.at("fusion").at("d_local").get<int>();
    f.d_sem = j.at("fusion").at("d_sem").get<int>();
    if (f.d_local + f.d_sem != f.net.input_dim()) {
      throw FormatError("fusion model JSON: d_local + d_sem != input_dim");
    }
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("fusion model JSON: ") + e.what());
  }
}

}  // namespace neurmatch::descriptors
