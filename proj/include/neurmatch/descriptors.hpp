#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "neurmatch/geometry.hpp"
#include "neurmatch/image.hpp"
#include "neurmatch/nn.hpp"

namespace neurmatch::descriptors {

using geometry::Point2;
using FloatMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr std::uint16_t kDescriptorFormatVersion = 1;
inline constexpr std::uint16_t kFeatureMapFormatVersion = 1;
inline constexpr int kFusionFormatVersion = 1;

enum class DescriptorSource { kBuiltinPatch, kExternal };

// Keypoints with their local, semantic and fused descriptor rows. A matrix
// with zero columns is absent.
struct DescriptorSet {
  std::vector<Point2> keypoints;
  FloatMatrix local;
  FloatMatrix semantic;
  FloatMatrix fused;
  DescriptorSource source = DescriptorSource::kExternal;
  // Rows whose local patch had no contrast (descriptor set to zero).
  std::vector<bool> degenerate;

  std::size_t size() const { return keypoints.size(); }
  bool has_local() const { return local.cols() > 0; }
  bool has_semantic() const { return semantic.cols() > 0; }
  bool has_fused() const { return fused.cols() > 0; }

  // Throws FormatError when a present matrix disagrees with the keypoint
  // count or a fused row is not unit length.
  void validate() const;
};

// Dense H x W x C feature grid. Cell (r, c) sits at image position
// (c * stride, r * stride).
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  float stride = 1.0f;
  std::vector<float> data;  // row-major H x W x C

  FeatureMap() = default;
  FeatureMap(int h, int w, int c, float s)
      : height(h), width(w), channels(c), stride(s),
        data(static_cast<std::size_t>(h) * w * c, 0.0f) {}

  float& at(int r, int c, int ch) {
    return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
  }
  float at(int r, int c, int ch) const {
    return data[(static_cast<std::size_t>(r) * width + c) * channels + ch];
  }
  void validate() const;
};

// Channel-wise bilinear interpolation at p / stride. Positions within half a
// cell outside the grid are clamped to the border; further out throws
// OutOfBoundsError.
Eigen::VectorXd bilinear_sample(const FeatureMap& map, Point2 p);

// Mean-subtracted, L2-normalized square patches sampled around each keypoint
// with reflected borders. `patch` must be odd.
DescriptorSet compute_patch_descriptor(const Image& image,
                                       std::span<const Point2> keypoints,
                                       int patch = 15);

// Built-in dense contextual features used when no external semantic map is
// supplied: a heavily smoothed, contrast-normalized copy of the image probed
// on concentric rings around every cell. Coarse and insensitive to blur,
// noise and monotone intensity changes.
struct ContextMapConfig {
  int stride = 8;
  double smoothing_sigma = 5.0;
  std::vector<double> ring_radii{12.0, 24.0, 40.0};
  int ring_samples = 8;

  int channels() const {
    return 1 + static_cast<int>(ring_radii.size()) * ring_samples;
  }
};

FeatureMap compute_context_map(const Image& image,
                               const ContextMapConfig& cfg = {});

// Fills `ds.semantic` by sampling `map` at every keypoint.
void attach_semantic(DescriptorSet& ds, const FeatureMap& map);

struct FusionNet {
  nn::DenseNet net;
  int d_local = 0;
  int d_sem = 0;

  int d_fused() const { return net.output_dim(); }
};

// [d_local ; d_sem] -> hidden (relu) -> d_fused (linear).
FusionNet make_fusion_net(int d_local, int d_sem, int hidden = 256,
                          int d_fused = 128, std::uint64_t seed = 0);

// Returns a copy of `ds` with `fused` populated: forward pass on each
// concatenated row, then L2 normalization.
DescriptorSet fuse(const DescriptorSet& ds, const FusionNet& fusion);

// Concatenated fusion inputs, one column per keypoint.
Eigen::MatrixXd fusion_inputs(const DescriptorSet& ds);

// Normalizes each column; zero columns stay zero.
Eigen::MatrixXd normalize_columns(const Eigen::MatrixXd& m);

nlohmann::json to_json(const FusionNet& f);
FusionNet fusion_from_json(const nlohmann::json& j);

std::vector<std::uint8_t> encode_descriptors(const DescriptorSet& ds);
DescriptorSet decode_descriptors(std::span<const std::uint8_t> bytes);
void write_descriptors(const DescriptorSet& ds, const std::filesystem::path& path);
DescriptorSet read_descriptors(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_feature_map(const FeatureMap& map);
FeatureMap decode_feature_map(std::span<const std::uint8_t> bytes);
void write_feature_map(const FeatureMap& map, const std::filesystem::path& path);
FeatureMap read_feature_map(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes);

}  // namespace neurmatch::descriptors
