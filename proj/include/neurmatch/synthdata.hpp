#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "neurmatch/descriptors.hpp"
#include "neurmatch/geometry.hpp"
#include "neurmatch/image.hpp"

namespace neurmatch::synth {

using geometry::Point2;
using geometry::ThinPlateSpline;

inline constexpr int kTaskFormatVersion = 1;

struct SceneConfig {
  int image_size = 512;
  int n_neurons = 50;
  double radius_min = 2.5;  // soma Gaussian sigma, pixels
  double radius_max = 5.0;
  double intensity_min = 0.55;
  double intensity_max = 1.0;
  int dendrites_min = 1;
  int dendrites_max = 3;
  int puncta_per_neuron = 3;
  double min_separation = 12.0;  // between soma centers
  double border_margin = 8.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Anisotropic Gaussian: intensity * exp(-0.5 d^T Cov^-1 d).
struct Blob {
  Point2 center;
  double cov_xx = 1.0;
  double cov_xy = 0.0;
  double cov_yy = 1.0;
  double intensity = 1.0;
};

// Somas (whose centers are the keypoints), dendrite segments and background
// puncta, all as Gaussian blobs.
struct Scene {
  int image_size = 0;
  std::vector<Blob> blobs;
  std::vector<Point2> keypoints;
};

struct SceneImage {
  Scene scene;
  Image image;
};

Scene generate_scene_layout(const SceneConfig& cfg);
Image render_scene(const Scene& scene);
SceneImage generate_scene(const SceneConfig& cfg);

// Pushes every blob through `t`, transforming covariances by the local
// Jacobian. Keypoints map to t(keypoint) exactly.
Scene warp_scene(const Scene& scene, const ThinPlateSpline& t);

// Appearance model: blur, gamma, log contrast remap, background offset, then
// signal-dependent Gaussian noise with std sqrt(noise_gain * v + noise_floor^2).
struct ModalityStyle {
  std::string name = "identity";
  double blur_sigma = 0.0;
  double gamma = 1.0;
  double contrast = 0.0;
  double background = 0.0;
  double noise_gain = 0.0;
  double noise_floor = 0.0;

  static ModalityStyle identity();
  static ModalityStyle modality_a();  // two-photon-like
  static ModalityStyle modality_b();  // fMOST-like
  // Variant `index` of `count`, spread around this style (index
  // (count - 1) / 2 is the style itself when count is odd).
  ModalityStyle variant(int index, int count) const;
};

Image render_modality(const Image& image, const ModalityStyle& style,
                      std::uint64_t seed);

struct DeformConfig {
  int grid = 4;
  double displacement_sigma = 25.6;  // pixels
  double max_rotation = 0.1;         // radians
  double max_scale_jitter = 0.05;    // fraction

  void validate() const;
};

// Control grid over the image, targets displaced by truncated Gaussian noise
// (norm < 4 sigma) plus a global similarity jitter about the image center,
// interpolated exactly. Fold-producing draws are rejected.
ThinPlateSpline sample_deformation(const DeformConfig& cfg, int image_size,
                                   std::uint64_t seed);

struct IndexPair {
  int a = 0;
  int b = 0;
  friend bool operator==(IndexPair, IndexPair) = default;
};

struct TaskMeta {
  std::string kind;
  std::string modality_a;
  std::string modality_b;
  std::uint64_t seed = 0;
  double difficulty = 0.0;  // displacement sigma / image size
  double rotation = 0.0;    // augmentation rotation, radians
  int contrast_variant = 0;
  int image_size = 0;
  double gt_tolerance = 3.0;
};

struct PairTask {
  std::vector<Point2> keypoints_a;
  std::vector<Point2> keypoints_b;
  descriptors::DescriptorSet descriptors_a;
  descriptors::DescriptorSet descriptors_b;
  ThinPlateSpline gt_transform;  // maps A -> B
  std::vector<IndexPair> gt_matches;
  TaskMeta meta;
  Image image_a;  // empty for geometry-only tasks
  Image image_b;

  // Throws FormatError if a gt pair is out of range or its residual exceeds
  // the tolerance.
  void validate() const;
};

struct TaskOptions {
  bool render = true;  // false: keypoints, transform and labels only
  int patch = 15;
  descriptors::ContextMapConfig context;
  double gt_tolerance = 3.0;
  ModalityStyle style_a = ModalityStyle::modality_a();
  ModalityStyle style_b = ModalityStyle::modality_b();
};

struct AugConfig {
  int rotation_steps = 10;
  int contrast_variants = 5;
  double max_rotation = 0.3;  // rotation steps span [-max, +max]

  int count() const { return rotation_steps * contrast_variants; }
  void validate() const;
};

// Single-modality image I and its warp I' = T(I); the identity pairing of
// in-bounds keypoints is the ground truth.
PairTask make_pretrain_task(const SceneConfig& scene_cfg,
                            const DeformConfig& deform_cfg, std::uint64_t seed,
                            const TaskOptions& options = {});

// One scene rendered as modality A, deformed and rendered as modality B, and
// expanded to one task per (rotation, contrast variant) combination.
std::vector<PairTask> make_crossmodal_task(const SceneConfig& scene_cfg,
                                           const DeformConfig& deform_cfg,
                                           const AugConfig& aug,
                                           std::uint64_t seed,
                                           const TaskOptions& options = {});

nlohmann::json task_to_json(const PairTask& task);
void save_task(const PairTask& task, const std::filesystem::path& dir,
               bool write_images = true);
PairTask load_task(const std::filesystem::path& dir);

}  // namespace neurmatch::synth
