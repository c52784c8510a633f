#include "neurmatch/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "neurmatch/error.hpp"
#include "neurmatch/random.hpp"

namespace neurmatch::synth {
namespace {

Blob oriented_blob(Point2 center, double sigma_major, double sigma_minor,
                   double angle, double intensity) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double a = sigma_major * sigma_major;
  const double b = sigma_minor * sigma_minor;
  Blob blob;
  blob.center = center;
  blob.cov_xx = a * c * c + b * s * s;
  blob.cov_xy = (a - b) * c * s;
  blob.cov_yy = a * s * s + b * c * c;
  blob.intensity = intensity;
  return blob;
}

void splat(Image& img, const Blob& blob) {
  const double det = blob.cov_xx * blob.cov_yy - blob.cov_xy * blob.cov_xy;
  if (!(det > 0.0)) return;
  const double ixx = blob.cov_yy / det;
  const double ixy = -blob.cov_xy / det;
  const double iyy = blob.cov_xx / det;
  const double trace = blob.cov_xx + blob.cov_yy;
  const double largest =
      0.5 * (trace + std::sqrt(std::max(0.0, trace * trace - 4.0 * det)));
  const double reach = 3.5 * std::sqrt(largest);
  const int x0 = std::max(0, static_cast<int>(std::floor(blob.center.x - reach)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(blob.center.x + reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(blob.center.y - reach)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(blob.center.y + reach)));
  for (int y = y0; y <= y1; ++y) {
    const double dy = y - blob.center.y;
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - blob.center.x;
      const double q = ixx * dx * dx + 2.0 * ixy * dx * dy + iyy * dy * dy;
      if (q < 12.25) img.at(x, y) += blob.intensity * std::exp(-0.5 * q);
    }
  }
}

geometry::SimilarityTransform rotation_about(Point2 center, double angle) {
  geometry::SimilarityTransform s;
  s.rotation = angle;
  const Point2 rc = s.apply(center);
  s.translation = center - rc;
  return s;
}

bool in_image(Point2 p, int size) {
  return p.x >= 0.0 && p.y >= 0.0 && p.x <= size - 1 && p.y <= size - 1;
}

// Builds B-side keypoints as T(p_a), keeping those inside the image and at
// least 2 px from every kept one, in a seeded random order.
void fill_correspondences(PairTask& task, const Scene& warped) {
  const int size = task.meta.image_size;
  for (std::size_t i = 0; i < warped.keypoints.size(); ++i) {
    const Point2 p = warped.keypoints[i];
    if (!in_image(p, size)) continue;
    const bool crowded = std::any_of(
        task.keypoints_b.begin(), task.keypoints_b.end(),
        [&](Point2 q) { return geometry::distance(p, q) < 2.0; });
    if (crowded) continue;
    task.gt_matches.push_back(
        {static_cast<int>(i), static_cast<int>(task.keypoints_b.size())});
    task.keypoints_b.push_back(p);
  }
  // B order carries no information about the pairing.
  std::vector<int> perm(task.keypoints_b.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(task.meta.seed, 5));
  rng.shuffle(std::span<int>(perm));
  std::vector<Point2> shuffled(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) shuffled[perm[k]] = task.keypoints_b[k];
  task.keypoints_b = std::move(shuffled);
  for (auto& m : task.gt_matches) m.b = perm[m.b];
}

descriptors::DescriptorSet describe(const Image& image,
                                    const std::vector<Point2>& keypoints,
                                    const TaskOptions& options) {
  auto ds = descriptors::compute_patch_descriptor(image, keypoints, options.patch);
  descriptors::attach_semantic(
      ds, descriptors::compute_context_map(image, options.context));
  return ds;
}

}  // namespace

void SceneConfig::validate() const {
  if (image_size < 16) throw ArgumentError("image_size must be >= 16");
  if (n_neurons < 1) throw ArgumentError("n_neurons must be >= 1");
  if (!(radius_min > 0.0 && radius_min <= radius_max)) {
    throw ArgumentError("blob radius range must satisfy 0 < min <= max");
  }
  if (!(intensity_min >= 0.0 && intensity_min <= intensity_max &&
        intensity_max <= 1.0)) {
    throw ArgumentError("intensity range must lie within [0, 1]");
  }
  if (dendrites_min < 0 || dendrites_min > dendrites_max) {
    throw ArgumentError("dendrite count range is invalid");
  }
  if (puncta_per_neuron < 0) throw ArgumentError("puncta_per_neuron must be >= 0");
  if (!(min_separation >= 2.0)) throw ArgumentError("min_separation must be >= 2 px");
  if (!(border_margin >= 0.0 && 2.0 * border_margin < image_size)) {
    throw ArgumentError("border_margin does not fit the image");
  }
}

Scene generate_scene_layout(const SceneConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Scene scene;
  scene.image_size = cfg.image_size;
  const double lo = cfg.border_margin;
  const double hi = cfg.image_size - 1 - cfg.border_margin;

  const int max_attempts = 1000 * cfg.n_neurons;
  int attempts = 0;
  while (static_cast<int>(scene.keypoints.size()) < cfg.n_neurons) {
    if (++attempts > max_attempts) {
      throw ArgumentError("cannot place " + std::to_string(cfg.n_neurons) +
                          " neurons with the requested separation");
    }
    const Point2 p{rng.uniform(lo, hi), rng.uniform(lo, hi)};
    const bool crowded = std::any_of(
        scene.keypoints.begin(), scene.keypoints.end(),
        [&](Point2 q) { return geometry::distance(p, q) < cfg.min_separation; });
    if (!crowded) scene.keypoints.push_back(p);
  }

  for (const Point2 center : scene.keypoints) {
    const double radius = rng.uniform(cfg.radius_min, cfg.radius_max);
    const double intensity = rng.uniform(cfg.intensity_min, cfg.intensity_max);
    scene.blobs.push_back(oriented_blob(center, radius,
                                        radius * rng.uniform(0.55, 1.0),
                                        rng.uniform(0.0, std::numbers::pi),
                                        intensity));
    const int dendrites =
        cfg.dendrites_min +
        static_cast<int>(rng.index(cfg.dendrites_max - cfg.dendrites_min + 1));
    for (int d = 0; d < dendrites; ++d) {
      const double direction = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double length = rng.uniform(10.0, 28.0);
      const double reach = 1.2 * radius + 0.5 * length;
      const Point2 mid{center.x + reach * std::cos(direction),
                       center.y + reach * std::sin(direction)};
      scene.blobs.push_back(oriented_blob(mid, 0.25 * length,
                                          rng.uniform(0.9, 1.4), direction,
                                          intensity * rng.uniform(0.35, 0.6)));
    }
  }

  const int puncta = cfg.puncta_per_neuron * cfg.n_neurons;
  const double keepout = 2.0 * cfg.radius_max + 4.0;
  for (int k = 0, tries = 0; k < puncta && tries < 50 * puncta + 50; ++tries) {
    const Point2 p{rng.uniform(0.0, cfg.image_size - 1.0),
                   rng.uniform(0.0, cfg.image_size - 1.0)};
    const bool near_soma = std::any_of(
        scene.keypoints.begin(), scene.keypoints.end(),
        [&](Point2 q) { return geometry::distance(p, q) < keepout; });
    if (near_soma) continue;
    const double sigma = rng.uniform(1.0, 2.0);
    scene.blobs.push_back(oriented_blob(p, sigma, sigma, 0.0,
                                        rng.uniform(0.1, 0.35)));
    ++k;
  }
  return scene;
}

Image render_scene(const Scene& scene) {
  Image img(scene.image_size, scene.image_size);
  for (const auto& blob : scene.blobs) splat(img, blob);
  for (double& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
  return img;
}

SceneImage generate_scene(const SceneConfig& cfg) {
  SceneImage out;
  out.scene = generate_scene_layout(cfg);
  out.image = render_scene(out.scene);
  return out;
}

Scene warp_scene(const Scene& scene, const ThinPlateSpline& t) {
  Scene out;
  out.image_size = scene.image_size;
  out.blobs.reserve(scene.blobs.size());
  for (const auto& blob : scene.blobs) {
    const auto j = t.jacobian(blob.center);
    // Cov' = J Cov J^T
    const double a = j[0], b = j[1], c = j[2], d = j[3];
    const double xx = blob.cov_xx, xy = blob.cov_xy, yy = blob.cov_yy;
    Blob w = blob;
    w.center = t.apply(blob.center);
    w.cov_xx = a * a * xx + 2 * a * b * xy + b * b * yy;
    w.cov_xy = a * c * xx + (a * d + b * c) * xy + b * d * yy;
    w.cov_yy = c * c * xx + 2 * c * d * xy + d * d * yy;
    out.blobs.push_back(w);
  }
  for (const Point2 p : scene.keypoints) out.keypoints.push_back(t.apply(p));
  return out;
}

ModalityStyle ModalityStyle::identity() { return ModalityStyle{}; }

ModalityStyle ModalityStyle::modality_a() {
  ModalityStyle s;
  s.name = "modality_a";
  s.blur_sigma = 1.6;
  s.gamma = 0.7;
  s.contrast = 0.0;
  s.background = 0.08;
  s.noise_gain = 0.004;
  s.noise_floor = 0.03;
  return s;
}

ModalityStyle ModalityStyle::modality_b() {
  ModalityStyle s;
  s.name = "modality_b";
  s.blur_sigma = 0.7;
  s.gamma = 1.4;
  s.contrast = 4.0;
  s.background = 0.03;
  s.noise_gain = 0.001;
  s.noise_floor = 0.02;
  return s;
}

ModalityStyle ModalityStyle::variant(int index, int count) const {
  if (count <= 1) return *this;
  const double f = static_cast<double>(index) / (count - 1) - 0.5;  // [-0.5, 0.5]
  ModalityStyle s = *this;
  s.name = name + "/v" + std::to_string(index);
  s.gamma = gamma * std::exp(0.5 * f);
  s.blur_sigma = std::max(0.0, blur_sigma * (1.0 + 0.6 * f));
  s.noise_floor = noise_floor * (1.0 + f);
  s.noise_gain = noise_gain * (1.0 + f);
  return s;
}

Image render_modality(const Image& image, const ModalityStyle& style,
                      std::uint64_t seed) {
  Image out = gaussian_blur(image, style.blur_sigma);
  const double contrast_norm = style.contrast > 0.0 ? std::log1p(style.contrast) : 1.0;
  const bool noisy = style.noise_gain > 0.0 || style.noise_floor > 0.0;
  Rng rng(seed);
  for (double& v : out.pixels) {
    v = std::clamp(v, 0.0, 1.0);
    if (style.gamma != 1.0) v = std::pow(v, style.gamma);
    if (style.contrast > 0.0) v = std::log1p(style.contrast * v) / contrast_norm;
    v += style.background;
    if (noisy) {
      const double sd = std::sqrt(style.noise_gain * v +
                                  style.noise_floor * style.noise_floor);
      v += sd * rng.normal();
    }
    v = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

void DeformConfig::validate() const {
  if (grid < 2) throw ArgumentError("deformation grid must be >= 2 per axis");
  if (!(displacement_sigma >= 0.0)) {
    throw ArgumentError("displacement_sigma must be >= 0");
  }
  if (!(max_rotation >= 0.0) || !(max_scale_jitter >= 0.0 && max_scale_jitter < 1.0)) {
    throw ArgumentError("rotation / scale jitter out of range");
  }
}

ThinPlateSpline sample_deformation(const DeformConfig& cfg, int image_size,
                                   std::uint64_t seed) {
  cfg.validate();
  if (image_size < 2) throw ArgumentError("image_size must be >= 2");
  Rng rng(seed);
  std::vector<Point2> controls;
  const double step = (image_size - 1.0) / (cfg.grid - 1);
  for (int r = 0; r < cfg.grid; ++r) {
    for (int c = 0; c < cfg.grid; ++c) controls.push_back({c * step, r * step});
  }
  const Point2 center{0.5 * (image_size - 1.0), 0.5 * (image_size - 1.0)};
  const double sigma = cfg.displacement_sigma;

  for (int attempt = 0; attempt < 200; ++attempt) {
    geometry::SimilarityTransform jitter =
        rotation_about(center, rng.uniform(-cfg.max_rotation, cfg.max_rotation));
    const double scale = 1.0 + rng.uniform(-cfg.max_scale_jitter, cfg.max_scale_jitter);
    // Scale about the center as well.
    geometry::SimilarityTransform scaling;
    scaling.scale = scale;
    scaling.translation = center - scale * center;
    jitter = jitter.compose(scaling);

    std::vector<Point2> targets;
    for (const Point2 p : controls) {
      Point2 d;
      if (sigma > 0.0) {
        do {
          d = {sigma * rng.normal(), sigma * rng.normal()};
        } while (std::hypot(d.x, d.y) >= 4.0 * sigma);
      }
      targets.push_back(jitter.apply(p) + d);
    }
    ThinPlateSpline t = geometry::tps_fit(controls, targets, 0.0);

    // Reject folds: the Jacobian determinant must stay clearly positive.
    bool folded = false;
    const int probes = 17;
    for (int r = 0; r < probes && !folded; ++r) {
      for (int c = 0; c < probes && !folded; ++c) {
        const Point2 p{c * (image_size - 1.0) / (probes - 1),
                       r * (image_size - 1.0) / (probes - 1)};
        const auto j = t.jacobian(p);
        folded = j[0] * j[3] - j[1] * j[2] < 0.2;
      }
    }
    if (!folded) return t;
  }
  throw DegenerateConfigurationError(
      "sample_deformation: could not draw a fold-free deformation");
}

void AugConfig::validate() const {
  if (rotation_steps < 1 || contrast_variants < 1) {
    throw ArgumentError("augmentation counts must be >= 1");
  }
  if (!(max_rotation >= 0.0)) throw ArgumentError("max_rotation must be >= 0");
}

void PairTask::validate() const {
  const double tol = meta.gt_tolerance;
  for (const auto& m : gt_matches) {
    if (m.a < 0 || m.b < 0 || m.a >= static_cast<int>(keypoints_a.size()) ||
        m.b >= static_cast<int>(keypoints_b.size())) {
      throw FormatError("task: gt match index out of range");
    }
    const double r = geometry::distance(gt_transform.apply(keypoints_a[m.a]),
                                        keypoints_b[m.b]);
    if (!(r <= tol)) {
      throw FormatError("task: gt match (" + std::to_string(m.a) + ", " +
                        std::to_string(m.b) + ") residual " + std::to_string(r) +
                        " exceeds tolerance");
    }
  }
}

PairTask make_pretrain_task(const SceneConfig& scene_cfg,
                            const DeformConfig& deform_cfg, std::uint64_t seed,
                            const TaskOptions& options) {
  SceneConfig sc = scene_cfg;
  sc.seed = derive_seed(seed, 1);
  if (sc.n_neurons < 4) throw ArgumentError("tasks need n_neurons >= 4");
  const Scene scene = generate_scene_layout(sc);

  PairTask task;
  task.meta.kind = "pretrain";
  task.meta.modality_a = options.style_a.name;
  task.meta.modality_b = options.style_a.name;
  task.meta.seed = seed;
  task.meta.difficulty = deform_cfg.displacement_sigma / sc.image_size;
  task.meta.image_size = sc.image_size;
  task.meta.gt_tolerance = options.gt_tolerance;
  task.gt_transform =
      sample_deformation(deform_cfg, sc.image_size, derive_seed(seed, 2));
  task.keypoints_a = scene.keypoints;
  const Scene warped = warp_scene(scene, task.gt_transform);
  fill_correspondences(task, warped);

  if (options.render) {
    task.image_a =
        render_modality(render_scene(scene), options.style_a, derive_seed(seed, 3));
    task.image_b = render_modality(render_scene(warped), options.style_a,
                                   derive_seed(seed, 4));
    task.descriptors_a = describe(task.image_a, task.keypoints_a, options);
    task.descriptors_b = describe(task.image_b, task.keypoints_b, options);
  } else {
    task.descriptors_a.keypoints = task.keypoints_a;
    task.descriptors_b.keypoints = task.keypoints_b;
  }
  return task;
}

std::vector<PairTask> make_crossmodal_task(const SceneConfig& scene_cfg,
                                           const DeformConfig& deform_cfg,
                                           const AugConfig& aug,
                                           std::uint64_t seed,
                                           const TaskOptions& options) {
  aug.validate();
  SceneConfig sc = scene_cfg;
  sc.seed = derive_seed(seed, 1);
  if (sc.n_neurons < 4) throw ArgumentError("tasks need n_neurons >= 4");
  const Scene scene = generate_scene_layout(sc);
  const ThinPlateSpline deformation =
      sample_deformation(deform_cfg, sc.image_size, derive_seed(seed, 2));

  Image image_a;
  descriptors::DescriptorSet desc_a;
  if (options.render) {
    image_a = render_modality(render_scene(scene), options.style_a,
                              derive_seed(seed, 3));
    desc_a = describe(image_a, scene.keypoints, options);
  } else {
    desc_a.keypoints = scene.keypoints;
  }

  const Point2 center{0.5 * (sc.image_size - 1.0), 0.5 * (sc.image_size - 1.0)};
  std::vector<PairTask> tasks;
  for (int r = 0; r < aug.rotation_steps; ++r) {
    const double angle =
        aug.rotation_steps == 1
            ? 0.0
            : -aug.max_rotation + 2.0 * aug.max_rotation * r / (aug.rotation_steps - 1);
    const ThinPlateSpline t = deformation.then(rotation_about(center, angle));
    const Scene warped = warp_scene(scene, t);
    const Image clean_b = options.render ? render_scene(warped) : Image();
    for (int c = 0; c < aug.contrast_variants; ++c) {
      PairTask task;
      const auto style_b = options.style_b.variant(c, aug.contrast_variants);
      task.meta.kind = "crossmodal";
      task.meta.modality_a = options.style_a.name;
      task.meta.modality_b = style_b.name;
      task.meta.seed = seed;
      task.meta.difficulty = deform_cfg.displacement_sigma / sc.image_size;
      task.meta.rotation = angle;
      task.meta.contrast_variant = c;
      task.meta.image_size = sc.image_size;
      task.meta.gt_tolerance = options.gt_tolerance;
      task.gt_transform = t;
      task.keypoints_a = scene.keypoints;
      fill_correspondences(task, warped);
      if (options.render) {
        task.image_a = image_a;
        task.descriptors_a = desc_a;
        task.image_b = render_modality(
            clean_b, style_b,
            derive_seed(seed, 100 + static_cast<std::uint64_t>(r * aug.contrast_variants + c)));
        task.descriptors_b = describe(task.image_b, task.keypoints_b, options);
      } else {
        task.descriptors_a = desc_a;
        task.descriptors_b.keypoints = task.keypoints_b;
      }
      tasks.push_back(std::move(task));
    }
  }
  return tasks;
}

}  // namespace neurmatch::synth
