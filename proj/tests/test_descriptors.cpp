#include <cmath>
#include <cstring>
#include <vector>

#include <gtest/gtest.h>

#include "neurmatch/descriptors.hpp"
#include "neurmatch/error.hpp"
#include "neurmatch/random.hpp"
#include "neurmatch/synthdata.hpp"
#include "test_util.hpp"

using namespace neurmatch;
using namespace neurmatch::descriptors;

namespace {

// Independent little-endian NMDS writer used to pin the byte layout.
std::vector<std::uint8_t> oracle_nmds(const DescriptorSet& ds) {
  std::vector<std::uint8_t> out;
  auto put = [&](const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  };
  put("NMDS", 4);
  const std::uint16_t v = 1;
  put(&v, 2);
  const std::uint32_t hdr[4] = {static_cast<std::uint32_t>(ds.size()),
                                static_cast<std::uint32_t>(ds.local.cols()),
                                static_cast<std::uint32_t>(ds.semantic.cols()),
                                static_cast<std::uint32_t>(ds.fused.cols())};
  put(hdr, 16);
  for (auto p : ds.keypoints) {
    put(&p.x, 8);
    put(&p.y, 8);
  }
  for (const FloatMatrix* m : {&ds.local, &ds.semantic, &ds.fused}) {
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c) {
        const float f = (*m)(r, c);
        put(&f, 4);
      }
  }
  return out;
}

DescriptorSet random_set(Rng& rng, int n, int dl, int ds, int df) {
  DescriptorSet s;
  for (int i = 0; i < n; ++i) s.keypoints.push_back({rng.uniform(-5, 600), rng.normal(0, 100)});
  auto fill = [&](FloatMatrix& m, int d) {
    if (d == 0) return;  // absent matrices are 0 x 0
    m.resize(n, d);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) m(i, k) = static_cast<float>(rng.normal());
  };
  fill(s.local, dl);
  fill(s.semantic, ds);
  fill(s.fused, df);
  for (int i = 0; i < n && df > 0; ++i) s.fused.row(i) /= s.fused.row(i).norm();
  return s;
}

bool same_bits(const DescriptorSet& a, const DescriptorSet& b) {
  if (a.keypoints.size() != b.keypoints.size()) return false;
  for (std::size_t i = 0; i < a.keypoints.size(); ++i) {
    if (std::memcmp(&a.keypoints[i], &b.keypoints[i], sizeof(Point2)) != 0) return false;
  }
  for (auto [x, y] : {std::pair{&a.local, &b.local}, std::pair{&a.semantic, &b.semantic},
                      std::pair{&a.fused, &b.fused}}) {
    if (x->rows() != y->rows() || x->cols() != y->cols()) return false;
    if (x->size() > 0 && std::memcmp(x->data(), y->data(), x->size() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

Image blob_image(int size, Point2 c, double sigma) {
  Image img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      img.at(x, y) = std::exp(-0.5 * ((x - c.x) * (x - c.x) + (y - c.y) * (y - c.y)) / (sigma * sigma));
  return img;
}

}  // namespace

TEST(Bilinear, HandExample) {
  FeatureMap m(2, 2, 1, 1.0f);
  m.at(0, 0, 0) = 0;
  m.at(0, 1, 0) = 1;
  m.at(1, 0, 0) = 2;
  m.at(1, 1, 0) = 3;
  EXPECT_DOUBLE_EQ(bilinear_sample(m, {0.5, 0.5})(0), 1.5);
  // Along the top edge halfway: (0 + 1) / 2.
  EXPECT_DOUBLE_EQ(bilinear_sample(m, {0.5, 0.0})(0), 0.5);
}

TEST(Bilinear, ExactAtCellsAndConstantMaps) {
  Rng rng(1);
  FeatureMap m(5, 7, 3, 4.0f);
  for (auto& v : m.data) v = static_cast<float>(rng.normal());
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 7; ++c) {
      const auto s = bilinear_sample(m, {4.0 * c, 4.0 * r});
      for (int ch = 0; ch < 3; ++ch) EXPECT_EQ(s(ch), m.at(r, c, ch));
    }
  FeatureMap k(3, 3, 2, 2.0f);
  for (auto& v : k.data) v = 0.75f;
  for (int t = 0; t < 20; ++t) {
    const auto s = bilinear_sample(k, {rng.uniform(-1, 5), rng.uniform(-1, 5)});
    EXPECT_DOUBLE_EQ(s(0), 0.75);
    EXPECT_DOUBLE_EQ(s(1), 0.75);
  }
}

TEST(Bilinear, LipschitzBoundFromNeighbourDifferences) {
  Rng rng(2);
  FeatureMap m(6, 6, 1, 1.0f);
  for (auto& v : m.data) v = static_cast<float>(rng.normal());
  double lip = 0.0;
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 6; ++c) {
      if (c + 1 < 6) lip = std::max(lip, std::abs(double(m.at(r, c + 1, 0)) - m.at(r, c, 0)));
      if (r + 1 < 6) lip = std::max(lip, std::abs(double(m.at(r + 1, c, 0)) - m.at(r, c, 0)));
    }
  // Per-axis slope is bounded by lip, so the gradient norm by sqrt(2) lip.
  for (int t = 0; t < 500; ++t) {
    const Point2 p{rng.uniform(0, 5), rng.uniform(0, 5)};
    const Point2 d{rng.normal(0, 0.05), rng.normal(0, 0.05)};
    const Point2 q{std::clamp(p.x + d.x, 0.0, 5.0), std::clamp(p.y + d.y, 0.0, 5.0)};
    const double diff = std::abs(bilinear_sample(m, p)(0) - bilinear_sample(m, q)(0));
    EXPECT_LE(diff, std::sqrt(2.0) * lip * distance(p, q) + 1e-12);
  }
}

TEST(Bilinear, BorderClampAndOutOfBounds) {
  FeatureMap m(2, 2, 1, 8.0f);
  m.at(0, 0, 0) = 5;
  EXPECT_DOUBLE_EQ(bilinear_sample(m, {-3.9, -3.9})(0), 5.0);
  EXPECT_THROW(bilinear_sample(m, {-4.5, 0}), OutOfBoundsError);
  EXPECT_THROW(bilinear_sample(m, {0, 12.5}), OutOfBoundsError);
}

TEST(Patch, ConstantImageIsDegenerate) {
  const Image img(40, 40, 0.3);
  const std::vector<Point2> kps{{10, 10}, {0, 0}, {39, 20}};
  const auto ds = compute_patch_descriptor(img, kps);
  ASSERT_EQ(ds.local.cols(), 225);
  for (std::size_t k = 0; k < kps.size(); ++k) {
    EXPECT_TRUE(ds.degenerate[k]);
    EXPECT_EQ(ds.local.row(k).cwiseAbs().maxCoeff(), 0.0f);
  }
}

TEST(Patch, AffineIntensityInvariance) {
  const Image img = blob_image(64, {30.3, 28.7}, 4.0);
  Image img2 = img;
  for (auto& v : img2.pixels) v = 2.0 * v + 0.1;
  const std::vector<Point2> kps{{30, 29}, {22, 35}, {38.5, 20.25}};
  const auto a = compute_patch_descriptor(img, kps);
  const auto b = compute_patch_descriptor(img2, kps);
  EXPECT_LE((a.local - b.local).cwiseAbs().maxCoeff(), 1e-6f);
  for (int r = 0; r < 3; ++r) EXPECT_NEAR(a.local.row(r).norm(), 1.0f, 1e-6f);
  EXPECT_EQ(a.source, DescriptorSource::kBuiltinPatch);
  EXPECT_THROW(compute_patch_descriptor(img, kps, 14), ArgumentError);
}

TEST(Patch, DistinctBlobsAreDistinguishable) {
  synth::SceneConfig cfg;
  cfg.image_size = 256;
  cfg.n_neurons = 12;
  cfg.seed = 5;
  const auto s = synth::generate_scene(cfg);
  const auto ds = compute_patch_descriptor(s.image, s.scene.keypoints);
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = i + 1; j < ds.size(); ++j)
      EXPECT_LT(ds.local.row(i).dot(ds.local.row(j)), 0.99f);
}

TEST(Fuse, IdentityNetWithZeroSemantic) {
  DescriptorSet ds;
  ds.keypoints = {{1, 1}, {2, 2}};
  ds.local.resize(2, 3);
  ds.local << 3, 0, 4, 1, 1, 0;
  ds.semantic = FloatMatrix::Zero(2, 2);
  FusionNet f{nn::DenseNet({nn::DenseLayer{Eigen::MatrixXd::Identity(5, 5),
                                           Eigen::VectorXd::Zero(5), nn::Activation::kNone}}),
              3, 2};
  const auto out = fuse(ds, f);
  EXPECT_NEAR(out.fused(0, 0), 0.6f, 1e-7f);
  EXPECT_NEAR(out.fused(0, 2), 0.8f, 1e-7f);
  EXPECT_NEAR(out.fused(1, 0), float(1 / std::sqrt(2.0)), 1e-7f);
  EXPECT_EQ(out.fused(1, 3), 0.0f);
  EXPECT_EQ(out.local, ds.local);
  EXPECT_NO_THROW(out.validate());
}

TEST(Fuse, SeedSevenNetMatchesOracleAndIsUnitNorm) {
  Rng rng(7);
  auto ds = random_set(rng, 30, 20, 6, 0);
  const auto f = make_fusion_net(20, 6, 32, 8, 7);
  const auto out = fuse(ds, f);
  for (int i = 0; i < 30; ++i) {
    // Hand-rolled forward pass and normalization.
    std::vector<double> x;
    for (int k = 0; k < 20; ++k) x.push_back(ds.local(i, k));
    for (int k = 0; k < 6; ++k) x.push_back(ds.semantic(i, k));
    for (const auto& l : f.net.layers()) {
      std::vector<double> y(l.weight.rows());
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
        double s = l.bias(r);
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) s += l.weight(r, c) * x[c];
        y[r] = l.activation == nn::Activation::kRelu ? std::max(s, 0.0) : s;
      }
      x = y;
    }
    double n = 0;
    for (double v : x) n += v * v;
    n = std::sqrt(n);
    for (int k = 0; k < 8; ++k) EXPECT_NEAR(out.fused(i, k), x[k] / n, 1e-6);
    EXPECT_NEAR(out.fused.row(i).norm(), 1.0f, 1e-6f);
  }
}

TEST(Fuse, EmptyAndMissingSemantic) {
  DescriptorSet empty;
  empty.local.resize(0, 4);
  empty.semantic.resize(0, 2);
  const auto out = fuse(empty, make_fusion_net(4, 2, 8, 3));
  EXPECT_EQ(out.fused.rows(), 0);
  DescriptorSet local_only;
  local_only.keypoints = {{0, 0}};
  local_only.local = FloatMatrix::Ones(1, 4);
  EXPECT_THROW(fuse(local_only, make_fusion_net(4, 2, 8, 3)), PreconditionError);
}

TEST(Nmds, ByteLayoutMatchesIndependentWriter) {
  Rng rng(3);
  const auto ds = random_set(rng, 4, 5, 3, 2);
  EXPECT_EQ(encode_descriptors(ds), oracle_nmds(ds));
  auto partial = ds;
  partial.semantic.resize(0, 0);
  EXPECT_EQ(encode_descriptors(partial), oracle_nmds(partial));
}

TEST(Nmds, ThousandRandomRoundTrips) {
  Rng rng(4);
  for (int t = 0; t < 1000; ++t) {
    const int n = static_cast<int>(rng.index(12));
    const int dl = 1 + static_cast<int>(rng.index(10));
    const int dsem = static_cast<int>(rng.index(4));
    const int df = rng.index(2) ? 1 + static_cast<int>(rng.index(5)) : 0;
    const auto ds = random_set(rng, n, dl, dsem, df);
    const auto back = decode_descriptors(encode_descriptors(ds));
    ASSERT_TRUE(same_bits(ds, back)) << "case " << t;
  }
}

TEST(Nmds, FileRoundTrip) {
  neurmatch::testing::TempDir dir;
  Rng rng(5);
  const auto ds = random_set(rng, 9, 7, 2, 3);
  write_descriptors(ds, dir / "a.nmds");
  EXPECT_TRUE(same_bits(read_descriptors(dir / "a.nmds"), ds));
  EXPECT_THROW(read_descriptors(dir / "missing.nmds"), Error);
}

TEST(Nmds, MalformedFiles) {
  Rng rng(6);
  const auto ds = random_set(rng, 5, 4, 0, 0);
  auto bytes = encode_descriptors(ds);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_descriptors(bad_magic), FormatError);

  auto bad_version = bytes;
  bad_version[4] = 2;
  try {
    decode_descriptors(bad_version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4);
  }

  // Header still says N=5, but only 4 rows of descriptors follow.
  auto truncated = bytes;
  truncated.resize(bytes.size() - 4 * 4);
  try {
    decode_descriptors(truncated);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
    EXPECT_GE(e.offset(), 0);
  }

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_descriptors(trailing), FormatError);

  auto not_unit = random_set(rng, 2, 3, 0, 2);
  not_unit.fused(0, 0) = 3.0f;
  EXPECT_THROW(encode_descriptors(not_unit), FormatError);
}

TEST(Nmfm, RoundTripAndErrors) {
  Rng rng(7);
  FeatureMap m(3, 4, 5, 8.0f);
  for (auto& v : m.data) v = static_cast<float>(rng.normal());
  const auto bytes = encode_feature_map(m);
  EXPECT_EQ(bytes.size(), 4u + 2 + 12 + 4 + 3 * 4 * 5 * 4);
  EXPECT_EQ(std::memcmp(bytes.data(), "NMFM", 4), 0);
  const auto back = decode_feature_map(bytes);
  EXPECT_EQ(back.height, 3);
  EXPECT_EQ(back.width, 4);
  EXPECT_EQ(back.channels, 5);
  EXPECT_EQ(back.stride, 8.0f);
  EXPECT_EQ(back.data, m.data);

  auto cut = bytes;
  cut.pop_back();
  EXPECT_THROW(decode_feature_map(cut), FormatError);
  FeatureMap bad(2, 2, 1, 0.5f);
  EXPECT_THROW(encode_feature_map(bad), FormatError);
}

TEST(Png, SixteenBitRoundTrip) {
  neurmatch::testing::TempDir dir;
  Image img(13, 7);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 13; ++x) img.at(x, y) = std::round((x * 7 + y) * 65535.0 / 100.0) / 65535.0;
  write_png16(img, dir / "i.png");
  const Image back = read_png16(dir / "i.png");
  ASSERT_EQ(back.width, 13);
  ASSERT_EQ(back.height, 7);
  for (std::size_t k = 0; k < img.pixels.size(); ++k) EXPECT_NEAR(back.pixels[k], img.pixels[k], 1e-12);
}

TEST(ContextMap, ShapeAndAttach) {
  const Image img = blob_image(96, {40, 50}, 5);
  const auto map = compute_context_map(img);
  ContextMapConfig cfg;
  EXPECT_EQ(map.channels, cfg.channels());
  EXPECT_EQ(map.stride, 8.0f);
  EXPECT_NO_THROW(map.validate());
  auto ds = compute_patch_descriptor(img, std::vector<Point2>{{40, 50}, {95, 95}});
  attach_semantic(ds, map);
  EXPECT_EQ(ds.semantic.rows(), 2);
  EXPECT_EQ(ds.semantic.cols(), map.channels);
}
