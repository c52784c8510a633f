#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "neurmatch/descriptors.hpp"
#include "neurmatch/error.hpp"

namespace neurmatch::descriptors {
namespace {

constexpr char kDescriptorMagic[4] = {'N', 'M', 'D', 'S'};
constexpr char kFeatureMapMagic[4] = {'N', 'M', 'F', 'M'};

class ByteWriter {
 public:
  void raw(const char* data, std::size_t n) {
    bytes_.insert(bytes_.end(), data, data + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t k = 0; k < sizeof(U); ++k) {
      bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
    }
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, const char* what)
      : bytes_(bytes), what_(what) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_magic(const char (&magic)[4]) {
    need(4, "magic");
    if (std::memcmp(bytes_.data(), magic, 4) != 0) {
      throw FormatError(std::string(what_) + ": bad magic, expected \"" +
                            std::string(magic, 4) + "\"",
                        0);
    }
    pos_ += 4;
  }
  template <typename U>
  U uint(const char* field) {
    need(sizeof(U), field);
    U v = 0;
    for (std::size_t k = 0; k < sizeof(U); ++k) {
      v |= static_cast<U>(bytes_[pos_ + k]) << (8 * k);
    }
    pos_ += sizeof(U);
    return v;
  }
  float f32(const char* field) {
    return std::bit_cast<float>(uint<std::uint32_t>(field));
  }
  double f64(const char* field) {
    return std::bit_cast<double>(uint<std::uint64_t>(field));
  }
  void need(std::size_t n, const char* field) const {
    if (remaining() < n) {
      throw FormatError(std::string(what_) + ": truncated while reading " +
                            field + " (need " + std::to_string(n) +
                            " bytes, have " + std::to_string(remaining()) + ")",
                        static_cast<std::int64_t>(pos_));
    }
  }
  void expect_end() const {
    if (remaining() != 0) {
      throw FormatError(std::string(what_) + ": " + std::to_string(remaining()) +
                            " unexpected trailing bytes",
                        static_cast<std::int64_t>(pos_));
    }
  }

 private:
  std::span<const std::uint8_t> bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

void write_matrix(ByteWriter& w, const FloatMatrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) w.f32(m(r, c));
  }
}

FloatMatrix read_matrix(ByteReader& in, std::uint32_t rows, std::uint32_t cols,
                        const char* name) {
  FloatMatrix m;
  if (cols == 0) return m;
  in.need(static_cast<std::size_t>(rows) * cols * 4, name);
  m.resize(rows, cols);
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = in.f32(name);
  }
  return m;
}

}  // namespace

std::vector<std::uint8_t> encode_descriptors(const DescriptorSet& ds) {
  ds.validate();
  ByteWriter w;
  w.raw(kDescriptorMagic, 4);
  w.uint<std::uint16_t>(kDescriptorFormatVersion);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(ds.size()));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(ds.local.cols()));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(ds.semantic.cols()));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(ds.fused.cols()));
  for (const auto& p : ds.keypoints) {
    w.f64(p.x);
    w.f64(p.y);
  }
  write_matrix(w, ds.local);
  write_matrix(w, ds.semantic);
  write_matrix(w, ds.fused);
  return w.take();
}

DescriptorSet decode_descriptors(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes, "descriptor file");
  in.expect_magic(kDescriptorMagic);
  const auto version_at = in.offset();
  const auto version = in.uint<std::uint16_t>("version");
  if (version != kDescriptorFormatVersion) {
    throw FormatError("descriptor file: unsupported version " +
                          std::to_string(version),
                      static_cast<std::int64_t>(version_at));
  }
  const auto n = in.uint<std::uint32_t>("N");
  const auto d_local = in.uint<std::uint32_t>("D_local");
  const auto d_sem = in.uint<std::uint32_t>("D_sem");
  const auto d_fused = in.uint<std::uint32_t>("D_fused");
  const std::uint64_t payload =
      static_cast<std::uint64_t>(n) * 16 +
      static_cast<std::uint64_t>(n) * (static_cast<std::uint64_t>(d_local) +
                                       d_sem + d_fused) * 4;
  if (payload > in.remaining()) {
    throw FormatError("descriptor file: header declares N=" + std::to_string(n) +
                          " rows but the payload is truncated (need " +
                          std::to_string(payload) + " bytes, have " +
                          std::to_string(in.remaining()) + ")",
                      static_cast<std::int64_t>(in.offset()));
  }
  DescriptorSet ds;
  ds.source = DescriptorSource::kExternal;
  ds.keypoints.resize(n);
  for (auto& p : ds.keypoints) {
    p.x = in.f64("keypoints");
    p.y = in.f64("keypoints");
  }
  ds.local = read_matrix(in, n, d_local, "local descriptors");
  ds.semantic = read_matrix(in, n, d_sem, "semantic descriptors");
  ds.fused = read_matrix(in, n, d_fused, "fused descriptors");
  in.expect_end();
  ds.validate();
  return ds;
}

std::vector<std::uint8_t> encode_feature_map(const FeatureMap& map) {
  map.validate();
  ByteWriter w;
  w.raw(kFeatureMapMagic, 4);
  w.uint<std::uint16_t>(kFeatureMapFormatVersion);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(map.height));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(map.width));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(map.channels));
  w.f32(map.stride);
  for (float v : map.data) w.f32(v);
  return w.take();
}

FeatureMap decode_feature_map(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes, "feature map file");
  in.expect_magic(kFeatureMapMagic);
  const auto version_at = in.offset();
  const auto version = in.uint<std::uint16_t>("version");
  if (version != kFeatureMapFormatVersion) {
    throw FormatError("feature map file: unsupported version " +
                          std::to_string(version),
                      static_cast<std::int64_t>(version_at));
  }
  FeatureMap map;
  map.height = static_cast<int>(in.uint<std::uint32_t>("H"));
  map.width = static_cast<int>(in.uint<std::uint32_t>("W"));
  map.channels = static_cast<int>(in.uint<std::uint32_t>("C"));
  map.stride = in.f32("stride");
  const std::uint64_t count = static_cast<std::uint64_t>(map.height) *
                              map.width * map.channels;
  in.need(count * 4, "feature data");
  map.data.resize(count);
  for (auto& v : map.data) v = in.f32("feature data");
  in.expect_end();
  map.validate();
  return map;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path,
                      std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing " + path.string());
}

void write_descriptors(const DescriptorSet& ds, const std::filesystem::path& path) {
  write_file_bytes(path, encode_descriptors(ds));
}

DescriptorSet read_descriptors(const std::filesystem::path& path) {
  return decode_descriptors(read_file_bytes(path));
}

void write_feature_map(const FeatureMap& map, const std::filesystem::path& path) {
  write_file_bytes(path, encode_feature_map(map));
}

FeatureMap read_feature_map(const std::filesystem::path& path) {
  return decode_feature_map(read_file_bytes(path));
}

}  // namespace neurmatch::descriptors
