#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mgan/rng.hpp"
#include "mgan/serialize.hpp"
#include "mgan/tensor.hpp"

namespace mgan {

/// Images [N,C,H,W] in [-1,1] with integer labels below `num_classes`.
struct LabeledDataset {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  int side() const { return images.empty() ? 0 : int(images.dim(2)); }

  LabeledDataset subset(const std::vector<std::size_t>& idx) const {
    LabeledDataset out;
    out.num_classes = num_classes;
    const std::size_t row = images.size() / std::max<std::size_t>(size(), 1);
    Shape s = images.shape();
    s[0] = idx.size();
    std::vector<float> data;
    data.reserve(idx.size() * row);
    for (auto i : idx) {
      data.insert(data.end(), images.storage().begin() + i * row,
                  images.storage().begin() + (i + 1) * row);
      out.labels.push_back(labels.at(i));
    }
    out.images = Tensor(s, std::move(data));
    return out;
  }
};

/// One client's private shard.
struct ClientDataset {
  int client_id = 0;
  Tensor samples;
  std::vector<int> labels;
  bool is_victim = false;

  std::size_t size() const { return labels.size(); }
};

// ---------------------------------------------------------------------------
// Pixel scaling

inline float byte_to_unit(std::uint8_t b) { return float(b) / 127.5f - 1.0f; }

inline std::uint8_t unit_to_byte(float v) {
  const float scaled = std::round((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f);
  return std::uint8_t(std::clamp(scaled, 0.0f, 255.0f));
}

// ---------------------------------------------------------------------------
// IDX

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

struct IdxImages {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols
  std::size_t count() const { return rows && cols ? pixels.size() / (std::size_t(rows) * cols) : 0; }
};

inline IdxImages parse_idx_images(const std::vector<std::uint8_t>& bytes,
                                  const std::string& what = "idx images") {
  detail::ByteReader r(bytes, what);
  const auto magic = r.be(4, "magic");
  if (magic != kIdxImageMagic) {
    std::ostringstream msg;
    msg << what << ": bad magic 0x" << std::hex << magic << " (expected 0x803)";
    throw FormatError(msg.str());
  }
  const auto count = std::size_t(r.be(4, "count"));
  IdxImages out;
  out.rows = std::uint32_t(r.be(4, "rows"));
  out.cols = std::uint32_t(r.be(4, "cols"));
  const std::size_t n = count * out.rows * out.cols;
  const auto* p = r.take(n, "pixels");
  out.pixels.assign(p, p + n);
  if (!r.done()) throw FormatError(what + ": trailing bytes after pixels");
  return out;
}

inline std::vector<std::uint8_t> parse_idx_labels(const std::vector<std::uint8_t>& bytes,
                                                  const std::string& what = "idx labels") {
  detail::ByteReader r(bytes, what);
  const auto magic = r.be(4, "magic");
  if (magic != kIdxLabelMagic) {
    std::ostringstream msg;
    msg << what << ": bad magic 0x" << std::hex << magic << " (expected 0x801)";
    throw FormatError(msg.str());
  }
  const auto count = std::size_t(r.be(4, "count"));
  const auto* p = r.take(count, "labels");
  std::vector<std::uint8_t> out(p, p + count);
  if (!r.done()) throw FormatError(what + ": trailing bytes after labels");
  return out;
}

namespace detail {
inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(std::uint8_t((v >> (8 * i)) & 0xFF));
}
}  // namespace detail

inline std::vector<std::uint8_t> encode_idx_images(const IdxImages& img) {
  std::vector<std::uint8_t> out;
  detail::put_be32(out, kIdxImageMagic);
  detail::put_be32(out, std::uint32_t(img.count()));
  detail::put_be32(out, img.rows);
  detail::put_be32(out, img.cols);
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline std::vector<std::uint8_t> encode_idx_labels(const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> out;
  detail::put_be32(out, kIdxLabelMagic);
  detail::put_be32(out, std::uint32_t(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

/// Quantizes a dataset back into IDX containers.
inline std::pair<IdxImages, std::vector<std::uint8_t>> to_idx(const LabeledDataset& d) {
  IdxImages img;
  img.rows = std::uint32_t(d.images.dim(2));
  img.cols = std::uint32_t(d.images.dim(3));
  img.pixels.reserve(d.images.size());
  for (float v : d.images.storage()) img.pixels.push_back(unit_to_byte(v));
  std::vector<std::uint8_t> labels(d.labels.begin(), d.labels.end());
  return {std::move(img), std::move(labels)};
}

inline LabeledDataset from_idx(const IdxImages& img, const std::vector<std::uint8_t>& labels,
                               int num_classes = 0) {
  if (img.count() != labels.size()) {
    throw FormatError("idx count mismatch: " + std::to_string(img.count()) + " images vs " +
                      std::to_string(labels.size()) + " labels");
  }
  LabeledDataset d;
  std::vector<float> px(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), px.begin(), byte_to_unit);
  d.images = Tensor({img.count(), 1, img.rows, img.cols}, std::move(px));
  int max_label = -1;
  for (auto l : labels) {
    d.labels.push_back(int(l));
    max_label = std::max(max_label, int(l));
  }
  d.num_classes = num_classes > 0 ? num_classes : max_label + 1;
  for (int l : d.labels) {
    if (l >= d.num_classes) throw FormatError("label " + std::to_string(l) + " >= class count");
  }
  return d;
}

inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path,
                               int num_classes = 0) {
  const auto img = parse_idx_images(read_file_bytes(images_path), images_path);
  const auto lab = parse_idx_labels(read_file_bytes(labels_path), labels_path);
  return from_idx(img, lab, num_classes);
}

// ---------------------------------------------------------------------------
// Synthetic data

enum class SynthKind { bars, blobs };

namespace detail {

// Segment endpoints on a unit glyph box (x right, y down): a top, b upper
// right, c lower right, d bottom, e lower left, f upper left, g middle.
inline constexpr std::array<std::array<float, 4>, 7> kSegments = {{
    {0.0f, 0.0f, 1.0f, 0.0f},
    {1.0f, 0.0f, 1.0f, 0.5f},
    {1.0f, 0.5f, 1.0f, 1.0f},
    {0.0f, 1.0f, 1.0f, 1.0f},
    {0.0f, 0.5f, 0.0f, 1.0f},
    {0.0f, 0.0f, 0.0f, 0.5f},
    {0.0f, 0.5f, 1.0f, 0.5f},
}};

// bit i set -> segment i drawn. Digits 0-9 then A b C d E F.
inline constexpr std::array<std::uint8_t, 16> kGlyphMasks = {
    0x3F, 0x06, 0x5B, 0x4F, 0x66, 0x6D, 0x7D, 0x07,
    0x7F, 0x6F, 0x77, 0x7C, 0x39, 0x5E, 0x79, 0x71,
};

inline float segment_distance(float px, float py, float x0, float y0, float x1, float y1) {
  const float dx = x1 - x0, dy = y1 - y0;
  const float len2 = dx * dx + dy * dy;
  float t = len2 > 0 ? ((px - x0) * dx + (py - y0) * dy) / len2 : 0.0f;
  t = std::clamp(t, 0.0f, 1.0f);
  const float ex = x0 + t * dx - px, ey = y0 + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

inline void draw_glyph(float* img, int side, std::uint8_t mask, Rng& rng) {
  const float s = float(side);
  const float w = s * uniform(rng, 0.36f, 0.44f);
  const float h = s * uniform(rng, 0.58f, 0.66f);
  const float cx = s / 2 + uniform(rng, -0.06f, 0.06f) * s;
  const float cy = s / 2 + uniform(rng, -0.06f, 0.06f) * s;
  const float half_width = s * uniform(rng, 0.05f, 0.07f);
  const float x0 = cx - w / 2, y0 = cy - h / 2;
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const float px = x + 0.5f, py = y + 0.5f;
      float d = 1e9f;
      for (int k = 0; k < 7; ++k) {
        if (!((mask >> k) & 1)) continue;
        const auto& sg = kSegments[k];
        d = std::min(d, segment_distance(px, py, x0 + sg[0] * w, y0 + sg[1] * h,
                                         x0 + sg[2] * w, y0 + sg[3] * h));
      }
      const float ink = std::clamp(half_width + 0.5f - d, 0.0f, 1.0f);
      img[y * side + x] = -1.0f + 2.0f * ink;
    }
  }
}

inline void draw_blob(float* img, int side, int cls, int classes, Rng& rng) {
  const double pi = 3.14159265358979323846;
  const double angle = 2 * pi * cls / classes;
  const double r = side * 0.28;
  const double cx = side / 2.0 + r * std::cos(angle) + uniform(rng, -0.5f, 0.5f);
  const double cy = side / 2.0 + r * std::sin(angle) + uniform(rng, -0.5f, 0.5f);
  const double sigma = side / 8.0;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      img[y * side + x] = float(-1.0 + 2.0 * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)));
    }
}

}  // namespace detail

inline constexpr int kMaxBarClasses = 16;

/// Class-separable synthetic images, deterministic in `seed`.
///
/// `bars`: each class is a fixed arrangement of axis-aligned strokes (a
/// segment-display glyph) with random placement, size and stroke jitter, so
/// class identity is independent of orientation. `blobs`: a Gaussian blob at a
/// class-specific position. Both get additive pixel noise (sigma 0.1) and are
/// clamped to [-1,1].
inline LabeledDataset synth_dataset(SynthKind kind, int classes, int per_class, int side,
                                    std::uint64_t seed, float noise = 0.1f) {
  if (classes < 2) throw std::invalid_argument("synthetic dataset needs at least 2 classes");
  if (per_class <= 0) throw std::invalid_argument("synthetic dataset would be empty");
  if (side < 4) throw std::invalid_argument("synthetic image side must be >= 4");
  if (kind == SynthKind::bars && classes > kMaxBarClasses) {
    throw std::invalid_argument("bars dataset supports at most 16 classes");
  }
  LabeledDataset d;
  d.num_classes = classes;
  const std::size_t n = std::size_t(classes) * per_class;
  const std::size_t px = std::size_t(side) * side;
  d.images = Tensor({n, 1, std::size_t(side), std::size_t(side)});
  Rng rng = make_rng(seed, "synth");
  std::size_t i = 0;
  for (int k = 0; k < per_class; ++k) {
    for (int c = 0; c < classes; ++c, ++i) {
      float* img = d.images.data().data() + i * px;
      if (kind == SynthKind::bars) {
        detail::draw_glyph(img, side, detail::kGlyphMasks[c], rng);
      } else {
        detail::draw_blob(img, side, c, classes, rng);
      }
      for (std::size_t p = 0; p < px; ++p)
        img[p] = std::clamp(img[p] + gaussian(rng, 0.0f, noise), -1.0f, 1.0f);
      d.labels.push_back(c);
    }
  }
  return d;
}

inline SynthKind parse_synth_kind(const std::string& s) {
  if (s == "bars") return SynthKind::bars;
  if (s == "blobs") return SynthKind::blobs;
  throw std::invalid_argument("unknown synthetic kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// Victim property

struct VictimProperty {
  enum class Kind { rotation };
  Kind kind = Kind::rotation;
  double angle_degrees = 30.0;
};

/// Rotates each [C,H,W] image about its center by `degrees` (counter-clockwise
/// as displayed) with bilinear resampling; pixels sourced from outside the
/// frame read as `fill`. Multiples of 90 degrees are exact permutations.
inline Tensor rotate_images(const Tensor& images, double degrees, float fill = -1.0f) {
  if (images.rank() != 4) throw ShapeError("rotate expects [N,C,H,W]");
  const double pi = 3.14159265358979323846;
  const double turns = degrees / 90.0;
  double c, s;
  if (std::abs(turns - std::round(turns)) < 1e-12) {
    const int q = ((int(std::lround(turns)) % 4) + 4) % 4;
    static constexpr int kCos[4] = {1, 0, -1, 0};
    static constexpr int kSin[4] = {0, 1, 0, -1};
    c = kCos[q];
    s = kSin[q];
  } else {
    c = std::cos(degrees * pi / 180.0);
    s = std::sin(degrees * pi / 180.0);
  }
  const int h = int(images.dim(2)), w = int(images.dim(3));
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  const std::size_t planes = images.dim(0) * images.dim(1);
  Tensor out(images.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = images.data().data() + p * h * w;
    float* dst = out.data().data() + p * h * w;
    auto at = [&](int y, int x) {
      return (y < 0 || y >= h || x < 0 || x >= w) ? fill : src[y * w + x];
    };
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        // inverse map: rotate the destination offset by -angle; y points down
        const double dx = x - cx, dy = y - cy;
        const double sx = c * dx - s * dy + cx;
        const double sy = s * dx + c * dy + cy;
        const double fx = std::floor(sx), fy = std::floor(sy);
        const double ax = sx - fx, ay = sy - fy;
        const int ix = int(fx), iy = int(fy);
        const double v = (1 - ay) * ((1 - ax) * at(iy, ix) + ax * at(iy, ix + 1)) +
                         ay * ((1 - ax) * at(iy + 1, ix) + ax * at(iy + 1, ix + 1));
        dst[y * w + x] = float(v);
      }
    }
  }
  return out;
}

inline ClientDataset apply_victim_property(const ClientDataset& data, const VictimProperty& prop) {
  if (prop.kind != VictimProperty::Kind::rotation) {
    throw std::invalid_argument("unsupported victim property");
  }
  if (!(prop.angle_degrees > -180.0 && prop.angle_degrees <= 180.0)) {
    throw std::invalid_argument("rotation angle must be in (-180, 180]");
  }
  ClientDataset out = data;
  if (prop.angle_degrees != 0.0) out.samples = rotate_images(data.samples, prop.angle_degrees);
  return out;
}

// ---------------------------------------------------------------------------
// PGM

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

inline constexpr int kGridSeparator = 2;

/// Tiles [N,1,H,W] images into a grid with white separators between tiles.
inline GrayImage image_grid(const Tensor& images, std::size_t columns) {
  if (images.rank() != 4 || images.dim(1) != 1) throw ShapeError("grid expects [N,1,H,W]");
  if (columns == 0) throw std::invalid_argument("columns must be positive");
  const std::size_t n = images.dim(0), h = images.dim(2), w = images.dim(3);
  const std::size_t cols = std::min(columns, std::max<std::size_t>(n, 1));
  const std::size_t rows = (n + cols - 1) / cols;
  GrayImage g;
  g.width = cols * w + (cols - 1) * kGridSeparator;
  g.height = rows == 0 ? 0 : rows * h + (rows - 1) * kGridSeparator;
  g.pixels.assign(g.width * g.height, 255);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t oy = (i / cols) * (h + kGridSeparator);
    const std::size_t ox = (i % cols) * (w + kGridSeparator);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        g.pixels[(oy + y) * g.width + ox + x] = unit_to_byte(images[(i * h + y) * w + x]);
  }
  return g;
}

inline std::vector<std::uint8_t> encode_pgm(const GrayImage& g) {
  const std::string header =
      "P5\n" + std::to_string(g.width) + " " + std::to_string(g.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), g.pixels.begin(), g.pixels.end());
  return out;
}

inline GrayImage decode_pgm(const std::vector<std::uint8_t>& bytes,
                            const std::string& what = "pgm") {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&] {
    skip_space();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t += char(bytes[pos++]);
    if (t.empty()) throw FormatError(what + ": truncated header");
    return t;
  };
  if (token() != "P5") throw FormatError(what + ": not a binary PGM (P5)");
  GrayImage g;
  g.width = std::stoul(token());
  g.height = std::stoul(token());
  const auto maxval = std::stoul(token());
  if (maxval != 255) throw FormatError(what + ": only 8-bit PGM is supported");
  ++pos;  // single whitespace before raster
  if (pos + g.width * g.height > bytes.size()) throw FormatError(what + ": truncated raster");
  g.pixels.assign(bytes.begin() + std::ptrdiff_t(pos),
                  bytes.begin() + std::ptrdiff_t(pos + g.width * g.height));
  return g;
}

inline void save_image_grid(const Tensor& images, std::size_t columns, const std::string& path) {
  write_file_bytes(path, encode_pgm(image_grid(images, columns)));
}

inline GrayImage load_pgm(const std::string& path) { return decode_pgm(read_file_bytes(path), path); }

/// Bilinear resize of one grayscale raster into a side x side [-1,1] image.
inline std::vector<float> resize_gray(const GrayImage& g, int side) {
  std::vector<float> out(std::size_t(side) * side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double sy = (y + 0.5) * double(g.height) / side - 0.5;
      const double sx = (x + 0.5) * double(g.width) / side - 0.5;
      const auto y0 = std::clamp(std::floor(sy), 0.0, double(g.height - 1));
      const auto x0 = std::clamp(std::floor(sx), 0.0, double(g.width - 1));
      const auto y1 = std::min(y0 + 1, double(g.height - 1));
      const auto x1 = std::min(x0 + 1, double(g.width - 1));
      const double ay = std::clamp(sy - y0, 0.0, 1.0), ax = std::clamp(sx - x0, 0.0, 1.0);
      auto px = [&](double yy, double xx) {
        return byte_to_unit(g.pixels[std::size_t(yy) * g.width + std::size_t(xx)]);
      };
      out[std::size_t(y) * side + x] =
          float((1 - ay) * ((1 - ax) * px(y0, x0) + ax * px(y0, x1)) +
                ay * ((1 - ax) * px(y1, x0) + ax * px(y1, x1)));
    }
  }
  return out;
}

/// One sub-directory per class (sorted by name), each holding P5 .pgm files.
inline LabeledDataset load_image_dir(const std::string& root, int side) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error("not a directory: '" + root + "'");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.size() < 2) throw FormatError("image directory needs >= 2 class folders");
  std::vector<float> data;
  LabeledDataset d;
  d.num_classes = int(class_dirs.size());
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[c]))
      if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const auto img = resize_gray(load_pgm(f.string()), side);
      data.insert(data.end(), img.begin(), img.end());
      d.labels.push_back(int(c));
    }
  }
  if (d.labels.empty()) throw FormatError("image directory '" + root + "' has no .pgm files");
  d.images = Tensor({d.labels.size(), 1, std::size_t(side), std::size_t(side)}, std::move(data));
  return d;
}

// ---------------------------------------------------------------------------
// CSV

/// Append-only CSV with a fixed header; every row is flushed.
class CsvWriter {
 public:
  CsvWriter() = default;
  CsvWriter(const std::string& path, const std::string& header) : path_(path) {
    out_.open(path, std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot write '" + path + "'");
    out_ << header << '\n';
    out_.flush();
  }

  bool is_open() const { return out_.is_open(); }

  void row(const std::string& line) {
    if (!out_) throw std::runtime_error("write failed for '" + path_ + "'");
    out_ << line << '\n';
    out_.flush();
  }

 private:
  std::string path_;
  std::ofstream out_;
};

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

struct MetricRow {
  int round = 0;
  std::string metric;
  double value = 0.0;
};

/// `round,metric,value` rows; a (round, metric) pair may appear only once.
class MetricsCsv {
 public:
  explicit MetricsCsv(const std::string& path) : csv_(path, "round,metric,value") {}

  void append(const MetricRow& r) {
    if (r.metric.find(',') != std::string::npos) throw std::invalid_argument("metric name has comma");
    if (!seen_.insert({r.round, r.metric}).second) {
      throw std::invalid_argument("duplicate metric '" + r.metric + "' for round " +
                                  std::to_string(r.round));
    }
    csv_.row(std::to_string(r.round) + "," + r.metric + "," + format_real(r.value));
  }

 private:
  CsvWriter csv_;
  std::set<std::pair<int, std::string>> seen_;
};

inline std::vector<MetricRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "round,metric,value") {
    throw FormatError(path + ": missing round,metric,value header");
  }
  std::vector<MetricRow> rows;
  std::set<std::pair<int, std::string>> seen;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.rfind(',');
    if (a == std::string::npos || a == b) throw FormatError(path + ": malformed row '" + line + "'");
    MetricRow r{std::stoi(line.substr(0, a)), line.substr(a + 1, b - a - 1),
                std::stod(line.substr(b + 1))};
    if (!seen.insert({r.round, r.metric}).second) {
      throw FormatError(path + ": duplicate row for round " + std::to_string(r.round));
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Values of one metric in round order.
inline std::vector<double> metric_series(const std::vector<MetricRow>& rows, const std::string& m) {
  std::vector<std::pair<int, double>> v;
  for (const auto& r : rows)
    if (r.metric == m) v.emplace_back(r.round, r.value);
  std::sort(v.begin(), v.end());
  std::vector<double> out;
  for (const auto& [k, x] : v) out.push_back(x);
  return out;
}

}  // namespace mgan
