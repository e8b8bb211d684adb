#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mgan/data.hpp"
#include "mgan/serialize.hpp"
#include "test_util.hpp"

namespace mgan {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mgan_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

IdxImages fixture_images() {
  IdxImages img;
  img.rows = 3;
  img.cols = 4;
  for (int i = 0; i < 2 * 12; ++i) img.pixels.push_back(std::uint8_t((i * 37) % 256));
  return img;
}

TEST(PixelScale, Endpoints) {
  EXPECT_EQ(byte_to_unit(0), -1.0f);
  EXPECT_EQ(byte_to_unit(255), 1.0f);
  EXPECT_EQ(unit_to_byte(-1.0f), 0);
  EXPECT_EQ(unit_to_byte(1.0f), 255);
}

TEST(PixelScale, BijectionOnAllBytes) {
  std::set<float> seen;
  for (int b = 0; b < 256; ++b) {
    const float v = byte_to_unit(std::uint8_t(b));
    EXPECT_EQ(unit_to_byte(v), b);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 256u);
}

TEST(Idx, RoundTripByteIdentical) {
  const auto img_bytes = encode_idx_images(fixture_images());
  const auto lab_bytes = encode_idx_labels({3, 7});
  EXPECT_EQ(encode_idx_images(parse_idx_images(img_bytes)), img_bytes);
  EXPECT_EQ(encode_idx_labels(parse_idx_labels(lab_bytes)), lab_bytes);
  // big-endian magic on disk
  EXPECT_EQ(img_bytes[2], 0x08);
  EXPECT_EQ(img_bytes[3], 0x03);
  EXPECT_EQ(lab_bytes[3], 0x01);
}

TEST(Idx, LoadFromFiles) {
  const auto dir = temp_dir("idx");
  write_file_bytes((dir / "img").string(), encode_idx_images(fixture_images()));
  write_file_bytes((dir / "lab").string(), encode_idx_labels({3, 7}));
  const auto d = load_idx((dir / "img").string(), (dir / "lab").string());
  EXPECT_EQ(d.images.shape(), (Shape{2, 1, 3, 4}));
  EXPECT_EQ(d.labels, (std::vector<int>{3, 7}));
  EXPECT_EQ(d.num_classes, 8);
  EXPECT_EQ(d.images[0], -1.0f);
  const auto [img, lab] = to_idx(d);
  EXPECT_EQ(encode_idx_images(img), encode_idx_images(fixture_images()));
}

TEST(Idx, BadMagicNamesField) {
  auto bytes = encode_idx_images(fixture_images());
  bytes[3] = 0x01;
  try {
    parse_idx_images(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
  EXPECT_THROW(parse_idx_labels(encode_idx_images(fixture_images())), FormatError);
}

TEST(Idx, TruncatedAndMismatched) {
  auto bytes = encode_idx_images(fixture_images());
  bytes.pop_back();
  try {
    parse_idx_images(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("pixels"), std::string::npos);
  }
  EXPECT_THROW(from_idx(fixture_images(), {1, 2, 3}), FormatError);
}

TEST(Synth, DeterministicAndShaped) {
  const auto a = synth_dataset(SynthKind::bars, 4, 5, 16, 11);
  const auto b = synth_dataset(SynthKind::bars, 4, 5, 16, 11);
  const auto c = synth_dataset(SynthKind::bars, 4, 5, 16, 12);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(a.images == c.images);
  EXPECT_EQ(a.images.shape(), (Shape{20, 1, 16, 16}));
  for (float v : a.images.storage()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  const auto blobs = synth_dataset(SynthKind::blobs, 3, 2, 12, 1);
  EXPECT_EQ(blobs.num_classes, 3);
  EXPECT_EQ(blobs.size(), 6u);
}

TEST(Synth, DegenerateInputsRejected) {
  EXPECT_THROW(synth_dataset(SynthKind::bars, 2, 0, 16, 1), std::invalid_argument);
  EXPECT_THROW(synth_dataset(SynthKind::bars, 1, 5, 16, 1), std::invalid_argument);
  EXPECT_THROW(synth_dataset(SynthKind::bars, 17, 5, 16, 1), std::invalid_argument);
}

TEST(Synth, ClassMeansDiffer) {
  const auto d = synth_dataset(SynthKind::bars, 10, 20, 16, 3);
  std::vector<std::vector<double>> mean(10, std::vector<double>(256, 0.0));
  for (std::size_t i = 0; i < d.size(); ++i)
    for (int p = 0; p < 256; ++p) mean[d.labels[i]][p] += d.images[i * 256 + p] / 20.0;
  for (int a = 0; a < 10; ++a)
    for (int b = a + 1; b < 10; ++b) {
      double dist = 0;
      for (int p = 0; p < 256; ++p) dist += std::pow(mean[a][p] - mean[b][p], 2);
      EXPECT_GT(std::sqrt(dist), 1.0) << a << " vs " << b;
    }
}

Tensor asymmetric_pattern(std::size_t side) {
  Tensor t({1, 1, side, side});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = float(i) / float(t.size()) * 2 - 1;
  return t;
}

TEST(Rotation, ZeroIsIdentity) {
  ClientDataset c;
  c.samples = synth_dataset(SynthKind::bars, 3, 2, 16, 5).images;
  c.labels = {0, 1, 2, 0, 1, 2};
  const auto out = apply_victim_property(c, {VictimProperty::Kind::rotation, 0.0});
  EXPECT_EQ(out.samples, c.samples);
  EXPECT_EQ(out.labels, c.labels);
}

TEST(Rotation, NinetyIsExactPermutation) {
  for (std::size_t side : {5, 6}) {
    const Tensor x = asymmetric_pattern(side);
    const Tensor r = rotate_images(x, 90.0);
    const std::size_t n = side;
    // counter-clockwise as displayed: the top row becomes the left column
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t xx = 0; xx < n; ++xx)
        EXPECT_EQ(r[y * n + xx], x[xx * n + (n - 1 - y)]) << side << " " << y << "," << xx;
    const Tensor back = rotate_images(rotate_images(rotate_images(r, 90.0), 90.0), 90.0);
    EXPECT_EQ(back, x);
  }
}

TEST(Rotation, FillsBackgroundAndKeepsLabels) {
  Tensor ones({1, 1, 8, 8}, 1.0f);
  const Tensor r = rotate_images(ones, 30.0);
  EXPECT_EQ(r[0], -1.0f);  // corner sourced from outside the frame
  EXPECT_NEAR(r[3 * 8 + 3], 1.0f, 1e-6);  // center stays inside
  ClientDataset c;
  c.samples = ones;
  c.labels = {2};
  EXPECT_THROW(apply_victim_property(c, {VictimProperty::Kind::rotation, 200.0}),
               std::invalid_argument);
}

TEST(Pgm, GridDimensions) {
  const Tensor imgs({10, 1, 28, 28});
  const auto g = image_grid(imgs, 5);
  EXPECT_EQ(g.height, 2u * 28 + 2);
  EXPECT_EQ(g.width, 5u * 28 + 8);
}

TEST(Pgm, ValueMappingAndSeparators) {
  Tensor imgs({2, 1, 2, 2});
  for (int i = 0; i < 4; ++i) imgs[i] = -1.0f;
  for (int i = 4; i < 8; ++i) imgs[i] = 1.0f;
  const auto g = image_grid(imgs, 2);
  EXPECT_EQ(g.width, 6u);
  EXPECT_EQ(g.pixels[0], 0);
  EXPECT_EQ(g.pixels[2], 255);  // separator
  EXPECT_EQ(g.pixels[4], 255);
}

TEST(Pgm, WriteReadRoundTrip) {
  const auto dir = temp_dir("pgm");
  Rng rng(3);
  const Tensor imgs = testing::random_tensor<float>({7, 1, 9, 9}, rng);
  const auto path = (dir / "grid.pgm").string();
  save_image_grid(imgs, 3, path);
  const auto bytes = read_file_bytes(path);
  const auto g = load_pgm(path);
  EXPECT_EQ(encode_pgm(g), bytes);
  const auto expect = image_grid(imgs, 3);
  EXPECT_EQ(g.pixels, expect.pixels);
  EXPECT_EQ(g.width, expect.width);
  for (std::size_t y = 0; y < 9; ++y)
    for (std::size_t x = 0; x < 9; ++x)
      EXPECT_EQ(g.pixels[y * g.width + x], unit_to_byte(imgs[y * 9 + x]));
}

TEST(Pgm, ImageDirectoryLoader) {
  const auto dir = temp_dir("imgdir");
  for (int c = 0; c < 2; ++c) {
    fs::create_directories(dir / ("class" + std::to_string(c)));
    GrayImage g{4, 4, std::vector<std::uint8_t>(16, std::uint8_t(c * 255))};
    write_file_bytes((dir / ("class" + std::to_string(c)) / "a.pgm").string(), encode_pgm(g));
  }
  const auto d = load_image_dir(dir.string(), 8);
  EXPECT_EQ(d.num_classes, 2);
  EXPECT_EQ(d.labels, (std::vector<int>{0, 1}));
  EXPECT_EQ(d.images.shape(), (Shape{2, 1, 8, 8}));
  EXPECT_EQ(d.images[0], -1.0f);
  EXPECT_EQ(d.images[64], 1.0f);
}

TEST(Metrics, HeaderOnlyWhenEmpty) {
  const auto dir = temp_dir("metrics");
  const auto path = (dir / "m.csv").string();
  { MetricsCsv m(path); }
  std::ifstream in(path);
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(all, "round,metric,value\n");
  EXPECT_TRUE(read_metrics_csv(path).empty());
}

TEST(Metrics, DuplicateRejectedAndReadBack) {
  const auto dir = temp_dir("metrics2");
  const auto path = (dir / "m.csv").string();
  MetricsCsv m(path);
  m.append({1, "accuracy", 0.5});
  m.append({0, "accuracy", 0.25});
  m.append({1, "loss", 2.0});
  EXPECT_THROW(m.append({1, "accuracy", 0.6}), std::invalid_argument);
  const auto rows = read_metrics_csv(path);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(metric_series(rows, "accuracy"), (std::vector<double>{0.25, 0.5}));
}

TEST(ParamFile, RoundTripAndErrors) {
  ParamSet p;
  Rng rng(4);
  p.set("trunk.conv0.weight", testing::random_tensor<float>({2, 1, 3, 3}, rng));
  p.set("head_cat.bias", testing::random_tensor<float>({5}, rng));
  const auto bytes = encode_params(p);
  EXPECT_EQ(decode_params(bytes), p);
  EXPECT_EQ(encode_params(decode_params(bytes)), bytes);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "FLPS");

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_params(bad), FormatError);
  auto version = bytes;
  version[4] = 2;
  EXPECT_THROW(decode_params(version), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_params(truncated), FormatError);

  const auto dir = temp_dir("params");
  save_params((dir / "p.bin").string(), p);
  EXPECT_EQ(load_params((dir / "p.bin").string()), p);
}

}  // namespace
}  // namespace mgan
