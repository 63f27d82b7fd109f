#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "../support/oracles.hpp"
#include "../support/tempdir.hpp"
#include "mgslab/datasets.hpp"

using namespace mgslab;
namespace fs = std::filesystem;

namespace {

using testing_support::TempDir;

void be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), static_cast<long>(b.size()));
}

// Two 28x28 images: the first is all zeros but pixel (3, 5) = 255, the second ramps by column.
void write_fixture(const TempDir& dir, std::size_t image_bytes_dropped = 0, std::uint32_t label_count = 2) {
  std::vector<unsigned char> img;
  be32(img, 0x803);
  be32(img, 2);
  be32(img, 28);
  be32(img, 28);
  for (int k = 0; k < 784; ++k) img.push_back(k == 3 * 28 + 5 ? 255 : 0);
  for (int k = 0; k < 784; ++k) img.push_back(static_cast<unsigned char>(k % 28));
  img.resize(img.size() - image_bytes_dropped);
  std::vector<unsigned char> lab;
  be32(lab, 0x801);
  be32(lab, label_count);
  lab.push_back(7);
  lab.push_back(2);
  write_bytes(dir.file("img"), img);
  write_bytes(dir.file("lab"), lab);
}

double image_sum(const Tensor& t, std::size_t i) {
  const std::size_t block = t.size() / t.dim(0);
  double s = 0.0;
  for (std::size_t k = 0; k < block; ++k) s += t[i * block + k];
  return s;
}

}  // namespace

TEST(TwoCircles, NoiselessPointsLieOnTheirCircle) {
  const auto d = two_circles(200, 0.5, 1.5, 0.0, 3);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double r = std::hypot(d.inputs(i, 0), d.inputs(i, 1));
    EXPECT_NEAR(r, d.targets[i] == 0 ? 0.5 : 1.5, 1e-12);
  }
  const auto counts = class_counts(d.targets, 2);
  EXPECT_EQ(counts[0], 100u);
  EXPECT_EQ(counts[1], 100u);
}

TEST(TwoCircles, DeterministicAndRecorded) {
  const auto a = two_circles(50, 1, 2, 0.1, 9), b = two_circles(50, 1, 2, 0.1, 9), c = two_circles(50, 1, 2, 0.1, 10);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_FALSE(a.inputs == c.inputs);
  EXPECT_EQ(a.provenance[0]["op"], "two_circles");
  EXPECT_EQ(a.provenance[0]["seed"], 9);
  EXPECT_THROW(two_circles(7, 1, 2, 0, 1), ConfigError);
}

TEST(LoadIdx, Fixture) {
  TempDir dir;
  write_fixture(dir);
  const auto d = load_idx(dir.file("img"), dir.file("lab"));
  EXPECT_EQ(d.inputs.shape(), (Shape{2, 28, 28}));
  EXPECT_EQ(d.targets[0], 7.0);
  EXPECT_EQ(d.targets[1], 2.0);
  EXPECT_EQ(d.inputs[3 * 28 + 5], 1.0);
  EXPECT_EQ(d.inputs[0], 0.0);
  EXPECT_EQ(d.inputs[784 + 27], 27.0 / 255.0);
}

TEST(LoadIdx, TruncatedImagesNameByteCounts) {
  TempDir dir;
  write_fixture(dir, 10);
  try {
    load_idx(dir.file("img"), dir.file("lab"));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected 1584"), std::string::npos) << msg;
    EXPECT_NE(msg.find("found 1574"), std::string::npos) << msg;
  }
}

TEST(LoadIdx, WrongMagicAndCountMismatch) {
  TempDir dir;
  write_fixture(dir, 0, 3);
  EXPECT_THROW(load_idx(dir.file("img"), dir.file("lab")), FormatError);
  write_fixture(dir);
  EXPECT_THROW(load_idx(dir.file("lab"), dir.file("img")), FormatError);
  EXPECT_THROW(load_idx(dir.file("missing"), dir.file("lab")), FormatError);
}

TEST(MotionBlur, LengthOneIsIdentity) {
  Rng rng(1);
  const Tensor x = oracle::random_matrix(rng, 3, 64).reshaped({3, 8, 8});
  EXPECT_EQ(motion_blur(x, 1, 45.0), x);
}

TEST(MotionBlur, UniformImageUnchanged) {
  const Tensor x({2, 10, 10}, 0.37);
  const Tensor y = motion_blur(x, 5, 45.0);
  for (double v : y.data()) EXPECT_NEAR(v, 0.37, 1e-15);
}

TEST(MotionBlur, PreservesPerImageMass) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 5 + rng.below(20), w = 5 + rng.below(20), len = 1 + rng.below(7);
    const double angle = rng.uniform(0, 180);
    long reach_r = 0, reach_c = 0;
    for (const auto& t : motion_blur_kernel(len, angle)) {
      reach_r = std::max(reach_r, std::abs(t.dr));
      reach_c = std::max(reach_c, std::abs(t.dc));
    }
    // Content anywhere except the corner patches touching two borders within the kernel's reach.
    Tensor x({2, h, w});
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          const bool edge_r = static_cast<long>(r) < reach_r || static_cast<long>(r) >= static_cast<long>(h) - reach_r;
          const bool edge_c = static_cast<long>(c) < reach_c || static_cast<long>(c) >= static_cast<long>(w) - reach_c;
          x[(i * h + r) * w + c] = edge_r && edge_c ? 0.0 : rng.uniform();
        }
      }
    }
    const Tensor y = motion_blur(x, len, angle);
    for (std::size_t i = 0; i < 2; ++i) {
      EXPECT_NEAR(image_sum(y, i), image_sum(x, i), 1e-10 * image_sum(x, i)) << "trial " << trial;
    }
  }
}

TEST(MotionBlur, AxisAlignedKernelsPreserveMassOfAnyImage) {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t h = 5 + rng.below(20), w = 5 + rng.below(20), len = 1 + rng.below(5);
    Tensor x({1, h, w});
    for (double& v : x.data()) v = rng.uniform();
    for (double angle : {0.0, 90.0}) {
      EXPECT_NEAR(image_sum(motion_blur(x, len, angle), 0), image_sum(x, 0), 1e-10 * image_sum(x, 0));
    }
  }
}

TEST(MotionBlur, MnistSizedDigitsKeepMass) {
  // 28x28 with the usual empty 4-pixel frame, default blur.
  Rng rng(4);
  Tensor x({3, 28, 28}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t r = 4; r < 24; ++r) {
      for (std::size_t c = 4; c < 24; ++c) x[(i * 28 + r) * 28 + c] = rng.uniform();
    }
  }
  const Tensor y = motion_blur(x, 5, 45.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(image_sum(y, i), image_sum(x, i), 1e-10 * image_sum(x, i));
}

TEST(MotionBlur, HorizontalKernelSpreadsAlongRows) {
  Tensor x({1, 5, 5}, 0.0);
  x[2 * 5 + 2] = 1.0;
  const Tensor y = motion_blur(x, 3, 0.0);
  for (std::size_t c = 1; c <= 3; ++c) EXPECT_NEAR(y[2 * 5 + c], 1.0 / 3, 1e-15);
  EXPECT_EQ(y[1 * 5 + 2], 0.0);
  const auto taps = motion_blur_kernel(5, 45.0);
  double wsum = 0.0;
  for (const auto& t : taps) {
    wsum += t.weight;
    EXPECT_EQ(t.dr, -t.dc);  // up and to the right
  }
  EXPECT_NEAR(wsum, 1.0, 1e-15);
}

TEST(FlipLabels, Examples) {
  Rng rng(3);
  const Tensor y = oracle::labels(rng, 1000, 10);
  EXPECT_EQ(flip_labels(y, 0.0, 10, 1), y);
  const Tensor all = flip_labels(y, 1.0, 10, 1);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NE(all[i], y[i]);
  const Tensor a = flip_labels(y, 0.3, 10, 5), b = flip_labels(y, 0.3, 10, 5);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < y.size(); ++i) changed += a[i] != y[i];
  EXPECT_EQ(changed, 300u);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == flip_labels(y, 0.3, 10, 6));
  EXPECT_THROW(flip_labels(y, 0.3, 1, 5), ConfigError);
  EXPECT_THROW(flip_labels(y, 1.5, 10, 5), ConfigError);
}

TEST(FlipLabels, TwoClassesAlwaysSwap) {
  const Tensor y({6}, std::vector<double>{0, 1, 0, 1, 1, 0});
  const Tensor f = flip_labels(y, 1.0, 2, 4);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(f[i], 1.0 - y[i]);
}

TEST(FlipLabels, TestSplitIsProtectedAndFlipsAreRecorded) {
  auto test = two_circles(20, 1, 2, 0.1, 1, Split::test);
  EXPECT_THROW(flip_labels(test, 0.2, 3), ConfigError);
  auto train = two_circles(20, 1, 2, 0.1, 1);
  flip_labels(train, 0.2, 3);
  EXPECT_EQ(train.provenance.back()["op"], "flip_labels");
  EXPECT_EQ(train.provenance.back()["seed"], 3);
}

TEST(StratifiedSample, Examples) {
  Dataset d;
  d.num_classes = 10;
  d.inputs = Tensor({1000, 1});
  d.targets = Tensor({1000});
  for (std::size_t i = 0; i < 1000; ++i) {
    d.inputs[i] = static_cast<double>(i);
    d.targets[i] = static_cast<double>(i % 10);
  }
  const auto s = stratified_sample(d, 100, 7);
  for (auto c : class_counts(s.targets, 10)) EXPECT_EQ(c, 10u);
  EXPECT_EQ(s.inputs, stratified_sample(d, 100, 7).inputs);

  const auto all = stratified_sample(d, 1000, 7);
  std::vector<double> seen(all.inputs.data().begin(), all.inputs.data().end());
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(seen, std::vector<double>(d.inputs.data().begin(), d.inputs.data().end()));
  EXPECT_THROW(stratified_sample(d, 5, 7), ConfigError);
  EXPECT_THROW(stratified_sample(d, 1001, 7), ConfigError);
}

TEST(StratifiedSample, ImbalancedHistogramWithinOne) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t q = 2 + rng.below(6);
    Dataset d;
    d.num_classes = q;
    std::vector<double> labels;
    for (std::size_t c = 0; c < q; ++c) {
      const std::size_t count = 1 + rng.below(60);
      for (std::size_t k = 0; k < count; ++k) labels.push_back(static_cast<double>(c));
    }
    const std::size_t total = labels.size();
    d.targets = Tensor({total}, labels);
    d.inputs = Tensor({total, 1});
    const std::size_t n = q + rng.below(total - q + 1);
    const auto s = stratified_sample(d, n, rng.next());
    ASSERT_EQ(s.size(), n);
    const auto full = class_counts(d.targets, q), got = class_counts(s.targets, q);
    for (std::size_t c = 0; c < q; ++c) {
      const double ideal = static_cast<double>(n) * full[c] / static_cast<double>(total);
      EXPECT_LE(std::abs(static_cast<double>(got[c]) - ideal), 1.0) << "trial " << trial << " class " << c;
    }
  }
}

TEST(SyntheticRegression, ShapesAndDeterminism) {
  const auto a = synthetic_regression(50, 4, 3, 0.0, 1), b = synthetic_regression(50, 4, 3, 0.0, 1);
  EXPECT_EQ(a.inputs.shape(), (Shape{50, 4}));
  EXPECT_EQ(a.targets.shape(), (Shape{50, 3}));
  EXPECT_EQ(a.targets, b.targets);
  for (double v : a.inputs.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_EQ(a.num_outputs(), 3u);
  EXPECT_FALSE(a.classification());
}

TEST(SyntheticRegression, TargetVarianceGrowsWithNoise) {
  auto variance = [](const Tensor& t) {
    double s = 0.0, s2 = 0.0;
    for (double v : t.data()) {
      s += v;
      s2 += v * v;
    }
    const double n = static_cast<double>(t.size());
    return s2 / n - (s / n) * (s / n);
  };
  double prev = -1.0;
  for (double noise : {0.0, 0.5, 1.0, 2.0}) {
    const double v = variance(synthetic_regression(10000, 3, 1, noise, 2).targets);
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(Container, DatasetRoundTrip) {
  TempDir dir;
  auto d = two_circles(30, 1, 2, 0.1, 4);
  flip_labels(d, 0.2, 5);
  save_dataset(dir.file("d.mgsl"), d);
  const auto r = load_dataset(dir.file("d.mgsl"));
  EXPECT_EQ(r.inputs, d.inputs);
  EXPECT_EQ(r.targets, d.targets);
  EXPECT_EQ(r.provenance, d.provenance);
  EXPECT_EQ(r.num_classes, 2u);
}

TEST(Container, TruncationAndBadMagic) {
  TempDir dir;
  Container c;
  c.tensors = {{"w", Tensor({3, 4}, 1.5)}};
  c.metadata = {{"kind", "test"}};
  save_container(dir.file("c"), c);
  const auto size = fs::file_size(dir.file("c"));
  fs::resize_file(dir.file("c"), size - 20);
  try {
    load_container(dir.file("c"));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("expected"), std::string::npos);
  }
  write_bytes(dir.file("bad"), {1, 2, 3, 4, 5, 6, 7, 8});
  EXPECT_THROW(load_container(dir.file("bad")), FormatError);
  EXPECT_THROW(load_dataset(dir.file("c")), FormatError);
}
