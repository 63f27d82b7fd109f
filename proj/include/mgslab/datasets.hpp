#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgslab/container.hpp"
#include "mgslab/error.hpp"
#include "mgslab/rng.hpp"
#include "mgslab/tensor.hpp"

namespace mgslab {

enum class Split { train, test };

inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

/// Inputs with leading dimension N; targets are class indices (N) or regression values (N x q).
/// `provenance` records every generation and corruption step in order.
struct Dataset {
  Tensor inputs;
  Tensor targets;
  Split split = Split::train;
  std::size_t num_classes = 0;  // 0 for regression
  nlohmann::json provenance = nlohmann::json::array();

  std::size_t size() const { return inputs.rows(); }
  bool classification() const { return num_classes > 0; }
  std::size_t num_outputs() const { return classification() ? num_classes : targets.cols(); }
  Shape sample_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }

  void check() const {
    if (inputs.rows() != targets.rows()) {
      throw ShapeError("dataset", std::to_string(inputs.rows()) + " inputs but " + std::to_string(targets.rows()) +
                                      " targets");
    }
  }
};

/// Rows `idx` of a dataset, in that order. Provenance is carried over.
inline Dataset select(const Dataset& d, const std::vector<std::size_t>& idx) {
  Dataset out = d;
  out.inputs = d.inputs.gather_rows(idx);
  out.targets = d.targets.gather_rows(idx);
  return out;
}

inline std::vector<std::size_t> class_counts(const Tensor& labels, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (double v : labels.data()) {
    const auto c = static_cast<std::size_t>(v);
    if (v < 0 || v != std::floor(v) || c >= num_classes) {
      throw ConfigError("label " + std::to_string(v) + " outside [0, " + std::to_string(num_classes) + ")");
    }
    ++counts[c];
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Generators

inline Dataset two_circles(std::size_t n, double radius_inner, double radius_outer, double noise_std,
                           std::uint64_t seed, Split split = Split::train) {
  if (n == 0 || n % 2 != 0) throw ConfigError("two_circles needs a positive even n");
  if (!(radius_inner > 0.0) || !(radius_outer > 0.0)) throw ConfigError("two_circles radii must be positive");
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
  Rng rng(seed);
  Dataset d;
  d.inputs = Tensor({n, 2});
  d.targets = Tensor({n});
  d.split = split;
  d.num_classes = 2;
  for (std::size_t i = 0; i < n; ++i) {
    const bool outer = i >= n / 2;
    const double r = outer ? radius_outer : radius_inner;
    const double t = 2.0 * std::numbers::pi * rng.uniform();
    d.inputs(i, 0) = r * std::cos(t);
    d.inputs(i, 1) = r * std::sin(t);
    d.targets[i] = outer ? 1.0 : 0.0;
  }
  if (noise_std > 0.0) {
    for (double& v : d.inputs.data()) v += noise_std * rng.normal();
  }
  d.provenance.push_back({{"op", "two_circles"},
                          {"n", n},
                          {"radius_inner", radius_inner},
                          {"radius_outer", radius_outer},
                          {"noise_std", noise_std},
                          {"seed", seed}});
  return d;
}

/// Inputs uniform on [-1,1]^d; target c = sin(pi w_c.x) + 0.5 v_c.x + noise_scale * N(0,1).
/// w_c and v_c are fixed (independent of `seed`) so that different seeds sample one task.
inline Dataset synthetic_regression(std::size_t n, std::size_t d, std::size_t q, double noise_scale,
                                    std::uint64_t seed, Split split = Split::train) {
  if (n == 0 || d == 0 || q == 0) throw ConfigError("synthetic_regression needs n, d, q >= 1");
  if (!(noise_scale >= 0.0)) throw ConfigError("noise_scale must be >= 0");
  Rng task(0x7a5c0ffee);
  std::vector<double> w(q * d), v(q * d);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& x : w) x = s * task.normal();
  for (auto& x : v) x = s * task.normal();

  Rng rng(seed);
  Dataset out;
  out.inputs = Tensor({n, d});
  out.targets = Tensor({n, q});
  out.split = split;
  for (double& x : out.inputs.data()) x = rng.uniform(-1.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < q; ++c) {
      double a = 0.0, b = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        a += w[c * d + k] * out.inputs(i, k);
        b += v[c * d + k] * out.inputs(i, k);
      }
      out.targets(i, c) = std::sin(std::numbers::pi * a) + 0.5 * b;
    }
  }
  if (noise_scale > 0.0) {
    for (double& y : out.targets.data()) y += noise_scale * rng.normal();
  }
  out.provenance.push_back(
      {{"op", "synthetic_regression"}, {"n", n}, {"d", d}, {"q", q}, {"noise_scale", noise_scale}, {"seed", seed}});
  return out;
}

// ---------------------------------------------------------------------------
// IDX ingestion

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

inline void require_bytes(const std::string& path, const std::vector<unsigned char>& b, std::size_t expected) {
  if (b.size() < expected) {
    throw FormatError("'" + path + "' is truncated: expected " + std::to_string(expected) + " bytes, found " +
                      std::to_string(b.size()));
  }
}

}  // namespace detail

/// Reads an IDX image file (magic 0x803, dims N x rows x cols) and label file (magic 0x801).
/// Pixels are scaled to [0, 1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, Split split = Split::train) {
  const auto img = detail::read_bytes(images_path);
  detail::require_bytes(images_path, img, 16);
  if (detail::be32(img, 0) != 0x00000803) {
    throw FormatError("'" + images_path + "' has magic " + std::to_string(detail::be32(img, 0)) +
                      ", expected 2051 (IDX images)");
  }
  const std::size_t n = detail::be32(img, 4), rows = detail::be32(img, 8), cols = detail::be32(img, 12);
  detail::require_bytes(images_path, img, 16 + n * rows * cols);

  const auto lab = detail::read_bytes(labels_path);
  detail::require_bytes(labels_path, lab, 8);
  if (detail::be32(lab, 0) != 0x00000801) {
    throw FormatError("'" + labels_path + "' has magic " + std::to_string(detail::be32(lab, 0)) +
                      ", expected 2049 (IDX labels)");
  }
  const std::size_t nl = detail::be32(lab, 4);
  if (nl != n) {
    throw FormatError("image file holds " + std::to_string(n) + " images but label file holds " +
                      std::to_string(nl) + " labels");
  }
  detail::require_bytes(labels_path, lab, 8 + n);

  Dataset d;
  d.inputs = Tensor({n, rows, cols});
  d.targets = Tensor({n});
  d.split = split;
  for (std::size_t k = 0; k < n * rows * cols; ++k) d.inputs[k] = img[16 + k] / 255.0;
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.targets[i] = lab[8 + i];
    max_label = std::max<std::size_t>(max_label, lab[8 + i]);
  }
  d.num_classes = std::max<std::size_t>(max_label + 1, 2);
  d.provenance.push_back({{"op", "load_idx"},
                          {"images", std::filesystem::path(images_path).filename().string()},
                          {"labels", std::filesystem::path(labels_path).filename().string()},
                          {"count", n}});
  return d;
}

/// MNIST-style directory with train-*/t10k-* IDX files.
inline Dataset load_mnist_dir(const std::string& dir, Split split) {
  const std::string prefix = split == Split::train ? "train" : "t10k";
  auto d = load_idx(dir + "/" + prefix + "-images-idx3-ubyte", dir + "/" + prefix + "-labels-idx1-ubyte", split);
  d.num_classes = 10;
  return d;
}

// ---------------------------------------------------------------------------
// Corruptions

namespace detail {
// Half-sample symmetric reflection: -1 -> 0, n -> n-1.
inline std::size_t reflect(long i, long n) {
  const long period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - 1 - i);
}
}  // namespace detail

struct BlurTap {
  long dr;
  long dc;
  double weight;
};

/// Normalised line kernel: `length` unit-spaced samples centred on the origin along `angle_deg`
/// (counter-clockwise from the +x axis, image rows growing downwards), snapped to pixels.
inline std::vector<BlurTap> motion_blur_kernel(std::size_t length, double angle_deg) {
  if (length == 0) throw ConfigError("motion blur length must be >= 1");
  const double a = angle_deg * std::numbers::pi / 180.0;
  std::vector<BlurTap> taps;
  for (std::size_t k = 0; k < length; ++k) {
    const double t = static_cast<double>(k) - 0.5 * static_cast<double>(length - 1);
    const long dr = std::lround(-t * std::sin(a));
    const long dc = std::lround(t * std::cos(a));
    auto it = std::find_if(taps.begin(), taps.end(), [&](const BlurTap& b) { return b.dr == dr && b.dc == dc; });
    if (it == taps.end()) {
      taps.push_back({dr, dc, 0.0});
      it = taps.end() - 1;
    }
    it->weight += 1.0 / static_cast<double>(length);
  }
  return taps;
}

/// Blurs a stack of images (N, H, W) or (N, H, W, C) with a line kernel and reflect padding.
/// Constant images are left unchanged. The kernel is point-symmetric, so along each axis the
/// reflected taps come in pairs and the pixel sum is preserved exactly, except for mass inside
/// the corner patches within the kernel's reach of two borders at once (diagonal kernels only).
inline Tensor motion_blur(const Tensor& images, std::size_t length, double angle_deg) {
  if (images.rank() < 3) throw ShapeError("motion_blur", "expected (N, H, W[, C]) images");
  const auto taps = motion_blur_kernel(length, angle_deg);
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2);
  const std::size_t ch = images.size() / std::max<std::size_t>(n * h * w, 1);
  Tensor out(images.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t base = i * h * w * ch;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        for (std::size_t k = 0; k < ch; ++k) {
          double s = 0.0;
          for (const auto& t : taps) {
            const std::size_t rr = detail::reflect(static_cast<long>(r) + t.dr, static_cast<long>(h));
            const std::size_t cc = detail::reflect(static_cast<long>(c) + t.dc, static_cast<long>(w));
            s += t.weight * images[base + (rr * w + cc) * ch + k];
          }
          out[base + (r * w + c) * ch + k] = s;
        }
      }
    }
  }
  return out;
}

inline void motion_blur(Dataset& d, std::size_t length, double angle_deg) {
  d.inputs = motion_blur(d.inputs, length, angle_deg);
  d.provenance.push_back({{"op", "motion_blur"}, {"length", length}, {"angle_deg", angle_deg}});
}

/// Replaces the labels of a uniformly chosen floor(fraction * N) subset with a uniformly drawn
/// different class.
inline Tensor flip_labels(const Tensor& targets, double fraction, std::size_t num_classes, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("label-noise fraction must lie in [0, 1]");
  if (fraction > 0.0 && num_classes < 2) throw ConfigError("label flipping needs at least 2 classes");
  const std::size_t n = targets.size();
  Tensor out = targets;
  if (fraction == 0.0) return out;
  class_counts(targets, num_classes);  // validates label range
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  Rng rng(seed);
  const auto perm = rng.permutation(n);
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t i = perm[j];
    const auto old = static_cast<std::size_t>(targets[i]);
    out[i] = static_cast<double>((old + 1 + rng.below(num_classes - 1)) % num_classes);
  }
  return out;
}

inline void flip_labels(Dataset& d, double fraction, std::uint64_t seed) {
  if (d.split != Split::train) throw ConfigError("label flipping is only allowed on the training split");
  if (!d.classification()) throw ConfigError("label flipping needs a classification dataset");
  d.targets = flip_labels(d.targets, fraction, d.num_classes, seed);
  d.provenance.push_back({{"op", "flip_labels"}, {"fraction", fraction}, {"seed", seed}});
}

/// Class-proportional subsample of size n (largest-remainder allocation), in shuffled order.
inline Dataset stratified_sample(const Dataset& d, std::size_t n, std::uint64_t seed) {
  if (!d.classification()) throw ConfigError("stratified sampling needs class labels");
  const std::size_t total = d.size();
  if (n > total) throw ConfigError("cannot sample " + std::to_string(n) + " of " + std::to_string(total) + " points");
  const auto counts = class_counts(d.targets, d.num_classes);
  std::size_t present = 0;
  for (auto c : counts) present += c > 0;
  if (n < present) {
    throw ConfigError("sample size " + std::to_string(n) + " is smaller than the number of classes (" +
                      std::to_string(present) + ")");
  }

  std::vector<std::size_t> quota(d.num_classes);
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < d.num_classes; ++c) {
    const double exact = static_cast<double>(n) * static_cast<double>(counts[c]) / static_cast<double>(total);
    quota[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[c];
    rema.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++quota[rema[k].second];

  Rng rng(seed);
  std::vector<std::vector<std::size_t>> members(d.num_classes);
  for (std::size_t i = 0; i < total; ++i) members[static_cast<std::size_t>(d.targets[i])].push_back(i);
  std::vector<std::size_t> chosen;
  chosen.reserve(n);
  for (std::size_t c = 0; c < d.num_classes; ++c) {
    rng.shuffle(members[c]);
    chosen.insert(chosen.end(), members[c].begin(), members[c].begin() + static_cast<long>(quota[c]));
  }
  rng.shuffle(chosen);
  Dataset out = select(d, chosen);
  out.provenance.push_back({{"op", "stratified_sample"}, {"n", n}, {"seed", seed}});
  return out;
}

// ---------------------------------------------------------------------------
// Cache

inline void save_dataset(const std::string& path, const Dataset& d) {
  Container c;
  c.tensors = {{"inputs", d.inputs}, {"targets", d.targets}};
  c.metadata = {{"kind", "dataset"},
                {"split", std::string(to_string(d.split))},
                {"num_classes", d.num_classes},
                {"provenance", d.provenance}};
  save_container(path, c);
}

inline Dataset load_dataset(const std::string& path) {
  Container c = load_container(path);
  if (c.metadata.value("kind", "") != "dataset") throw FormatError("'" + path + "' does not hold a dataset");
  Dataset d;
  d.inputs = c.get("inputs");
  d.targets = c.get("targets");
  d.split = c.metadata.at("split") == "test" ? Split::test : Split::train;
  d.num_classes = c.metadata.at("num_classes").get<std::size_t>();
  d.provenance = c.metadata.at("provenance");
  d.check();
  return d;
}

}  // namespace mgslab
