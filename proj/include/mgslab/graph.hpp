#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mgslab/autodiff.hpp"
#include "mgslab/error.hpp"
#include "mgslab/rng.hpp"
#include "mgslab/tensor.hpp"

namespace mgslab {

/// One named parameter tensor inside the flat parameter vector.
struct ParamSlot {
  std::string name;
  std::size_t offset = 0;
  Shape shape;
  std::size_t size() const { return shape_size(shape); }
};

/// Flattened model parameters with their layer layout.
class ParamVector {
 public:
  ParamVector() = default;
  ParamVector(std::vector<double> values, std::vector<ParamSlot> layout)
      : values_(std::move(values)), layout_(std::move(layout)) {
    validate();
  }

  static ParamVector zeros(std::vector<ParamSlot> layout) {
    std::size_t p = 0;
    for (const auto& s : layout) p += s.size();
    return ParamVector(std::vector<double>(p, 0.0), std::move(layout));
  }

  std::size_t size() const noexcept { return values_.size(); }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  const std::vector<ParamSlot>& layout() const noexcept { return layout_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  Tensor slot_tensor(std::size_t k) const {
    const auto& s = layout_.at(k);
    return Tensor(s.shape, std::vector<double>(values_.begin() + s.offset, values_.begin() + s.offset + s.size()));
  }

  double squared_norm() const {
    double s = 0.0;
    for (double v : values_) s += v * v;
    return s;
  }

  friend bool operator==(const ParamVector& a, const ParamVector& b) { return a.values_ == b.values_; }

 private:
  void validate() const {
    std::size_t expect = 0;
    for (const auto& s : layout_) {
      if (s.offset != expect) throw ShapeError(s.name, "parameter slots must be contiguous and ordered");
      expect += s.size();
    }
    if (expect != values_.size()) {
      throw ShapeError("", "parameter layout covers " + std::to_string(expect) + " values, vector has " +
                               std::to_string(values_.size()));
    }
  }

  std::vector<double> values_;
  std::vector<ParamSlot> layout_;
};

enum class LayerKind { dense, conv2d, relu, avg_pool, flatten, dropout };

struct Layer {
  LayerKind kind = LayerKind::dense;
  std::string name;
  Shape in_shape;   // per sample: {n} or {H, W, C}
  Shape out_shape;
  std::size_t kernel = 0;  // conv2d
  double rate = 0.0;       // dropout
  std::size_t weight_slot = static_cast<std::size_t>(-1);
  std::size_t bias_slot = static_cast<std::size_t>(-1);

  bool has_params() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }
  std::size_t in_features() const { return shape_size(in_shape); }
  std::size_t out_features() const { return shape_size(out_shape); }
};

/// Identifies the dropout masks of one forward pass. Masks are a pure function of
/// (seed, step, layer index, element index).
struct DropoutContext {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t sample_offset = 0;  // index of the batch's first row, for per-sample replays
};

/// Static feed-forward computation graph: an ordered chain of layers.
class Graph {
 public:
  Graph() = default;
  explicit Graph(Shape input_shape) : input_shape_(std::move(input_shape)), current_(input_shape_) {
    if (input_shape_.empty() || shape_size(input_shape_) == 0) throw ShapeError("input", "empty input shape");
  }

  Graph& dense(std::size_t out) {
    if (out == 0) throw ShapeError(next_name("dense"), "width must be positive");
    Layer l = start(LayerKind::dense, "dense");
    l.out_shape = {out};
    l.weight_slot = add_slot(l.name + ".weight", {out, l.in_features()});
    l.bias_slot = add_slot(l.name + ".bias", {out});
    return push(std::move(l));
  }

  Graph& conv2d(std::size_t out_channels, std::size_t kernel) {
    Layer l = start(LayerKind::conv2d, "conv");
    if (l.in_shape.size() != 3) {
      throw ShapeError(l.name, "convolution needs an (H, W, C) input, got " + shape_string(l.in_shape));
    }
    if (kernel == 0 || kernel > l.in_shape[0] || kernel > l.in_shape[1] || out_channels == 0) {
      throw ShapeError(l.name, "kernel " + std::to_string(kernel) + " does not fit input " + shape_string(l.in_shape));
    }
    l.kernel = kernel;
    l.out_shape = {l.in_shape[0] - kernel + 1, l.in_shape[1] - kernel + 1, out_channels};
    l.weight_slot = add_slot(l.name + ".weight", {out_channels, kernel * kernel * l.in_shape[2]});
    l.bias_slot = add_slot(l.name + ".bias", {out_channels});
    return push(std::move(l));
  }

  Graph& relu() {
    Layer l = start(LayerKind::relu, "relu");
    l.out_shape = l.in_shape;
    return push(std::move(l));
  }

  Graph& avg_pool() {
    Layer l = start(LayerKind::avg_pool, "pool");
    if (l.in_shape.size() != 3 || l.in_shape[0] % 2 != 0 || l.in_shape[1] % 2 != 0) {
      throw ShapeError(l.name, "2x2 pooling needs an (H, W, C) input with even H and W, got " +
                                   shape_string(l.in_shape));
    }
    l.out_shape = {l.in_shape[0] / 2, l.in_shape[1] / 2, l.in_shape[2]};
    return push(std::move(l));
  }

  Graph& flatten() {
    Layer l = start(LayerKind::flatten, "flatten");
    l.out_shape = {l.in_features()};
    return push(std::move(l));
  }

  Graph& dropout(double rate) {
    Layer l = start(LayerKind::dropout, "dropout");
    if (!(rate >= 0.0 && rate < 1.0)) throw ShapeError(l.name, "dropout rate must lie in [0, 1)");
    l.rate = rate;
    l.out_shape = l.in_shape;
    return push(std::move(l));
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t input_features() const { return shape_size(input_shape_); }
  const Shape& output_shape() const noexcept { return current_; }
  std::size_t num_outputs() const { return shape_size(current_); }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  const std::vector<ParamSlot>& layout() const noexcept { return layout_; }
  std::size_t param_count() const {
    std::size_t p = 0;
    for (const auto& s : layout_) p += s.size();
    return p;
  }
  bool has_dropout() const {
    for (const auto& l : layers_) {
      if (l.kind == LayerKind::dropout && l.rate > 0.0) return true;
    }
    return false;
  }

  /// Checks that a parameter vector matches this graph's layout.
  void check_params(const ParamVector& params) const {
    if (params.size() != param_count() || params.layout().size() != layout_.size()) {
      throw ShapeError("params", "parameter vector of length " + std::to_string(params.size()) +
                                     " does not match graph with " + std::to_string(param_count()) + " parameters");
    }
    for (std::size_t k = 0; k < layout_.size(); ++k) {
      if (params.layout()[k].shape != layout_[k].shape) {
        throw ShapeError(layout_[k].name, "parameter slot shape mismatch");
      }
    }
  }

 private:
  std::string next_name(const char* prefix) const { return std::string(prefix) + std::to_string(layers_.size()); }

  Layer start(LayerKind kind, const char* prefix) const {
    if (input_shape_.empty()) throw ShapeError(prefix, "graph has no input shape");
    Layer l;
    l.kind = kind;
    l.name = next_name(prefix);
    l.in_shape = current_;
    return l;
  }

  std::size_t add_slot(std::string name, Shape shape) {
    std::size_t offset = 0;
    for (const auto& s : layout_) offset += s.size();
    layout_.push_back({std::move(name), offset, std::move(shape)});
    return layout_.size() - 1;
  }

  Graph& push(Layer l) {
    current_ = l.out_shape;
    layers_.push_back(std::move(l));
    return *this;
  }

  Shape input_shape_;
  Shape current_;
  std::vector<Layer> layers_;
  std::vector<ParamSlot> layout_;
};

/// Parameters bound as graph leaves, one Var per slot.
struct BoundParams {
  std::vector<ad::Var> slots;
};

inline BoundParams bind_params(const Graph& graph, const ParamVector& params, bool requires_grad = true) {
  graph.check_params(params);
  BoundParams out;
  out.slots.reserve(graph.layout().size());
  for (std::size_t k = 0; k < graph.layout().size(); ++k) {
    out.slots.push_back(ad::Var::leaf(params.slot_tensor(k), requires_grad));
  }
  return out;
}

/// Concatenates per-slot gradient Vars into a ParamVector with the graph layout.
inline ParamVector flatten_grads(const Graph& graph, const std::vector<ad::Var>& grads) {
  ParamVector out = ParamVector::zeros(graph.layout());
  for (std::size_t k = 0; k < grads.size(); ++k) {
    const auto& slot = graph.layout()[k];
    const auto src = grads[k].value().data();
    std::copy(src.begin(), src.end(), out.values().begin() + slot.offset);
  }
  return out;
}

namespace detail {

inline ad::ConvGeometry conv_geometry(const Layer& l) {
  return {l.in_shape[0], l.in_shape[1], l.in_shape[2], l.kernel};
}

inline ad::PoolGeometry pool_geometry(const Layer& l) { return {l.in_shape[0], l.in_shape[1], l.in_shape[2]}; }

// Inverted-dropout multiplier for one element: 0 or 1/(1-rate).
inline double dropout_factor(const DropoutContext& ctx, std::size_t layer, std::uint64_t element, double rate) {
  const std::uint64_t h = mix64(derive_seed(derive_seed(ctx.seed, ctx.step), layer) ^ mix64(element));
  return unit_double(h) < rate ? 0.0 : 1.0 / (1.0 - rate);
}

}  // namespace detail

/// Per-layer values kept from a forward pass for the Jacobian pass.
struct LayerRecord {
  ad::Var input;                         // (m x in_features)
  ad::Var cols;                          // conv2d: (m*P x K*K*C)
  std::shared_ptr<const Tensor> mask;    // relu / dropout: (m x features)
};

struct ForwardTrace {
  std::size_t batch = 0;
  std::vector<LayerRecord> records;
  ad::Var output;  // (m x q)
};

/// Differentiable forward pass. `input` is (m x input_features).
inline ForwardTrace run_forward(const Graph& graph, const BoundParams& params, const ad::Var& input,
                                const DropoutContext& dropout = {}) {
  using namespace ad;
  if (input.value().rank() != 2 || input.dim(1) != graph.input_features() || input.dim(0) == 0) {
    throw ShapeError("input", "batch of shape " + shape_string(input.shape()) + " does not match graph input " +
                                  shape_string(graph.input_shape()));
  }
  ForwardTrace trace;
  trace.batch = input.dim(0);
  const std::size_t m = trace.batch;
  Var x = input;
  for (std::size_t li = 0; li < graph.layers().size(); ++li) {
    const Layer& l = graph.layers()[li];
    LayerRecord rec;
    rec.input = x;
    switch (l.kind) {
      case LayerKind::dense: {
        x = add_row_vector(matmul(x, params.slots[l.weight_slot], false, true), params.slots[l.bias_slot]);
        break;
      }
      case LayerKind::conv2d: {
        const auto geo = mgslab::detail::conv_geometry(l);
        rec.cols = im2col(x, geo);
        Var z = add_row_vector(matmul(rec.cols, params.slots[l.weight_slot], false, true), params.slots[l.bias_slot]);
        x = reshape(z, {m, l.out_features()});
        break;
      }
      case LayerKind::relu: {
        auto mask = std::make_shared<Tensor>(x.shape());
        const auto v = x.value().data();
        for (std::size_t i = 0; i < v.size(); ++i) (*mask)[i] = v[i] > 0.0 ? 1.0 : 0.0;
        rec.mask = mask;
        x = mul_const(x, mask);
        break;
      }
      case LayerKind::dropout: {
        if (dropout.training && l.rate > 0.0) {
          auto mask = std::make_shared<Tensor>(x.shape());
          const std::uint64_t base = dropout.sample_offset * x.dim(1);
          for (std::size_t i = 0; i < mask->size(); ++i) {
            (*mask)[i] = mgslab::detail::dropout_factor(dropout, li, base + i, l.rate);
          }
          rec.mask = mask;
          x = mul_const(x, mask);
        }
        break;
      }
      case LayerKind::avg_pool:
        x = avg_pool2(x, mgslab::detail::pool_geometry(l));
        break;
      case LayerKind::flatten:
        break;
    }
    trace.records.push_back(std::move(rec));
  }
  trace.output = x;
  return trace;
}

/// Cotangents of the model-parameter gradient pass for one parameterised layer.
/// Row r = i*q + c of `cot` belongs to output c of sample i.
struct JacobianBlock {
  std::size_t layer = 0;
  LayerKind kind = LayerKind::dense;
  ad::Var cot;    // dense: (mq x out); conv: (mq*P x out_channels)
  ad::Var input;  // dense: (m x in);   conv: im2col matrix (m*P x K*K*C)
  std::size_t positions = 1;
};

struct JacobianPass {
  std::size_t batch = 0;
  std::size_t outputs = 0;
  std::vector<JacobianBlock> blocks;  // in reverse layer order
  ad::Var input_cot;                  // (mq x input_features), only when requested
};

/// Back-propagates every output unit of every sample at once: the seed is an identity
/// block per sample, so row (i*q + c) carries d f_c(x_i) / d(activation). The result is a
/// differentiable function of the parameters.
inline JacobianPass jacobian_pass(const Graph& graph, const BoundParams& params, const ForwardTrace& trace,
                                  bool want_input_cot = false) {
  using namespace ad;
  const std::size_t m = trace.batch, q = graph.num_outputs();
  JacobianPass jp;
  jp.batch = m;
  jp.outputs = q;

  Tensor seed({m * q, q});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t c = 0; c < q; ++c) seed(i * q + c, c) = 1.0;
  }
  Var cot = Var::constant(std::move(seed));

  std::size_t first_param = graph.layers().size();
  for (std::size_t li = 0; li < graph.layers().size(); ++li) {
    if (graph.layers()[li].has_params()) {
      first_param = li;
      break;
    }
  }
  const std::size_t stop = want_input_cot ? 0 : first_param;

  for (std::size_t li = graph.layers().size(); li-- > 0;) {
    const Layer& l = graph.layers()[li];
    const LayerRecord& rec = trace.records[li];
    const bool propagate = li > stop;
    switch (l.kind) {
      case LayerKind::dense: {
        jp.blocks.push_back({li, l.kind, cot, rec.input, 1});
        if (propagate || (want_input_cot && li == 0)) cot = matmul(cot, params.slots[l.weight_slot]);
        break;
      }
      case LayerKind::conv2d: {
        const auto geo = mgslab::detail::conv_geometry(l);
        const std::size_t P = geo.positions();
        Var d = reshape(cot, {m * q * P, l.out_shape[2]});
        jp.blocks.push_back({li, l.kind, d, rec.cols, P});
        if (propagate || (want_input_cot && li == 0)) {
          cot = col2im(matmul(d, params.slots[l.weight_slot]), geo);
        }
        break;
      }
      case LayerKind::relu:
      case LayerKind::dropout: {
        if (rec.mask && (propagate || want_input_cot)) {
          auto rep = std::make_shared<Tensor>(repeat_rows(Var::constant(*rec.mask), q).value());
          cot = mul_const(cot, rep);
        }
        break;
      }
      case LayerKind::avg_pool:
        if (propagate || want_input_cot) cot = avg_unpool2(cot, mgslab::detail::pool_geometry(l));
        break;
      case LayerKind::flatten:
        break;
    }
    if (!want_input_cot && li <= first_param) break;
  }
  if (want_input_cot) jp.input_cot = cot;
  return jp;
}

namespace detail {

// Per-row weight gradients of a conv block: (mq x out_channels x K*K*C), and bias gradients (mq x out_channels).
inline std::pair<ad::Var, ad::Var> conv_row_grads(const JacobianBlock& b, std::size_t m, std::size_t q) {
  using namespace ad;
  const std::size_t P = b.positions;
  const std::size_t oc = b.cot.dim(1);
  const std::size_t patch = b.input.dim(1);
  Var d3 = reshape(b.cot, {m * q, P, oc});
  Var p3 = repeat_rows(reshape(b.input, {m, P, patch}), q);
  Var w = matmul(d3, p3, true, false);
  Var bias = reshape(sum_groups(b.cot, P), {m * q, oc});
  return {w, bias};
}

}  // namespace detail

/// tr K = sum over rows of ||d f_c(x_i)/d theta||^2, without forming K or J.
inline ad::Var kernel_trace(const JacobianPass& jp) {
  using namespace ad;
  const std::size_t m = jp.batch, q = jp.outputs;
  Var total;
  for (const auto& b : jp.blocks) {
    Var part;
    if (b.kind == LayerKind::dense) {
      // ||delta (x) a||^2 + ||delta||^2 = ||delta||^2 (||a||^2 + 1)
      Var act = repeat_rows(add_scalar(row_sumsq(b.input), 1.0), q);
      part = sum(mul(row_sumsq(b.cot), act));
    } else {
      auto [w, bias] = mgslab::detail::conv_row_grads(b, m, q);
      part = add(sum(square(w)), sum(square(bias)));
    }
    total = total.defined() ? add(total, part) : part;
  }
  return total.defined() ? total : Var::constant(Tensor::scalar(0.0));
}

/// K = J J^T as an (mq x mq) differentiable matrix, assembled layer by layer.
inline ad::Var kernel_matrix(const JacobianPass& jp) {
  using namespace ad;
  const std::size_t m = jp.batch, q = jp.outputs;
  Var total;
  for (const auto& b : jp.blocks) {
    Var part;
    if (b.kind == LayerKind::dense) {
      Var rep = repeat_rows(b.input, q);
      part = mul(matmul(b.cot, b.cot, false, true), add_scalar(matmul(rep, rep, false, true), 1.0));
    } else {
      auto [w, bias] = mgslab::detail::conv_row_grads(b, m, q);
      Var wf = reshape(w, {m * q, w.dim(1) * w.dim(2)});
      part = add(matmul(wf, wf, false, true), matmul(bias, bias, false, true));
    }
    total = total.defined() ? add(total, part) : part;
  }
  if (!total.defined()) return Var::constant(Tensor({m * q, m * q}));
  return total;
}

/// Explicit (mq x p) Jacobian from a pass, in parameter-layout column order.
inline Tensor jacobian_rows(const Graph& graph, const JacobianPass& jp) {
  const std::size_t m = jp.batch, q = jp.outputs, p = graph.param_count();
  Tensor J({m * q, p});
  for (const auto& b : jp.blocks) {
    const Layer& l = graph.layers()[b.layer];
    const auto& ws = graph.layout()[l.weight_slot];
    const auto& bs = graph.layout()[l.bias_slot];
    if (b.kind == LayerKind::dense) {
      const std::size_t out = l.out_features(), in = l.in_features();
      for (std::size_t r = 0; r < m * q; ++r) {
        const std::size_t i = r / q;
        double* row = J.data().data() + r * p;
        for (std::size_t o = 0; o < out; ++o) {
          const double d = b.cot.value()(r, o);
          double* w = row + ws.offset + o * in;
          for (std::size_t k = 0; k < in; ++k) w[k] = d * b.input.value()(i, k);
          row[bs.offset + o] = d;
        }
      }
    } else {
      ad::NoGradGuard ng;
      auto [w, bias] = mgslab::detail::conv_row_grads(b, m, q);
      const std::size_t wsz = ws.size(), bsz = bs.size();
      for (std::size_t r = 0; r < m * q; ++r) {
        double* row = J.data().data() + r * p;
        std::copy_n(w.value().data().data() + r * wsz, wsz, row + ws.offset);
        std::copy_n(bias.value().data().data() + r * bsz, bsz, row + bs.offset);
      }
    }
  }
  return J;
}

}  // namespace mgslab
