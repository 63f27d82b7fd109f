#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "mgslab/error.hpp"
#include "mgslab/graph.hpp"
#include "mgslab/rng.hpp"

namespace mgslab {

enum class ArchKind { fcn, lenet };

inline std::string_view to_string(ArchKind k) { return k == ArchKind::fcn ? "fcn" : "lenet"; }

inline ArchKind parse_arch(std::string_view s) {
  if (s == "fcn") return ArchKind::fcn;
  if (s == "lenet") return ArchKind::lenet;
  throw ConfigError("unknown architecture '" + std::string(s) + "' (expected fcn or lenet)");
}

struct ArchSpec {
  ArchKind kind = ArchKind::fcn;
  std::size_t hidden_layers = 6;  // fcn only
  std::size_t width = 300;        // fcn only
  double dropout_rate = 0.0;      // inserted between fully connected layers when > 0
};

/// Builds the network. LeNet accepts (H, W) or (H, W, C) image inputs; FCN flattens whatever it gets.
inline Graph build(const ArchSpec& arch, Shape input_shape, std::size_t q) {
  if (q == 0) throw ShapeError("output", "number of outputs must be positive");
  if (!(arch.dropout_rate >= 0.0 && arch.dropout_rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1)");
  }
  const bool drop = arch.dropout_rate > 0.0;
  if (arch.kind == ArchKind::fcn) {
    if (arch.hidden_layers == 0 || arch.width == 0) throw ConfigError("fcn needs positive depth and width");
    Graph g(std::move(input_shape));
    if (g.input_shape().size() > 1) g.flatten();
    for (std::size_t l = 0; l < arch.hidden_layers; ++l) {
      g.dense(arch.width).relu();
      if (drop) g.dropout(arch.dropout_rate);
    }
    g.dense(q);
    return g;
  }
  if (input_shape.size() == 2) input_shape.push_back(1);
  if (input_shape.size() != 3) {
    throw ShapeError("input", "lenet needs an image input (H, W[, C]), got " + shape_string(input_shape));
  }
  Graph g(std::move(input_shape));
  g.conv2d(6, 5).relu().avg_pool().conv2d(16, 5).relu().avg_pool().flatten();
  g.dense(120).relu();
  if (drop) g.dropout(arch.dropout_rate);
  g.dense(84).relu();
  if (drop) g.dropout(arch.dropout_rate);
  g.dense(q);
  return g;
}

struct InitSpec {
  std::uint64_t seed = 0;
};

/// He-normal weights (std = sqrt(2 / fan_in)) and zero biases.
inline ParamVector init(const Graph& graph, const InitSpec& spec) {
  ParamVector p = ParamVector::zeros(graph.layout());
  Rng rng(spec.seed);
  for (const auto& layer : graph.layers()) {
    if (!layer.has_params()) continue;
    const ParamSlot& w = graph.layout()[layer.weight_slot];
    const double sd = std::sqrt(2.0 / static_cast<double>(w.shape[1]));
    for (std::size_t i = 0; i < w.size(); ++i) p.values()[w.offset + i] = sd * rng.normal();
  }
  return p;
}

}  // namespace mgslab
