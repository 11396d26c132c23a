#pragma once

// Small convolutional building blocks with hand-written backward passes.
// Parameters of a network live in one flat buffer (ParamSet) so that copies,
// checksums, optimiser steps and checkpointing all operate on plain vectors.

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "istn/common.hpp"
#include "istn/image.hpp"

namespace istn::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

/// C x H x W activations.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  std::span<double> plane(int c) { return {data.data() + c * plane_size(), plane_size()}; }
  std::span<const double> plane(int c) const { return {data.data() + c * plane_size(), plane_size()}; }

  static FeatureMap from_image(const Image& img) {
    FeatureMap f(1, img.height(), img.width());
    std::copy(img.values().begin(), img.values().end(), f.data.begin());
    return f;
  }

  static FeatureMap stack(const Image& a, const Image& b) {
    require_same_shape(a, b, "stack");
    FeatureMap f(2, a.height(), a.width());
    std::copy(a.values().begin(), a.values().end(), f.data.begin());
    std::copy(b.values().begin(), b.values().end(), f.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
    return f;
  }

  Image channel_image(int c) const {
    Image img(height, width);
    const auto p = plane(c);
    std::copy(p.begin(), p.end(), img.values().begin());
    return img;
  }
};

struct TensorSpec {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;

  friend bool operator==(const TensorSpec&, const TensorSpec&) = default;
};

/// Named tensors packed into one contiguous buffer.
class ParamSet {
 public:
  std::size_t add(std::string name, std::vector<int> shape) {
    const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                          [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    TensorSpec spec{std::move(name), std::move(shape), values_.size(), n};
    values_.resize(values_.size() + n, 0.0);
    specs_.push_back(std::move(spec));
    return specs_.back().offset;
  }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  const std::vector<TensorSpec>& specs() const { return specs_; }

  const TensorSpec& spec(std::string_view name) const {
    for (const auto& s : specs_) {
      if (s.name == name) return s;
    }
    throw DataError("unknown parameter tensor '" + std::string(name) + "'");
  }

  std::span<double> tensor(std::string_view name) {
    const auto& s = spec(name);
    return {values_.data() + s.offset, s.size};
  }
  std::span<const double> tensor(std::string_view name) const {
    const auto& s = spec(name);
    return {values_.data() + s.offset, s.size};
  }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::vector<TensorSpec> specs_;
  std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Layers. Each layer is a descriptor with offsets into a ParamSet; forward and
// backward are free functions over (params, grads) spans.

struct Conv2d {
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
  std::size_t weight = 0;  // out x in x 3 x 3
  std::size_t bias = 0;

  static Conv2d create(ParamSet& ps, const std::string& name, int in, int out, int stride) {
    Conv2d c{in, out, stride, 0, 0};
    c.weight = ps.add(name + ".weight", {out, in, 3, 3});
    c.bias = ps.add(name + ".bias", {out});
    return c;
  }

  int out_extent(int in_extent) const { return (in_extent - 1) / stride + 1; }
  std::size_t weight_count() const { return static_cast<std::size_t>(out_channels) * in_channels * 9; }
};

/// im2col buffer kept from the forward pass for the backward pass.
struct ConvCache {
  RowMatrix columns;
  int in_height = 0;
  int in_width = 0;
};

namespace detail {

inline void im2col(const FeatureMap& in, int stride, int out_h, int out_w, RowMatrix& col) {
  col.resize(static_cast<Eigen::Index>(in.channels) * 9, static_cast<Eigen::Index>(out_h) * out_w);
  for (int c = 0; c < in.channels; ++c) {
    const auto src = in.plane(c);
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* row = col.row((c * 3 + ky) * 3 + kx).data();
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + ky - 1;
          double* dst = row + static_cast<std::size_t>(oy) * out_w;
          if (iy < 0 || iy >= in.height) {
            std::fill(dst, dst + out_w, 0.0);
            continue;
          }
          const double* line = src.data() + static_cast<std::size_t>(iy) * in.width;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride + kx - 1;
            dst[ox] = (ix >= 0 && ix < in.width) ? line[ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const RowMatrix& col, int stride, int out_h, int out_w, FeatureMap& grad_in) {
  for (int c = 0; c < grad_in.channels; ++c) {
    auto dst = grad_in.plane(c);
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = col.row((c * 3 + ky) * 3 + kx).data();
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= grad_in.height) continue;
          double* line = dst.data() + static_cast<std::size_t>(iy) * grad_in.width;
          const double* src = row + static_cast<std::size_t>(oy) * out_w;
          for (int ox = 0; ox < out_w; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix >= 0 && ix < grad_in.width) line[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 3x3 convolution, zero padding 1.
inline FeatureMap conv2d_forward(const Conv2d& layer, std::span<const double> params, const FeatureMap& in,
                                 ConvCache& cache) {
  if (in.channels != layer.in_channels) throw DataError("conv2d: channel mismatch");
  const int oh = layer.out_extent(in.height), ow = layer.out_extent(in.width);
  detail::im2col(in, layer.stride, oh, ow, cache.columns);
  cache.in_height = in.height;
  cache.in_width = in.width;
  FeatureMap out(layer.out_channels, oh, ow);
  // products on owned (aligned) copies
  const RowMatrix w =
      ConstMatrixMap(params.data() + layer.weight, layer.out_channels, static_cast<Eigen::Index>(layer.in_channels) * 9);
  const RowMatrix y = w * cache.columns;
  MatrixMap(out.data.data(), layer.out_channels, static_cast<Eigen::Index>(oh) * ow) = y;
  for (int c = 0; c < layer.out_channels; ++c) {
    auto plane = out.plane(c);
    for (auto& v : plane) v += params[layer.bias + c];
  }
  return out;
}

/// Accumulates parameter gradients into `grads`; returns dL/dinput when asked.
inline FeatureMap conv2d_backward(const Conv2d& layer, std::span<const double> params, const ConvCache& cache,
                                  const FeatureMap& grad_out, std::span<double> grads, bool need_input_grad) {
  const Eigen::Index k = static_cast<Eigen::Index>(layer.in_channels) * 9;
  const Eigen::Index n = static_cast<Eigen::Index>(grad_out.height) * grad_out.width;
  const RowMatrix gy = ConstMatrixMap(grad_out.data.data(), layer.out_channels, n);
  const RowMatrix gw = gy * cache.columns.transpose();
  MatrixMap(grads.data() + layer.weight, layer.out_channels, k) += gw;
  for (int c = 0; c < layer.out_channels; ++c) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) acc += gy(c, i);
    grads[layer.bias + c] += acc;
  }
  if (!need_input_grad) return {};
  const RowMatrix w = ConstMatrixMap(params.data() + layer.weight, layer.out_channels, k);
  const RowMatrix gcol = w.transpose() * gy;
  FeatureMap grad_in(layer.in_channels, cache.in_height, cache.in_width);
  detail::col2im_add(gcol, layer.stride, grad_out.height, grad_out.width, grad_in);
  return grad_in;
}

struct Linear {
  int in_features = 0;
  int out_features = 0;
  std::size_t weight = 0;  // out x in
  std::size_t bias = 0;

  static Linear create(ParamSet& ps, const std::string& name, int in, int out) {
    Linear l{in, out, 0, 0};
    l.weight = ps.add(name + ".weight", {out, in});
    l.bias = ps.add(name + ".bias", {out});
    return l;
  }
};

inline std::vector<double> linear_forward(const Linear& layer, std::span<const double> params,
                                          std::span<const double> x) {
  std::vector<double> y(layer.out_features);
  for (int o = 0; o < layer.out_features; ++o) {
    const double* w = params.data() + layer.weight + static_cast<std::size_t>(o) * layer.in_features;
    double acc = params[layer.bias + o];
    for (int i = 0; i < layer.in_features; ++i) acc += w[i] * x[i];
    y[o] = acc;
  }
  return y;
}

inline std::vector<double> linear_backward(const Linear& layer, std::span<const double> params,
                                           std::span<const double> x, std::span<const double> grad_out,
                                           std::span<double> grads) {
  std::vector<double> gx(layer.in_features, 0.0);
  for (int o = 0; o < layer.out_features; ++o) {
    const double g = grad_out[o];
    grads[layer.bias + o] += g;
    if (g == 0.0) continue;
    const std::size_t row = layer.weight + static_cast<std::size_t>(o) * layer.in_features;
    for (int i = 0; i < layer.in_features; ++i) {
      grads[row + i] += g * x[i];
      gx[i] += g * params[row + i];
    }
  }
  return gx;
}

inline constexpr double kLeakySlope = 0.1;

inline void leaky_relu_inplace(std::span<double> v) {
  for (auto& x : v) x = x > 0.0 ? x : kLeakySlope * x;
}

/// Backward through leaky ReLU given the activation output (sign is preserved).
inline void leaky_relu_backward_inplace(std::span<const double> activated, std::span<double> grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= activated[i] > 0.0 ? 1.0 : kLeakySlope;
}

inline std::vector<double> global_average_pool(const FeatureMap& f) {
  std::vector<double> out(f.channels);
  const double inv = 1.0 / static_cast<double>(f.plane_size());
  for (int c = 0; c < f.channels; ++c) {
    const auto p = f.plane(c);
    out[c] = std::accumulate(p.begin(), p.end(), 0.0) * inv;
  }
  return out;
}

inline FeatureMap global_average_pool_backward(std::span<const double> grad, int channels, int height, int width) {
  FeatureMap g(channels, height, width);
  const double inv = 1.0 / (static_cast<double>(height) * width);
  for (int c = 0; c < channels; ++c) {
    auto p = g.plane(c);
    std::fill(p.begin(), p.end(), grad[c] * inv);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Initialisation and optimisation

/// Kaiming-uniform weights for leaky-ReLU fan-in, zero biases.
inline void init_kaiming(std::span<double> values, std::size_t offset, std::size_t count, int fan_in, Rng& rng) {
  const double gain2 = 2.0 / (1.0 + kLeakySlope * kLeakySlope);
  const double bound = std::sqrt(3.0 * gain2 / fan_in);
  for (std::size_t i = 0; i < count; ++i) values[offset + i] = rng.uniform(-bound, bound);
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Per-parameter adaptive moment estimation.
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void set_learning_rate(double lr) { cfg_.learning_rate = lr; }

  void step(std::span<double> values, std::span<const double> grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < values.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
      const double mhat = m_[i] / c1;
      const double vhat = v_[i] / c2;
      values[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

}  // namespace istn::nn
