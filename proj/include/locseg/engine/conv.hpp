#ifndef LOCSEG_ENGINE_CONV_HPP
#define LOCSEG_ENGINE_CONV_HPP

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "locseg/engine/gemm.hpp"
#include "locseg/engine/tensor.hpp"

// Valid (unpadded) stride-1 2D convolution. The im2col path lowers to gemm(); the
// direct path is a plain loop nest kept as an independent cross-check.

namespace locseg {

enum class ConvAlgo { im2col, direct };

struct ConvGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t filters = 0;
  std::size_t kernel = 0;

  std::size_t out_height() const { return height - kernel + 1; }
  std::size_t out_width() const { return width - kernel + 1; }
  std::size_t positions() const { return out_height() * out_width(); }
  std::size_t patch_length() const { return channels * kernel * kernel; }
  std::size_t input_size() const { return channels * height * width; }
  std::size_t output_size() const { return filters * positions(); }
  std::size_t weight_size() const { return filters * patch_length(); }
};

namespace conv_detail {
template <typename T>
std::vector<T>& scratch(int slot) {
  static thread_local std::vector<T> buffers[3];
  return buffers[slot];
}
}  // namespace conv_detail

/// col[(c*k + i)*k + j][y*Wo + x] = in[c][y+i][x+j]
template <typename T>
void im2col(const T* in, const ConvGeometry& g, T* col) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        T* dst = col + ((c * k + i) * k + j) * ho * wo;
        for (std::size_t y = 0; y < ho; ++y) {
          const T* src = in + (c * g.height + y + i) * g.width + j;
          std::copy(src, src + wo, dst + y * wo);
        }
      }
}

/// Transposed layout: row[y*Wo + x][(c*k + i)*k + j].
template <typename T>
void im2row(const T* in, const ConvGeometry& g, T* row) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.kernel, len = g.patch_length();
  for (std::size_t y = 0; y < ho; ++y)
    for (std::size_t x = 0; x < wo; ++x) {
      T* dst = row + (y * wo + x) * len;
      for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t i = 0; i < k; ++i) {
          const T* src = in + (c * g.height + y + i) * g.width + x;
          for (std::size_t j = 0; j < k; ++j) *dst++ = src[j];
        }
    }
}

/// Scatter-adds a column matrix back onto an input-shaped gradient.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* in_grad) {
  const std::size_t ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        const T* src = col + ((c * k + i) * k + j) * ho * wo;
        for (std::size_t y = 0; y < ho; ++y) {
          T* dst = in_grad + (c * g.height + y + i) * g.width + j;
          for (std::size_t x = 0; x < wo; ++x) dst[x] += src[y * wo + x];
        }
      }
}

/// out[Cout x Ho x Wo] = bias + W * im2col(in). Weights are [Cout][C][k][k].
template <typename T>
void conv2d_forward_raw(const T* in, const ConvGeometry& g, const T* weights, const T* bias, T* out) {
  auto& col = conv_detail::scratch<T>(0);
  col.resize(g.patch_length() * g.positions());
  im2col(in, g, col.data());
  const std::size_t p = g.positions();
  gemm<T>(g.filters, p, g.patch_length(), weights, static_cast<std::ptrdiff_t>(g.patch_length()), 1, col.data(), p,
          out, p, false);
  for (std::size_t o = 0; o < g.filters; ++o) {
    T* row = out + o * p;
    for (std::size_t q = 0; q < p; ++q) row[q] += bias[o];
  }
}

/// Accumulates weight and bias gradients, and writes the input gradient when
/// input_grad is non-null (it is overwritten, not accumulated).
template <typename T>
void conv2d_backward_raw(const T* upstream, const T* in, const ConvGeometry& g, const T* weights, T* weight_grad,
                         T* bias_grad, T* input_grad) {
  const std::size_t p = g.positions(), len = g.patch_length();
  for (std::size_t o = 0; o < g.filters; ++o) {
    T acc = bias_grad[o];
    const T* row = upstream + o * p;
    for (std::size_t q = 0; q < p; ++q) acc += row[q];
    bias_grad[o] = acc;
  }
  auto& rows = conv_detail::scratch<T>(1);
  rows.resize(p * len);
  im2row(in, g, rows.data());
  gemm<T>(g.filters, len, p, upstream, static_cast<std::ptrdiff_t>(p), 1, rows.data(), len, weight_grad, len, true);
  if (input_grad) {
    auto& col = conv_detail::scratch<T>(2);
    col.resize(len * p);
    gemm<T>(len, p, g.filters, weights, 1, static_cast<std::ptrdiff_t>(len), upstream, p, col.data(), p, false);
    std::fill_n(input_grad, g.input_size(), T{0});
    col2im_add(col.data(), g, input_grad);
  }
}

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (input.rank() != 3) throw std::invalid_argument("conv2d: input must be [C,H,W], got " + shape_string(input.shape()));
  if (weights.rank() != 4 || weights.dim(2) != weights.dim(3)) {
    throw std::invalid_argument("conv2d: weights must be [Cout,Cin,k,k], got " + shape_string(weights.shape()));
  }
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), weights.dim(0), weights.dim(2)};
  if (weights.dim(1) != g.channels) {
    throw std::invalid_argument("conv2d: axis 1 (input channels) of weights is " + std::to_string(weights.dim(1)) +
                                " but input has " + std::to_string(g.channels) + " channels");
  }
  if (g.height < g.kernel) throw std::invalid_argument("conv2d: axis 1 (height) smaller than kernel");
  if (g.width < g.kernel) throw std::invalid_argument("conv2d: axis 2 (width) smaller than kernel");
  require_shape(bias.shape(), {g.filters}, "conv2d bias");
  return g;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias,
                         ConvAlgo algo = ConvAlgo::im2col) {
  const ConvGeometry g = conv_geometry(input, weights, bias);
  Tensor<T> out({g.filters, g.out_height(), g.out_width()});
  if (algo == ConvAlgo::im2col) {
    conv2d_forward_raw(input.data(), g, weights.data(), bias.data(), out.data());
    return out;
  }
  const std::size_t k = g.kernel;
  for (std::size_t o = 0; o < g.filters; ++o)
    for (std::size_t y = 0; y < g.out_height(); ++y)
      for (std::size_t x = 0; x < g.out_width(); ++x) {
        T acc{0};
        for (std::size_t c = 0; c < g.channels; ++c)
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) acc += input.at(c, y + i, x + j) * weights.at(o, c, i, j);
        out.at(o, y, x) = acc + bias[o];
      }
  return out;
}

template <typename T>
struct ConvGradients {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

template <typename T>
ConvGradients<T> conv2d_backward(const Tensor<T>& upstream, const Tensor<T>& cached_input, const Tensor<T>& weights) {
  const ConvGeometry g =
      conv_geometry(cached_input, weights, Tensor<T>({weights.rank() == 4 ? weights.dim(0) : 0}));
  require_shape(upstream.shape(), {g.filters, g.out_height(), g.out_width()}, "conv2d upstream gradient");
  ConvGradients<T> grads{Tensor<T>(cached_input.shape()), Tensor<T>(weights.shape()), Tensor<T>({g.filters})};
  conv2d_backward_raw(upstream.data(), cached_input.data(), g, weights.data(), grads.weights.data(), grads.bias.data(),
                      grads.input.data());
  return grads;
}

}  // namespace locseg

#endif  // LOCSEG_ENGINE_CONV_HPP
