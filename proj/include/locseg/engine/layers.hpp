#ifndef LOCSEG_ENGINE_LAYERS_HPP
#define LOCSEG_ENGINE_LAYERS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "locseg/engine/gemm.hpp"
#include "locseg/engine/rng.hpp"
#include "locseg/engine/tensor.hpp"

namespace locseg {

enum class LayerKind { conv2d, fully_connected, relu, dropout, concat, softmax };

/// Declarative layer description. There is deliberately no pooling kind.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t filters = 0;  // conv2d
  std::size_t kernel = 0;   // conv2d
  std::size_t units = 0;    // fully_connected
  double drop_probability = 0.0;
};

enum class Mode { train, infer };

// ---------------------------------------------------------------- fully connected

/// out = W x + b for a single sample.
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  if (weights.rank() != 2) throw std::invalid_argument("fully_connected: weights must be [M,N]");
  const std::size_t m = weights.dim(0), n = weights.dim(1);
  if (input.size() != n) {
    throw std::invalid_argument("fully_connected: input length " + std::to_string(input.size()) +
                                " does not match weight column count " + std::to_string(n));
  }
  require_shape(bias.shape(), {m}, "fully_connected bias");
  Tensor<T> out({m});
  gemm<T>(m, 1, n, weights.data(), static_cast<std::ptrdiff_t>(n), 1, input.data(), 1, out.data(), 1, false);
  for (std::size_t i = 0; i < m; ++i) out[i] += bias[i];
  return out;
}

template <typename T>
struct DenseGradients {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

template <typename T>
DenseGradients<T> fully_connected_backward(const Tensor<T>& upstream, const Tensor<T>& cached_input,
                                           const Tensor<T>& weights) {
  if (weights.rank() != 2) throw std::invalid_argument("fully_connected: weights must be [M,N]");
  const std::size_t m = weights.dim(0), n = weights.dim(1);
  if (cached_input.size() != n) throw std::invalid_argument("fully_connected: input length mismatch");
  if (upstream.size() != m) throw std::invalid_argument("fully_connected: upstream length mismatch");
  DenseGradients<T> g{Tensor<T>({n}), Tensor<T>({m, n}), Tensor<T>({m})};
  for (std::size_t i = 0; i < m; ++i) {
    g.bias[i] = upstream[i];
    for (std::size_t j = 0; j < n; ++j) g.weights.at(i, j) = upstream[i] * cached_input[j];
  }
  gemm<T>(n, 1, m, weights.data(), 1, static_cast<std::ptrdiff_t>(n), upstream.data(), 1, g.input.data(), 1, false);
  return g;
}

/// Batched forward in feature-major layout: out_t[M x B] = W[M x N] * in_t[N x B] + b.
template <typename T>
void fc_forward_batch(const T* in_t, std::size_t n, std::size_t batch, const T* weights, const T* bias, std::size_t m,
                      T* out_t) {
  gemm<T>(m, batch, n, weights, static_cast<std::ptrdiff_t>(n), 1, in_t, batch, out_t, batch, false);
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out_t + i * batch;
    for (std::size_t b = 0; b < batch; ++b) row[b] += bias[i];
  }
}

/// Batched backward. in_rows is the sample-major copy of the layer input [B x N].
/// Weight and bias gradients accumulate in sample order; in_grad_t is overwritten when non-null.
template <typename T>
void fc_backward_batch(const T* upstream_t, const T* in_rows, std::size_t n, std::size_t batch, const T* weights,
                       std::size_t m, T* weight_grad, T* bias_grad, T* in_grad_t) {
  for (std::size_t i = 0; i < m; ++i) {
    T acc = bias_grad[i];
    const T* row = upstream_t + i * batch;
    for (std::size_t b = 0; b < batch; ++b) acc += row[b];
    bias_grad[i] = acc;
  }
  gemm<T>(m, n, batch, upstream_t, static_cast<std::ptrdiff_t>(batch), 1, in_rows, n, weight_grad, n, true);
  if (in_grad_t) {
    gemm<T>(n, batch, m, weights, 1, static_cast<std::ptrdiff_t>(n), upstream_t, batch, in_grad_t, batch, false);
  }
}

// ---------------------------------------------------------------- relu

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? input[i] : T{0};
  return out;
}

/// Passes the gradient where the forward input was strictly positive.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& upstream, const Tensor<T>& cached_input) {
  require_shape(upstream.shape(), cached_input.shape(), "relu upstream gradient");
  Tensor<T> out(upstream.shape());
  for (std::size_t i = 0; i < upstream.size(); ++i) out[i] = cached_input[i] > T{0} ? upstream[i] : T{0};
  return out;
}

template <typename T>
void relu_inplace(T* values, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) values[i] = values[i] > T{0} ? values[i] : T{0};
}

/// Masks a gradient by a post-activation buffer (output > 0 iff input > 0).
template <typename T>
void relu_backward_inplace(T* grad, const T* activation, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!(activation[i] > T{0})) grad[i] = T{0};
}

// ---------------------------------------------------------------- dropout

inline void check_drop_probability(double p) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("dropout: drop probability must lie in [0, 1), got " + std::to_string(p));
  }
}

/// Inverted dropout scale factors for n elements: 0 with probability p, else 1/(1-p).
template <typename T>
void dropout_mask(std::size_t n, double p, CounterRng rng, T* mask) {
  check_drop_probability(p);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < n; ++i) mask[i] = rng.uniform() < p ? T{0} : keep_scale;
}

template <typename T>
struct DropoutResult {
  Tensor<T> output;
  Tensor<T> mask;  // per-element multiplier; all ones in infer mode
};

template <typename T>
DropoutResult<T> dropout(const Tensor<T>& input, double p, Mode mode, CounterRng rng) {
  check_drop_probability(p);
  DropoutResult<T> r{input, Tensor<T>(input.shape(), T{1})};
  if (mode == Mode::infer || p == 0.0) return r;
  dropout_mask(input.size(), p, rng, r.mask.data());
  for (std::size_t i = 0; i < input.size(); ++i) r.output[i] = input[i] * r.mask[i];
  return r;
}

// ---------------------------------------------------------------- softmax + cross-entropy

template <typename T>
struct SoftmaxLoss {
  T loss{};
  std::array<T, 2> probabilities{};
  std::array<T, 2> logit_grad{};
};

/// Two-class softmax with cross-entropy, stabilized by subtracting the max logit.
template <typename T>
SoftmaxLoss<T> softmax_cross_entropy(const T* logits, int label) {
  if (!std::isfinite(logits[0]) || !std::isfinite(logits[1])) {
    throw std::invalid_argument("softmax_cross_entropy: non-finite logits");
  }
  if (label != 0 && label != 1) throw std::invalid_argument("softmax_cross_entropy: label must be 0 or 1");
  const T mx = std::max(logits[0], logits[1]);
  const T e0 = std::exp(logits[0] - mx), e1 = std::exp(logits[1] - mx);
  const T sum = e0 + e1;
  SoftmaxLoss<T> r;
  r.probabilities = {e0 / sum, e1 / sum};
  r.loss = mx + std::log(sum) - logits[label];
  r.logit_grad = {r.probabilities[0] - (label == 0 ? T{1} : T{0}), r.probabilities[1] - (label == 1 ? T{1} : T{0})};
  return r;
}

template <typename T>
SoftmaxLoss<T> softmax_cross_entropy(const Tensor<T>& logits, int label) {
  if (logits.size() != 2) {
    throw std::invalid_argument("softmax_cross_entropy: expected exactly 2 logits, got " +
                                std::to_string(logits.size()));
  }
  return softmax_cross_entropy(logits.data(), label);
}

/// Probabilities only (inference path).
template <typename T>
std::array<T, 2> softmax2(T z0, T z1) {
  const T mx = std::max(z0, z1);
  const T e0 = std::exp(z0 - mx), e1 = std::exp(z1 - mx);
  const T sum = e0 + e1;
  return {e0 / sum, e1 / sum};
}

}  // namespace locseg

#endif  // LOCSEG_ENGINE_LAYERS_HPP
