#ifndef LOCSEG_ENGINE_GEMM_HPP
#define LOCSEG_ENGINE_GEMM_HPP

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

#include "locseg/engine/parallel.hpp"

// Blocked matrix multiply C = A*B (or C += A*B) whose result is position independent:
// every C element is accumulated lane-wise over k = 0..K-1 in order, starting from
// zero or from the existing C value. Vectorization runs across columns of C only, so
// the value of C[i,j] depends on row i of A and column j of B and nothing else. This
// is what lets a batch of 1 and a batch of 256, or a patch and a dense feature map,
// produce bitwise-identical numbers.

namespace locseg::gemm_detail {

template <typename T>
struct VecType;
template <>
struct VecType<float> {
  typedef float type __attribute__((vector_size(64)));
};
template <>
struct VecType<double> {
  typedef double type __attribute__((vector_size(64)));
};

template <typename T>
inline constexpr std::size_t kLanes = 64 / sizeof(T);
inline constexpr std::size_t kMR = 12;
template <typename T>
inline constexpr std::size_t kNR = 2 * kLanes<T>;
inline constexpr std::size_t kKC = 256;
inline constexpr std::size_t kNC = 512;

template <typename T>
inline void micro_kernel(std::size_t kc, const T* __restrict ap, const T* __restrict bp, T* c, std::size_t ldc,
                         std::size_t mr, std::size_t nr, bool load_c) {
  using V = typename VecType<T>::type;
  constexpr std::size_t L = kLanes<T>;
  constexpr std::size_t NR = kNR<T>;
  V acc[kMR][2];
  if (load_c) {
    if (mr == kMR && nr == NR) {
      for (std::size_t i = 0; i < kMR; ++i) {
        std::memcpy(&acc[i][0], c + i * ldc, sizeof(V));
        std::memcpy(&acc[i][1], c + i * ldc + L, sizeof(V));
      }
    } else {
      T tmp[kMR][NR] = {};
      for (std::size_t i = 0; i < mr; ++i) std::memcpy(tmp[i], c + i * ldc, nr * sizeof(T));
      for (std::size_t i = 0; i < kMR; ++i) {
        std::memcpy(&acc[i][0], tmp[i], sizeof(V));
        std::memcpy(&acc[i][1], tmp[i] + L, sizeof(V));
      }
    }
  } else {
    for (std::size_t i = 0; i < kMR; ++i) acc[i][0] = acc[i][1] = V{};
  }
  for (std::size_t p = 0; p < kc; ++p) {
    V b0, b1;
    std::memcpy(&b0, bp, sizeof(V));
    std::memcpy(&b1, bp + L, sizeof(V));
    bp += NR;
    for (std::size_t i = 0; i < kMR; ++i) {
      const T a = ap[i];
      acc[i][0] += a * b0;
      acc[i][1] += a * b1;
    }
    ap += kMR;
  }
  if (mr == kMR && nr == NR) {
    for (std::size_t i = 0; i < kMR; ++i) {
      std::memcpy(c + i * ldc, &acc[i][0], sizeof(V));
      std::memcpy(c + i * ldc + L, &acc[i][1], sizeof(V));
    }
  } else {
    T tmp[kMR][NR];
    for (std::size_t i = 0; i < kMR; ++i) {
      std::memcpy(tmp[i], &acc[i][0], sizeof(V));
      std::memcpy(tmp[i] + L, &acc[i][1], sizeof(V));
    }
    for (std::size_t i = 0; i < mr; ++i) std::memcpy(c + i * ldc, tmp[i], nr * sizeof(T));
  }
}

template <typename T>
struct PackBuffers {
  std::vector<T> a;
  std::vector<T> b;
};

template <typename T>
PackBuffers<T>& pack_buffers() {
  static thread_local PackBuffers<T> buffers;
  return buffers;
}

}  // namespace locseg::gemm_detail

namespace locseg {

/// C[m x n] (+)= A[m x k] * B[k x n].
/// A is addressed as a[i * a_row_stride + p * a_col_stride], so a transposed operand
/// costs nothing extra. B and C are row-major with leading dimensions ldb and ldc.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, std::ptrdiff_t a_row_stride,
          std::ptrdiff_t a_col_stride, const T* b, std::size_t ldb, T* c, std::size_t ldc, bool accumulate) {
  using namespace gemm_detail;
  constexpr std::size_t NR = kNR<T>;
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < m; ++i) std::fill_n(c + i * ldc, n, T{0});
    return;
  }
  auto& buf = pack_buffers<T>();
  const std::size_t m_tiles = (m + kMR - 1) / kMR;
  for (std::size_t jc = 0; jc < n; jc += kNC) {
    const std::size_t nc = std::min(kNC, n - jc);
    const std::size_t panels = (nc + NR - 1) / NR;
    for (std::size_t pc = 0; pc < k; pc += kKC) {
      const std::size_t kc = std::min(kKC, k - pc);

      buf.b.resize(panels * kc * NR);
      for (std::size_t q = 0; q < panels; ++q) {
        const std::size_t j0 = jc + q * NR;
        const std::size_t w = std::min(NR, n - j0);
        T* dst = buf.b.data() + q * kc * NR;
        for (std::size_t p = 0; p < kc; ++p, dst += NR) {
          const T* src = b + (pc + p) * ldb + j0;
          std::memcpy(dst, src, w * sizeof(T));
          std::fill(dst + w, dst + NR, T{0});
        }
      }
      buf.a.resize(m_tiles * kc * kMR);
      for (std::size_t t = 0; t < m_tiles; ++t) {
        T* dst = buf.a.data() + t * kc * kMR;
        const std::size_t i0 = t * kMR;
        const std::size_t rows = std::min(kMR, m - i0);
        for (std::size_t p = 0; p < kc; ++p, dst += kMR) {
          const T* src = a + static_cast<std::ptrdiff_t>(i0) * a_row_stride +
                         static_cast<std::ptrdiff_t>(pc + p) * a_col_stride;
          std::size_t i = 0;
          for (; i < rows; ++i) dst[i] = src[static_cast<std::ptrdiff_t>(i) * a_row_stride];
          for (; i < kMR; ++i) dst[i] = T{0};
        }
      }

      const bool load_c = accumulate || pc > 0;
      const T* packed_a = buf.a.data();
      const T* packed_b = buf.b.data();
      parallel_for(m_tiles * panels, [&](std::size_t begin, std::size_t end) {
        for (std::size_t idx = begin; idx < end; ++idx) {
          const std::size_t t = idx / panels;
          const std::size_t q = idx % panels;
          const std::size_t i0 = t * kMR;
          const std::size_t j0 = jc + q * NR;
          micro_kernel<T>(kc, packed_a + t * kc * kMR, packed_b + q * kc * NR, c + i0 * ldc + j0, ldc,
                          std::min(kMR, m - i0), std::min(NR, n - j0), load_c);
        }
      });
    }
  }
}

/// Plain triple loop with the same per-element summation order; test reference.
template <typename T>
void gemm_reference(std::size_t m, std::size_t n, std::size_t k, const T* a, std::ptrdiff_t a_row_stride,
                    std::ptrdiff_t a_col_stride, const T* b, std::size_t ldb, T* c, std::size_t ldc,
                    bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * ldc + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) {
        acc += a[static_cast<std::ptrdiff_t>(i) * a_row_stride + static_cast<std::ptrdiff_t>(p) * a_col_stride] *
               b[p * ldb + j];
      }
      c[i * ldc + j] = acc;
    }
  }
}

}  // namespace locseg

#endif  // LOCSEG_ENGINE_GEMM_HPP
