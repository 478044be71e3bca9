#pragma once

// Per-row inner loops of the rasterizer.
//
// Along one image row of a Gaussian footprint the squared Mahalanobis distance is a
// quadratic in the in-plane offset d = x1 - mu1:
//
//     q(d) = (a d + b) d + c,      d_k = d0 + k * dd,   k = 0 .. n-1
//
// `row_weights` writes alpha * exp(-q/2) for each pixel; `row_backward` reduces the
// per-pixel backward terms needed by the gradient pass. The templates below are the
// scalar reference; SIMD variants live in kernels_avx2.cpp / kernels_neon.cpp and are
// picked at runtime by `active_kernels()`.

#include <cmath>
#include <string_view>

namespace usplat::kernels {

template <typename T>
struct RowQuadratic {
  T a, b, c;
};

/// Row sums with k_j = -0.5 * g_j * a_j * (color - chat_j), g_j = dLoss/dpixel / opacity_sum.
template <typename T>
struct RowGradSums {
  T k = 0;    // sum k_j
  T kd = 0;   // sum k_j d_j
  T kdd = 0;  // sum k_j d_j^2
  T ga = 0;   // sum g_j a_j
};

template <typename T>
void row_weights_ref(const RowQuadratic<T>& q, T d0, T dd, int n, T alpha, T* out) {
  for (int k = 0; k < n; ++k) {
    const T d = d0 + T(k) * dd;
    const T quad = (q.a * d + q.b) * d + q.c;
    out[k] = alpha * std::exp(T(-0.5) * quad);
  }
}

template <typename T>
RowGradSums<T> row_backward_ref(const RowQuadratic<T>& q, T d0, T dd, int n, T alpha, T color,
                                const T* grad_over_den, const T* chat) {
  RowGradSums<T> s;
  for (int k = 0; k < n; ++k) {
    const T d = d0 + T(k) * dd;
    const T quad = (q.a * d + q.b) * d + q.c;
    const T a = alpha * std::exp(T(-0.5) * quad);
    const T ga = grad_over_den[k] * a;
    const T kk = T(-0.5) * ga * (color - chat[k]);
    s.k += kk;
    s.kd += kk * d;
    s.kdd += kk * d * d;
    s.ga += ga;
  }
  return s;
}

using RowWeightsFn = void (*)(const RowQuadratic<float>&, float, float, int, float, float*);
using RowBackwardFn = RowGradSums<float> (*)(const RowQuadratic<float>&, float, float, int, float,
                                             float, const float*, const float*);

struct KernelTable {
  std::string_view name;
  RowWeightsFn row_weights;
  RowBackwardFn row_backward;
};

const KernelTable& scalar_kernels();
/// nullptr when the variant was not compiled for this target.
const KernelTable* avx2_kernels();
const KernelTable* neon_kernels();

/// True when the running CPU can execute the given table.
bool cpu_supports(const KernelTable& table);

/// Best supported table. USPLAT_KERNELS=scalar|avx2|neon overrides the choice.
const KernelTable& active_kernels();

}  // namespace usplat::kernels
