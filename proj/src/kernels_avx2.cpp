// AVX2 + FMA row kernels. This translation unit is compiled with -mavx2 -mfma and is
// only reached after a runtime CPU check.

#include <immintrin.h>

#include "usplat/kernels.hpp"

namespace usplat::kernels {

namespace {

// Cephes-style expf: range reduction by ln2 then a degree-5 polynomial.
// Inputs below -87.3 flush to 0; that is the only range the rasterizer produces.
inline __m256 exp256(__m256 x) {
  const __m256 hi = _mm256_set1_ps(88.3762626647949f);
  const __m256 lo = _mm256_set1_ps(-87.3365478515625f);
  const __m256 underflow = _mm256_cmp_ps(x, lo, _CMP_LT_OQ);
  x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);

  __m256 fx = _mm256_fmadd_ps(x, _mm256_set1_ps(1.44269504088896341f), _mm256_set1_ps(0.5f));
  fx = _mm256_floor_ps(fx);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693359375f), x);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.12194440e-4f), x);

  __m256 y = _mm256_set1_ps(1.9875691500e-4f);
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
  y = _mm256_fmadd_ps(y, _mm256_mul_ps(x, x), _mm256_add_ps(x, _mm256_set1_ps(1.0f)));

  __m256i e = _mm256_cvttps_epi32(fx);
  e = _mm256_slli_epi32(_mm256_add_epi32(e, _mm256_set1_epi32(127)), 23);
  y = _mm256_mul_ps(y, _mm256_castsi256_ps(e));
  return _mm256_andnot_ps(underflow, y);
}

inline float hsum(__m256 v) {
  __m128 s = _mm_add_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps(v, 1));
  s = _mm_add_ps(s, _mm_movehl_ps(s, s));
  s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 0x55));
  return _mm_cvtss_f32(s);
}

inline __m256 lane_offsets(float d0, float dd, int base) {
  const __m256 idx = _mm256_setr_ps(0.f, 1.f, 2.f, 3.f, 4.f, 5.f, 6.f, 7.f);
  return _mm256_fmadd_ps(_mm256_add_ps(idx, _mm256_set1_ps(float(base))), _mm256_set1_ps(dd),
                         _mm256_set1_ps(d0));
}

inline __m256 weights(const RowQuadratic<float>& q, __m256 d, __m256 alpha) {
  __m256 quad = _mm256_fmadd_ps(_mm256_set1_ps(q.a), d, _mm256_set1_ps(q.b));
  quad = _mm256_fmadd_ps(quad, d, _mm256_set1_ps(q.c));
  return _mm256_mul_ps(alpha, exp256(_mm256_mul_ps(quad, _mm256_set1_ps(-0.5f))));
}

// Lanes [0, r) set, r in [1, 7].
inline __m256i tail_mask(int r) {
  return _mm256_cmpgt_epi32(_mm256_set1_epi32(r), _mm256_setr_epi32(0, 1, 2, 3, 4, 5, 6, 7));
}

void row_weights_avx2(const RowQuadratic<float>& q, float d0, float dd, int n, float alpha,
                      float* out) {
  const __m256 va = _mm256_set1_ps(alpha);
  int k = 0;
  for (; k + 8 <= n; k += 8) _mm256_storeu_ps(out + k, weights(q, lane_offsets(d0, dd, k), va));
  if (k < n) _mm256_maskstore_ps(out + k, tail_mask(n - k), weights(q, lane_offsets(d0, dd, k), va));
}

RowGradSums<float> row_backward_avx2(const RowQuadratic<float>& q, float d0, float dd, int n,
                                     float alpha, float color, const float* g,
                                     const float* chat) {
  const __m256 va = _mm256_set1_ps(alpha);
  const __m256 vc = _mm256_set1_ps(color);
  const __m256 half = _mm256_set1_ps(-0.5f);
  __m256 sk = _mm256_setzero_ps(), skd = sk, skdd = sk, sga = sk;
  int k = 0;
  for (; k + 8 <= n; k += 8) {
    const __m256 d = lane_offsets(d0, dd, k);
    const __m256 ga = _mm256_mul_ps(_mm256_loadu_ps(g + k), weights(q, d, va));
    const __m256 kk = _mm256_mul_ps(_mm256_mul_ps(half, ga), _mm256_sub_ps(vc, _mm256_loadu_ps(chat + k)));
    const __m256 kd = _mm256_mul_ps(kk, d);
    sk = _mm256_add_ps(sk, kk);
    skd = _mm256_add_ps(skd, kd);
    skdd = _mm256_fmadd_ps(kd, d, skdd);
    sga = _mm256_add_ps(sga, ga);
  }
  if (k < n) {
    const __m256i mask = tail_mask(n - k);
    const __m256 d = lane_offsets(d0, dd, k);
    const __m256 w = _mm256_and_ps(weights(q, d, va), _mm256_castsi256_ps(mask));
    const __m256 ga = _mm256_mul_ps(_mm256_maskload_ps(g + k, mask), w);
    const __m256 kk = _mm256_mul_ps(_mm256_mul_ps(half, ga), _mm256_sub_ps(vc, _mm256_maskload_ps(chat + k, mask)));
    const __m256 kd = _mm256_mul_ps(kk, d);
    sk = _mm256_add_ps(sk, kk);
    skd = _mm256_add_ps(skd, kd);
    skdd = _mm256_fmadd_ps(kd, d, skdd);
    sga = _mm256_add_ps(sga, ga);
  }
  return {hsum(sk), hsum(skd), hsum(skdd), hsum(sga)};
}

const KernelTable kAvx2{"avx2", &row_weights_avx2, &row_backward_avx2};

}  // namespace

const KernelTable* avx2_kernels() { return &kAvx2; }

}  // namespace usplat::kernels
