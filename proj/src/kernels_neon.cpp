// NEON row kernels for aarch64. Same polynomial expf as the AVX2 variant.

#include <arm_neon.h>

#include "usplat/kernels.hpp"

namespace usplat::kernels {

namespace {

inline float32x4_t exp128(float32x4_t x) {
  const float32x4_t lo = vdupq_n_f32(-87.3365478515625f);
  const uint32x4_t underflow = vcltq_f32(x, lo);
  x = vminq_f32(vmaxq_f32(x, lo), vdupq_n_f32(88.3762626647949f));

  float32x4_t fx = vfmaq_f32(vdupq_n_f32(0.5f), x, vdupq_n_f32(1.44269504088896341f));
  fx = vrndmq_f32(fx);
  x = vfmsq_f32(x, fx, vdupq_n_f32(0.693359375f));
  x = vfmsq_f32(x, fx, vdupq_n_f32(-2.12194440e-4f));

  float32x4_t y = vdupq_n_f32(1.9875691500e-4f);
  y = vfmaq_f32(vdupq_n_f32(1.3981999507e-3f), y, x);
  y = vfmaq_f32(vdupq_n_f32(8.3334519073e-3f), y, x);
  y = vfmaq_f32(vdupq_n_f32(4.1665795894e-2f), y, x);
  y = vfmaq_f32(vdupq_n_f32(1.6666665459e-1f), y, x);
  y = vfmaq_f32(vdupq_n_f32(5.0000001201e-1f), y, x);
  y = vfmaq_f32(vaddq_f32(x, vdupq_n_f32(1.0f)), y, vmulq_f32(x, x));

  int32x4_t e = vcvtq_s32_f32(fx);
  e = vshlq_n_s32(vaddq_s32(e, vdupq_n_s32(127)), 23);
  y = vmulq_f32(y, vreinterpretq_f32_s32(e));
  return vreinterpretq_f32_u32(vbicq_u32(vreinterpretq_u32_f32(y), underflow));
}

inline float32x4_t lane_offsets(float d0, float dd, int base) {
  const float idx[4] = {0.f, 1.f, 2.f, 3.f};
  const float32x4_t i = vaddq_f32(vld1q_f32(idx), vdupq_n_f32(float(base)));
  return vfmaq_f32(vdupq_n_f32(d0), i, vdupq_n_f32(dd));
}

inline float32x4_t weights(const RowQuadratic<float>& q, float32x4_t d, float alpha) {
  float32x4_t quad = vfmaq_f32(vdupq_n_f32(q.b), vdupq_n_f32(q.a), d);
  quad = vfmaq_f32(vdupq_n_f32(q.c), quad, d);
  return vmulq_n_f32(exp128(vmulq_n_f32(quad, -0.5f)), alpha);
}

void row_weights_neon(const RowQuadratic<float>& q, float d0, float dd, int n, float alpha,
                      float* out) {
  int k = 0;
  for (; k + 4 <= n; k += 4) vst1q_f32(out + k, weights(q, lane_offsets(d0, dd, k), alpha));
  if (k < n) row_weights_ref<float>(q, d0 + float(k) * dd, dd, n - k, alpha, out + k);
}

RowGradSums<float> row_backward_neon(const RowQuadratic<float>& q, float d0, float dd, int n,
                                     float alpha, float color, const float* g,
                                     const float* chat) {
  float32x4_t sk = vdupq_n_f32(0.f), skd = sk, skdd = sk, sga = sk;
  int k = 0;
  for (; k + 4 <= n; k += 4) {
    const float32x4_t d = lane_offsets(d0, dd, k);
    const float32x4_t ga = vmulq_f32(vld1q_f32(g + k), weights(q, d, alpha));
    const float32x4_t kk =
        vmulq_f32(vmulq_n_f32(ga, -0.5f), vsubq_f32(vdupq_n_f32(color), vld1q_f32(chat + k)));
    const float32x4_t kd = vmulq_f32(kk, d);
    sk = vaddq_f32(sk, kk);
    skd = vaddq_f32(skd, kd);
    skdd = vfmaq_f32(skdd, kd, d);
    sga = vaddq_f32(sga, ga);
  }
  RowGradSums<float> s{vaddvq_f32(sk), vaddvq_f32(skd), vaddvq_f32(skdd), vaddvq_f32(sga)};
  if (k < n) {
    const RowGradSums<float> t =
        row_backward_ref<float>(q, d0 + float(k) * dd, dd, n - k, alpha, color, g + k, chat + k);
    s.k += t.k;
    s.kd += t.kd;
    s.kdd += t.kdd;
    s.ga += t.ga;
  }
  return s;
}

const KernelTable kNeon{"neon", &row_weights_neon, &row_backward_neon};

}  // namespace

const KernelTable* neon_kernels() { return &kNeon; }

}  // namespace usplat::kernels
