#include <cstdlib>
#include <string_view>

#include "usplat/kernels.hpp"

namespace usplat::kernels {

namespace {

void row_weights_scalar(const RowQuadratic<float>& q, float d0, float dd, int n, float alpha,
                        float* out) {
  row_weights_ref<float>(q, d0, dd, n, alpha, out);
}

RowGradSums<float> row_backward_scalar(const RowQuadratic<float>& q, float d0, float dd, int n,
                                       float alpha, float color, const float* g,
                                       const float* chat) {
  return row_backward_ref<float>(q, d0, dd, n, alpha, color, g, chat);
}

const KernelTable kScalar{"scalar", &row_weights_scalar, &row_backward_scalar};

}  // namespace

const KernelTable& scalar_kernels() { return kScalar; }

#if !defined(USPLAT_HAVE_AVX2)
const KernelTable* avx2_kernels() { return nullptr; }
#endif
#if !defined(USPLAT_HAVE_NEON)
const KernelTable* neon_kernels() { return nullptr; }
#endif

bool cpu_supports(const KernelTable& table) {
  if (table.name == "avx2") {
#if defined(__x86_64__) || defined(__i386__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
  }
  // NEON is mandatory on aarch64; the table only exists there.
  return true;
}

namespace {

const KernelTable& select_kernels() {
  const char* env = std::getenv("USPLAT_KERNELS");
  const std::string_view want = env ? env : "";
  const KernelTable* candidates[] = {avx2_kernels(), neon_kernels()};
  if (want == "scalar") return scalar_kernels();
  for (const KernelTable* t : candidates) {
    if (t && cpu_supports(*t) && (want.empty() || want == t->name)) return *t;
  }
  return scalar_kernels();
}

}  // namespace

const KernelTable& active_kernels() {
  static const KernelTable& table = select_kernels();
  return table;
}

}  // namespace usplat::kernels
