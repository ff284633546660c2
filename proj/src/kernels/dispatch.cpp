#include <atomic>
#include <cstdlib>
#include <string_view>

#include "lnfmm/kernels.hpp"

namespace lnfmm::kernels {

const KernelTable* avx2_table_impl();

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* select_initial() {
  const KernelTable* simd = avx2_table();
  if (const char* env = std::getenv("LNFMM_KERNELS")) {
    const std::string_view want(env);
    if (want == "scalar") return &scalar_table();
    if (want == "avx2" && simd != nullptr) return simd;
  }
  return simd != nullptr ? simd : &scalar_table();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{select_initial()};
  return table;
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable* table = cpu_has_avx2() ? avx2_table_impl() : nullptr;
  return table;
}

const KernelTable& active() { return *current().load(std::memory_order_relaxed); }

bool set_backend(Backend backend) {
  if (backend == Backend::kScalar) {
    current().store(&scalar_table());
    return true;
  }
  const KernelTable* simd = avx2_table();
  if (simd == nullptr) return false;
  current().store(simd);
  return true;
}

}  // namespace lnfmm::kernels
