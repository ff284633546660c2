#pragma once
// Dense arithmetic kernels behind the tensor type.
//
// Every kernel exists as a portable scalar reference and, on x86-64, an
// AVX2+FMA variant. The active table is chosen once at startup from CPUID and
// can be pinned with LNFMM_KERNELS=scalar|avx2 or set_backend().
//
// All matrices are row-major and densely packed. The gemm kernels accumulate
// into C (C += op(A) * op(B)); callers zero C when they want a plain product.

#include <cstddef>
#include <string_view>

namespace lnfmm::kernels {

enum class Backend { kScalar, kAvx2 };

struct KernelTable {
  Backend backend;
  std::string_view name;

  double (*dot)(const double* x, const double* y, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // y = x ⊙ z (elementwise)
  void (*hadamard)(const double* x, const double* z, double* y, std::size_t n);
  // C[m×n] += A[m×k] · B[k×n]
  void (*gemm_nn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n);
  // C[m×n] += A[m×k] · B[n×k]ᵀ
  void (*gemm_nt)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n);
  // C[m×n] += A[k×m]ᵀ · B[k×n]
  void (*gemm_tn)(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n);
};

const KernelTable& scalar_table();

// nullptr when the CPU (or the build) lacks AVX2/FMA.
const KernelTable* avx2_table();

const KernelTable& active();

// Returns false if the requested backend is unavailable on this machine.
bool set_backend(Backend backend);

}  // namespace lnfmm::kernels
