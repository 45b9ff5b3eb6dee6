#pragma once

// OpenBLAS picks its kernels by reading CPUID once, at library load. Some
// container runtimes mask CPUID, and the fallback ("Prescott", SSE2) costs
// about 4x in gemm throughput on an AVX-512 host. The selection can only be
// influenced through OPENBLAS_CORETYPE, which is read before main() runs,
// so the fix is to set the variable and re-exec the current binary once.
//
// pin_host_blas_kernel() is a no-op unless all of the following hold: the
// build links OpenBLAS, the OS is Linux/x86-64, OPENBLAS_CORETYPE is unset,
// the CPU reports AVX-512 (F+DQ+BW+VL, the subset the skylake kernels use),
// and OpenBLAS actually landed on the Prescott fallback.

#include <cstdlib>
#include <cstring>

#if defined(GRADSPLIT_USE_CBLAS) && defined(__linux__) && defined(__x86_64__) && \
    defined(__GNUC__)
#define GRADSPLIT_CAN_PIN_BLAS 1
#include <unistd.h>
extern "C" char* openblas_get_corename(void);
#endif

namespace gradsplit {

inline void pin_host_blas_kernel(char** argv) {
#ifdef GRADSPLIT_CAN_PIN_BLAS
    if (std::getenv("OPENBLAS_CORETYPE") != nullptr) return;
    if (!__builtin_cpu_supports("avx512f") || !__builtin_cpu_supports("avx512dq") ||
        !__builtin_cpu_supports("avx512bw") || !__builtin_cpu_supports("avx512vl"))
        return;
    if (std::strcmp(openblas_get_corename(), "Prescott") != 0) return;
    setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
    execv("/proc/self/exe", argv);
    // exec failed; carry on with the slow kernels rather than abort.
    unsetenv("OPENBLAS_CORETYPE");
#else
    (void)argv;
#endif
}

}  // namespace gradsplit
