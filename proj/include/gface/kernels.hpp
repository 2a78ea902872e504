#pragma once
// Double-precision array kernels behind runtime dispatch.
//
// Every kernel has a scalar reference implementation and, where the build
// target supports it, a SIMD variant (AVX2+FMA on x86-64, NEON on aarch64).
// The backend is picked once at startup: explicit GFACE_KERNELS env override
// ("scalar", "avx2", "neon", "auto"), otherwise the best variant the CPU
// reports. A process always runs on one backend, so repeated runs are
// bitwise reproducible; different backends agree within 1e-9 relative
// (reduction order differs), which the kernel test suite enforces.

#include <cstddef>
#include <string>
#include <vector>

namespace gface::kernels {

struct Backend {
    const char* name;

    // elementwise, out may alias a or b
    void (*add)(const double* a, const double* b, double* out, std::size_t n);
    void (*sub)(const double* a, const double* b, double* out, std::size_t n);
    void (*mul)(const double* a, const double* b, double* out, std::size_t n);
    void (*scale)(const double* a, double c, double* out, std::size_t n);

    // y += a * x
    void (*axpy)(double* y, double a, const double* x, std::size_t n);

    // reductions
    double (*dot)(const double* a, const double* b, std::size_t n);
    double (*sum)(const double* a, std::size_t n);
    double (*sqsum)(const double* a, std::size_t n);

    // row-major matrix products, C is overwritten
    // nn: C[m,n] = A[m,k] B[k,n]
    // nt: C[m,n] = A[m,k] B[n,k]^T
    // tn: C[k,n] = A[m,k]^T B[m,n]
    void (*gemm_nn)(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n);
    void (*gemm_nt)(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n);
    void (*gemm_tn)(const double* a, const double* b, double* c,
                    std::size_t m, std::size_t k, std::size_t n);
};

const Backend& scalar_backend();

// Backends compiled into this binary (always includes "scalar").
std::vector<std::string> compiled_backends();

// Backends compiled in AND supported by the running CPU.
std::vector<std::string> runtime_backends();

// The active backend. First call resolves GFACE_KERNELS / CPU detection.
const Backend& active();

// Force a backend by name ("auto" re-runs detection). Returns false and
// leaves the selection unchanged if the name is unknown or unsupported here.
bool set_active(const std::string& name);

}  // namespace gface::kernels
