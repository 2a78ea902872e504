// NEON kernels for aarch64, 2 doubles per lane. Same contracts as the
// scalar reference; reductions combine lanes in a fixed order.

#include "gface/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

#include <cstring>

namespace gface::kernels {
namespace {

void add_neon(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        vst1q_f64(out + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_neon(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        vst1q_f64(out + i, vsubq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_neon(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    }
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_neon(const double* a, double c, double* out, std::size_t n) {
    const float64x2_t cv = vdupq_n_f64(c);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        vst1q_f64(out + i, vmulq_f64(vld1q_f64(a + i), cv));
    }
    for (; i < n; ++i) out[i] = a[i] * c;
}

void axpy_neon(double* y, double a, const double* x, std::size_t n) {
    const float64x2_t av = vdupq_n_f64(a);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t yv = vld1q_f64(y + i);
        yv = vfmaq_f64(yv, av, vld1q_f64(x + i));
        vst1q_f64(y + i, yv);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

double dot_neon(const double* a, const double* b, std::size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        acc = vfmaq_f64(acc, vld1q_f64(a + i), vld1q_f64(b + i));
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += a[i] * b[i];
    return vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1) + tail;
}

double sum_neon(const double* a, std::size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(a + i));
    double tail = 0.0;
    for (; i < n; ++i) tail += a[i];
    return vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1) + tail;
}

double sqsum_neon(const double* a, std::size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        const float64x2_t v = vld1q_f64(a + i);
        acc = vfmaq_f64(acc, v, v);
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += a[i] * a[i];
    return vgetq_lane_f64(acc, 0) + vgetq_lane_f64(acc, 1) + tail;
}

void gemm_nn_neon(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n) {
    std::memset(c, 0, m * n * sizeof(double));
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            axpy_neon(crow, a[i * k + l], b + l * n, n);
        }
    }
}

void gemm_nt_neon(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            c[i * n + j] = dot_neon(arow, b + j * k, k);
        }
    }
}

void gemm_tn_neon(const double* a, const double* b, double* c,
                  std::size_t m, std::size_t k, std::size_t n) {
    std::memset(c, 0, k * n * sizeof(double));
    for (std::size_t i = 0; i < m; ++i) {
        const double* brow = b + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            axpy_neon(c + l * n, a[i * k + l], brow, n);
        }
    }
}

}  // namespace

const Backend& neon_backend() {
    static const Backend backend = {
        "neon",
        add_neon, sub_neon, mul_neon, scale_neon,
        axpy_neon,
        dot_neon, sum_neon, sqsum_neon,
        gemm_nn_neon, gemm_nt_neon, gemm_tn_neon,
    };
    return backend;
}

}  // namespace gface::kernels

#endif  // aarch64
