#include "gface/kernels.hpp"

#include <cstdlib>

namespace gface::kernels {

#if defined(__x86_64__) || defined(_M_X64)
const Backend& avx2_backend();
#endif
#if defined(__aarch64__)
const Backend& neon_backend();
#endif

namespace {

bool cpu_supports(const std::string& name) {
#if defined(__x86_64__) || defined(_M_X64)
    if (name == "avx2") {
        return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    }
#endif
#if defined(__aarch64__)
    if (name == "neon") return true;  // baseline on aarch64
#endif
    return name == "scalar";
}

const Backend* lookup(const std::string& name) {
    if (name == "scalar") return &scalar_backend();
#if defined(__x86_64__) || defined(_M_X64)
    if (name == "avx2") return &avx2_backend();
#endif
#if defined(__aarch64__)
    if (name == "neon") return &neon_backend();
#endif
    return nullptr;
}

const Backend* detect() {
#if defined(__x86_64__) || defined(_M_X64)
    if (cpu_supports("avx2")) return &avx2_backend();
#endif
#if defined(__aarch64__)
    return &neon_backend();
#endif
    return &scalar_backend();
}

const Backend* resolve_initial() {
    if (const char* env = std::getenv("GFACE_KERNELS")) {
        const std::string want(env);
        if (want != "auto" && !want.empty()) {
            if (const Backend* b = lookup(want); b && cpu_supports(want)) return b;
        }
    }
    return detect();
}

const Backend*& slot() {
    static const Backend* current = resolve_initial();
    return current;
}

}  // namespace

std::vector<std::string> compiled_backends() {
    std::vector<std::string> out{"scalar"};
#if defined(__x86_64__) || defined(_M_X64)
    out.push_back("avx2");
#endif
#if defined(__aarch64__)
    out.push_back("neon");
#endif
    return out;
}

std::vector<std::string> runtime_backends() {
    std::vector<std::string> out;
    for (const auto& name : compiled_backends()) {
        if (cpu_supports(name)) out.push_back(name);
    }
    return out;
}

const Backend& active() { return *slot(); }

bool set_active(const std::string& name) {
    if (name == "auto") {
        slot() = detect();
        return true;
    }
    const Backend* b = lookup(name);
    if (!b || !cpu_supports(name)) return false;
    slot() = b;
    return true;
}

}  // namespace gface::kernels
