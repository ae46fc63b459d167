#include <atomic>
#include <cstdlib>
#include <string>

#include "colongpt/error.hpp"
#include "colongpt/kernels.hpp"

namespace colongpt::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend initial_backend() {
  if (const char* env = std::getenv("COLONGPT_SIMD")) {
    if (std::string(env) == "scalar") return Backend::kScalar;
  }
  return cpu_has_avx2() ? Backend::kAvx2 : Backend::kScalar;
}

std::atomic<Backend>& current() {
  static std::atomic<Backend> b{initial_backend()};
  return b;
}

}  // namespace

std::string_view backend_name(Backend b) { return b == Backend::kAvx2 ? "avx2" : "scalar"; }

bool backend_supported(Backend b) { return b == Backend::kScalar || cpu_has_avx2(); }

Backend active_backend() { return current().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
  if (!backend_supported(b)) {
    throw UsageError("SIMD backend '" + std::string(backend_name(b)) + "' is not supported on this CPU");
  }
  current().store(b, std::memory_order_relaxed);
}

void gemm(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
          std::span<const double> b, std::span<double> c, bool accumulate) {
  if (a.size() < m * k || b.size() < k * n || c.size() < m * n) {
    throw ShapeError("gemm: buffer smaller than declared dimensions");
  }
  if (active_backend() == Backend::kAvx2) {
    avx2::gemm(m, n, k, a.data(), b.data(), c.data(), accumulate);
  } else {
    scalar::gemm(m, n, k, a.data(), b.data(), c.data(), accumulate);
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  return active_backend() == Backend::kAvx2 ? avx2::dot(a.data(), b.data(), a.size())
                                            : scalar::dot(a.data(), b.data(), a.size());
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw ShapeError("axpy: length mismatch");
  if (active_backend() == Backend::kAvx2) {
    avx2::axpy(alpha, x.data(), y.data(), x.size());
  } else {
    scalar::axpy(alpha, x.data(), y.data(), x.size());
  }
}

}  // namespace colongpt::kernels
