// Times the parallel ops against the serial reference kernels and reports the
// max absolute difference, which should be exactly zero: both sides sum in the
// same order.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

#include "egnlq/ops.hpp"
#include "egnlq/ref_kernels.hpp"

using egnlq::Mask;
using egnlq::Tensor;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double mx = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    mx = std::max(mx, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return mx;
}

void report(const char* name, double par_ms, double ref_ms, double diff) {
  std::printf("%-22s parallel %8.2f ms   serial %8.2f ms   speedup %5.2fx   max|diff| %g\n",
              name, par_ms, ref_ms, ref_ms / par_ms, diff);
}

}  // namespace

int main() {
  std::mt19937_64 rng(12345);
  const int reps = 5;

  {
    const int m = 256, k = 512, n = 256;
    auto a = Tensor<float>::randn({m, k}, rng);
    auto b = Tensor<float>::randn({k, n}, rng);
    auto t0 = Clock::now();
    Tensor<float> out;
    for (int r = 0; r < reps; ++r) out = egnlq::ops::matmul(a, b);
    const double par_ms = ms_since(t0) / reps;
    t0 = Clock::now();
    std::vector<float> ref;
    for (int r = 0; r < reps; ++r) ref = egnlq::ref::matmul(a.values(), b.values(), m, k, n);
    report("matmul 256x512x256", par_ms, ms_since(t0) / reps, max_abs_diff(out.values(), ref));
  }

  {
    const int t = 2048, c_in = 128, c_out = 128, k = 3;
    auto x = Tensor<float>::randn({t, c_in}, rng);
    auto w = Tensor<float>::randn({c_out, c_in, k}, rng);
    auto b = Tensor<float>::randn({c_out}, rng);
    Mask mask(t, 1);
    mask[t - 1] = 0;
    auto t0 = Clock::now();
    Tensor<float> out;
    for (int r = 0; r < reps; ++r) out = egnlq::ops::conv1d(x, w, b, 1, false, mask);
    const double par_ms = ms_since(t0) / reps;
    t0 = Clock::now();
    std::vector<float> ref;
    for (int r = 0; r < reps; ++r)
      ref = egnlq::ref::conv1d(x.values(), w.values(), b.values(), t, c_in, c_out, k, 1, false,
                               mask);
    report("conv1d 2048x128", par_ms, ms_since(t0) / reps, max_abs_diff(out.values(), ref));
  }

  {
    const int t = 512, h = 8, d = 32, window = 19;
    auto q = Tensor<float>::randn({t, h, d}, rng);
    auto k = Tensor<float>::randn({t, h, d}, rng);
    auto v = Tensor<float>::randn({t, h, d}, rng);
    auto t0 = Clock::now();
    Tensor<float> out;
    for (int r = 0; r < reps; ++r) out = egnlq::ops::windowed_attention(q, k, v, window);
    const double par_ms = ms_since(t0) / reps;
    t0 = Clock::now();
    std::vector<float> ref;
    for (int r = 0; r < reps; ++r)
      ref = egnlq::ref::windowed_attention(q.values(), k.values(), v.values(), t, h, d, window);
    report("attention 512x8x32", par_ms, ms_since(t0) / reps, max_abs_diff(out.values(), ref));
  }

  return 0;
}
