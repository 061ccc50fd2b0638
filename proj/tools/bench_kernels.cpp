// Times the serial reference kernels against the parallel (Eigen/OpenMP)
// implementations on the shapes the model actually uses.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "adaponder/kernels.hpp"
#include "adaponder/tensor.hpp"

using namespace adaponder;
using clk = std::chrono::steady_clock;

namespace {

double time_of(int reps, const std::function<void()>& fn) {
  fn();  // warm-up
  const auto t0 = clk::now();
  for (int r = 0; r < reps; ++r) fn();
  return std::chrono::duration<double>(clk::now() - t0).count() / reps;
}

void fill(std::vector<float>& v, Rng& rng) {
  for (auto& x : v) x = static_cast<float>(rng.gaussian() * 0.5);
}

void report(const char* name, double gflop, double t_serial, double t_par) {
  std::printf("%-28s serial %8.2f ms (%6.2f GF/s)   parallel %8.2f ms (%6.2f GF/s)   speedup %.2fx\n",
              name, t_serial * 1e3, gflop / t_serial, t_par * 1e3, gflop / t_par,
              t_serial / t_par);
}

}  // namespace

int main(int argc, char** argv) {
  int threads = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--threads") == 0 && i + 1 < argc) threads = std::atoi(argv[++i]);
  }
  kernels::set_threads(threads);
  std::printf("threads: %d\n\n", kernels::threads());

  Rng rng(42);

  {  // FFN-shaped GEMM: [B*n, d] x [d_ff, d]^T
    const int64_t m = 4096, k = 128, n = 512;
    std::vector<float> a(m * k), b(n * k), c(m * n);
    fill(a, rng);
    fill(b, rng);
    const double gflop = 2.0 * m * k * n / 1e9;
    const double ts = time_of(3, [&] {
      kernels::serial::matmul_nt(a.data(), b.data(), c.data(), m, k, n);
    });
    const double tp = time_of(10, [&] {
      kernels::par::matmul_nt(a.data(), b.data(), c.data(), m, k, n);
    });
    report("matmul_nt 4096x128x512", gflop, ts, tp);
  }

  {  // LM-head GEMM: [B*n, d] x [V, d]^T
    const int64_t m = 4096, k = 128, n = 256;
    std::vector<float> a(m * k), b(n * k), c(m * n);
    fill(a, rng);
    fill(b, rng);
    const double gflop = 2.0 * m * k * n / 1e9;
    const double ts = time_of(3, [&] {
      kernels::serial::matmul_nt(a.data(), b.data(), c.data(), m, k, n);
    });
    const double tp = time_of(10, [&] {
      kernels::par::matmul_nt(a.data(), b.data(), c.data(), m, k, n);
    });
    report("matmul_nt 4096x128x256", gflop, ts, tp);
  }

  {  // probability-weighted update: [B*n, V] x [V, d]
    const int64_t m = 4096, k = 256, n = 128;
    std::vector<float> a(m * k), b(k * n), c(m * n);
    fill(a, rng);
    fill(b, rng);
    const double gflop = 2.0 * m * k * n / 1e9;
    const double ts = time_of(3, [&] {
      kernels::serial::matmul_nn(a.data(), b.data(), c.data(), m, k, n);
    });
    const double tp = time_of(10, [&] {
      kernels::par::matmul_nn(a.data(), b.data(), c.data(), m, k, n);
    });
    report("matmul_nn 4096x256x128", gflop, ts, tp);
  }

  {  // causal attention, B=16 n=128 H=4 dh=32
    const int64_t B = 16, n = 128, H = 4, dh = 32, d = H * dh;
    std::vector<float> q(B * n * d), k(B * n * d), v(B * n * d), o(B * n * d);
    fill(q, rng);
    fill(k, rng);
    fill(v, rng);
    const double gflop = 2.0 * B * H * n * (n + 1) * dh / 1e9;
    const double ts = time_of(3, [&] {
      kernels::serial::attention_causal_fwd(q.data(), k.data(), v.data(), o.data(), B, n, H, dh);
    });
    const double tp = time_of(10, [&] {
      kernels::par::attention_causal_fwd(q.data(), k.data(), v.data(), o.data(), B, n, H, dh);
    });
    report("attention B16 n128 H4", gflop, ts, tp);
  }

  {  // softmax over vocab rows
    const int64_t rows = 8192, cols = 256;
    std::vector<float> x(rows * cols), y(rows * cols);
    fill(x, rng);
    const double gflop = 5.0 * rows * cols / 1e9;  // rough op count
    const double ts = time_of(5, [&] {
      kernels::serial::softmax_rows(x.data(), y.data(), rows, cols);
    });
    const double tp = time_of(10, [&] {
      kernels::par::softmax_rows(x.data(), y.data(), rows, cols);
    });
    report("softmax 8192x256", gflop, ts, tp);
  }

  {  // layernorm rows
    const int64_t rows = 8192, cols = 128;
    std::vector<float> x(rows * cols), y(rows * cols), g(cols, 1.f), b(cols, 0.f);
    std::vector<float> mean(rows), rstd(rows);
    fill(x, rng);
    const double gflop = 8.0 * rows * cols / 1e9;
    const double ts = time_of(5, [&] {
      kernels::serial::layernorm_fwd(x.data(), g.data(), b.data(), y.data(), mean.data(),
                                     rstd.data(), rows, cols, 1e-5f);
    });
    const double tp = time_of(10, [&] {
      kernels::par::layernorm_fwd(x.data(), g.data(), b.data(), y.data(), mean.data(),
                                  rstd.data(), rows, cols, 1e-5f);
    });
    report("layernorm 8192x128", gflop, ts, tp);
  }

  return 0;
}
