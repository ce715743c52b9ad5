#include <doctest.h>

#include <omp.h>

#include "esi/kernels.hpp"
#include "support.hpp"

using namespace esi;
namespace k = esi::kernels;

namespace {

template <typename T>
std::vector<T> random_vec(size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct ThreadCount {
  explicit ThreadCount(int n) : prev(omp_get_max_threads()) { omp_set_num_threads(n); }
  ~ThreadCount() { omp_set_num_threads(prev); }
  int prev;
};

}  // namespace

TEST_CASE("gemm variants agree with the serial loops") {
  std::mt19937_64 rng(11);
  ThreadCount threads(4);
  for (auto [M, N, K] : {std::tuple<int64_t, int64_t, int64_t>{1, 1, 1}, {7, 5, 3}, {64, 33, 17},
                         {300, 129, 65}, {513, 96, 384}}) {
    CAPTURE(M);
    CAPTURE(N);
    CAPTURE(K);
    const auto A = random_vec<double>(M * K, rng), B = random_vec<double>(K * N, rng);
    const auto Bt = random_vec<double>(N * K, rng), At = random_vec<double>(K * M, rng);
    for (bool acc : {false, true}) {
      auto init = random_vec<double>(M * N, rng);
      auto ref = init, par = init;
      k::reference::gemm_nn(M, N, K, A.data(), B.data(), ref.data(), acc);
      k::gemm_nn(M, N, K, A.data(), B.data(), par.data(), acc);
      CHECK(max_abs_diff(ref, par) < 1e-10);
      ref = init;
      par = init;
      k::reference::gemm_nt(M, N, K, A.data(), Bt.data(), ref.data(), acc);
      k::gemm_nt(M, N, K, A.data(), Bt.data(), par.data(), acc);
      CHECK(max_abs_diff(ref, par) < 1e-10);
      ref = init;
      par = init;
      k::reference::gemm_tn(M, N, K, At.data(), B.data(), ref.data(), acc);
      k::gemm_tn(M, N, K, At.data(), B.data(), par.data(), acc);
      CHECK(max_abs_diff(ref, par) < 1e-10);
    }
  }
}

TEST_CASE("gemm result does not depend on the thread count") {
  std::mt19937_64 rng(12);
  const int64_t M = 777, N = 64, K = 96;
  const auto A = random_vec<float>(M * K, rng), B = random_vec<float>(K * N, rng);
  std::vector<float> one(M * N), many(M * N);
  {
    ThreadCount t(1);
    k::gemm_nn(M, N, K, A.data(), B.data(), one.data(), false);
  }
  {
    ThreadCount t(4);
    k::gemm_nn(M, N, K, A.data(), B.data(), many.data(), false);
  }
  CHECK(one == many);
}

TEST_CASE("depthwise convolution matches the reference") {
  std::mt19937_64 rng(13);
  ThreadCount threads(4);
  for (auto [B, L, C, K] : {std::tuple<int64_t, int64_t, int64_t, int64_t>{1, 5, 3, 7},
                            {2, 40, 16, 7}, {3, 125, 48, 3}, {4, 9, 5, 1}}) {
    const auto x = random_vec<double>(B * L * C, rng), w = random_vec<double>(K * C, rng),
               b = random_vec<double>(C, rng);
    std::vector<double> ref(B * L * C), par(B * L * C);
    k::reference::depthwise_conv1d(B, L, C, K, x.data(), w.data(), b.data(), ref.data());
    k::depthwise_conv1d(B, L, C, K, x.data(), w.data(), b.data(), par.data());
    CHECK(max_abs_diff(ref, par) < 1e-12);
  }
}

TEST_CASE("layer norm matches the reference") {
  std::mt19937_64 rng(14);
  ThreadCount threads(4);
  const int64_t rows = 333, C = 48;
  const auto x = random_vec<double>(rows * C, rng), g = random_vec<double>(C, rng),
             b = random_vec<double>(C, rng);
  std::vector<double> yr(rows * C), yp(rows * C), mr(rows), mp(rows), sr(rows), sp(rows);
  k::reference::layer_norm(rows, C, x.data(), g.data(), b.data(), 1e-6, yr.data(), mr.data(), sr.data());
  k::layer_norm(rows, C, x.data(), g.data(), b.data(), 1e-6, yp.data(), mp.data(), sp.data());
  CHECK(max_abs_diff(yr, yp) < 1e-12);
  CHECK(max_abs_diff(mr, mp) < 1e-12);
  CHECK(max_abs_diff(sr, sp) < 1e-12);
}

TEST_CASE("kernel backward passes agree with finite differences of the forward") {
  std::mt19937_64 rng(15);
  const int64_t B = 2, L = 6, C = 3, K = 3;
  auto x = random_vec<double>(B * L * C, rng);
  auto w = random_vec<double>(K * C, rng);
  const auto bias = random_vec<double>(C, rng);
  const auto dy = random_vec<double>(B * L * C, rng);
  std::vector<double> dx(x.size(), 0.0), dw(w.size(), 0.0), db(C, 0.0);
  k::depthwise_conv1d_backward(B, L, C, K, x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data());
  auto objective = [&] {
    std::vector<double> y(B * L * C);
    k::reference::depthwise_conv1d(B, L, C, K, x.data(), w.data(), bias.data(), y.data());
    double s = 0.0;
    for (size_t i = 0; i < y.size(); ++i) s += y[i] * dy[i];
    return s;
  };
  const double h = 1e-6;
  for (size_t i = 0; i < x.size(); ++i) {
    const double s = x[i];
    x[i] = s + h;
    const double up = objective();
    x[i] = s - h;
    const double down = objective();
    x[i] = s;
    CHECK(dx[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
  }
  for (size_t i = 0; i < w.size(); ++i) {
    const double s = w[i];
    w[i] = s + h;
    const double up = objective();
    w[i] = s - h;
    const double down = objective();
    w[i] = s;
    CHECK(dw[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
  }
  for (int64_t c = 0; c < C; ++c) {
    double expect = 0.0;
    for (int64_t r = 0; r < B * L; ++r) expect += dy[r * C + c];
    CHECK(db[c] == doctest::Approx(expect));
  }
}
