#include <doctest.h>

#include "oracles.hpp"
#include "support.hpp"

using namespace esi;
using esi::test::random_unit_rows;

namespace {

Var<double> log_sigma_of(double sigma, bool grad = false) {
  return Var<double>(Tensor<double>({1}, std::vector<double>{std::log(sigma)}), grad);
}

TokenizedBatch random_targets(int B, int L, int V, std::mt19937_64& rng) {
  TokenizedBatch t;
  t.batch = B;
  t.length = L;
  std::uniform_int_distribution<int> id(0, V - 1), len(1, L);
  for (int b = 0; b < B; ++b) {
    const int n = len(rng);
    for (int i = 0; i < L; ++i) {
      t.ids.push_back(i < n ? id(rng) : Vocabulary::kPad);
      t.valid.push_back(i < n);
    }
  }
  return t;
}

}  // namespace

TEST_CASE("contrastive loss matches the direct-softmax oracle on random batches") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> nd(1, 16), dd(2, 32);
  std::uniform_real_distribution<double> sd(0.05, 2.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int N = nd(rng), d = dd(rng);
    const double sigma = sd(rng);
    const auto S = random_unit_rows(N, d, rng), T = random_unit_rows(N, d, rng);
    const double got = contrastive_loss(Var<double>(S), Var<double>(T), log_sigma_of(sigma)).item();
    worst = std::max(worst, std::abs(got - oracle::contrastive(S.data, T.data, N, d, sigma)));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("contrastive loss edge cases") {
  SUBCASE("single pair is exactly zero") {
    std::mt19937_64 rng(22);
    const auto S = random_unit_rows(1, 8, rng), T = random_unit_rows(1, 8, rng);
    CHECK(contrastive_loss(Var<double>(S), Var<double>(T), log_sigma_of(0.07)).item() == 0.0);
  }
  SUBCASE("two orthonormal pairs at unit temperature") {
    const Tensor<double> I({2, 2}, std::vector<double>{1, 0, 0, 1});
    const double got = contrastive_loss(Var<double>(I), Var<double>(I), log_sigma_of(1.0)).item();
    CHECK(std::abs(got - 2.0 * std::log1p(std::exp(-1.0))) < 1e-9);
  }
  SUBCASE("rows off the unit sphere are rejected") {
    const Tensor<double> S({1, 2}, std::vector<double>{2, 0});
    CHECK_THROWS_AS(contrastive_loss(Var<double>(S), Var<double>(S), log_sigma_of(1.0)),
                    std::invalid_argument);
  }
  SUBCASE("non-finite input raises a numeric error") {
    const Tensor<double> S({1, 2}, std::vector<double>{NAN, 0});
    CHECK_THROWS_AS(contrastive_loss(Var<double>(S), Var<double>(S), log_sigma_of(1.0)), NumericError);
  }
}

TEST_CASE("contrastive loss is symmetric in its two modalities") {
  std::mt19937_64 rng(23);
  const auto S = random_unit_rows(9, 12, rng), T = random_unit_rows(9, 12, rng);
  const double a = contrastive_loss(Var<double>(S), Var<double>(T), log_sigma_of(0.3)).item();
  const double b = contrastive_loss(Var<double>(T), Var<double>(S), log_sigma_of(0.3)).item();
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("contrastive loss gradients including the temperature") {
  std::mt19937_64 rng(24);
  Var<double> S(random_unit_rows(5, 7, rng), true), T(random_unit_rows(5, 7, rng), true);
  auto ls = log_sigma_of(0.2, true);
  const auto res = test::check_gradients({{"S", S}, {"T", T}, {"log_sigma", ls}},
                                         [&] { return contrastive_loss(S, T, ls); }, 64, 3, 1e-6);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("captioning loss matches the double-loop oracle") {
  std::mt19937_64 rng(25);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int B = 1 + trial % 4, L = 2 + trial % 7, V = 3 + trial % 11;
    const auto logits = test::random_tensor<double>({B, L, V}, rng, 3.0);
    const auto targets = random_targets(B, L, V, rng);
    const double got = captioning_loss(Var<double>(logits), targets).item();
    worst = std::max(worst, std::abs(got - oracle::captioning(logits.data, B, L, V, targets)));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("captioning loss gradient and validation") {
  std::mt19937_64 rng(26);
  Var<double> logits(test::random_tensor<double>({2, 4, 5}, rng), true);
  const auto targets = random_targets(2, 4, 5, rng);
  const auto res = test::check_gradients({{"logits", logits}},
                                         [&] { return captioning_loss(logits, targets); }, 40, 4);
  CHECK(res.max_rel_error < 1e-6);

  TokenizedBatch pad = targets;
  std::fill(pad.valid.begin(), pad.valid.end(), 0);
  CHECK_THROWS_AS(captioning_loss(logits, pad), std::invalid_argument);
  TokenizedBatch bad = targets;
  bad.ids[0] = 99;
  bad.valid[0] = 1;
  CHECK_THROWS(captioning_loss(logits, bad));
}

TEST_CASE("total loss weights the two terms") {
  Var<double> a(Tensor<double>({1}, std::vector<double>{2.0}), true);
  Var<double> b(Tensor<double>({1}, std::vector<double>{5.0}), true);
  CHECK(total_loss(a, b, LossWeights{}).item() == doctest::Approx(7.0));
  CHECK(total_loss(a, b, LossWeights{0.5, 2.0}).item() == doctest::Approx(11.0));
  backward(total_loss(a, b, LossWeights{0.5, 2.0}));
  CHECK(a.grad()[0] == doctest::Approx(0.5));
  CHECK(b.grad()[0] == doctest::Approx(2.0));
  CHECK_THROWS_AS(LossWeights({-1.0, 1.0}).validate(), std::invalid_argument);
}

TEST_CASE("classification losses against closed forms") {
  std::mt19937_64 rng(27);
  const auto z = test::random_tensor<double>({6, 4}, rng);
  const std::vector<int> labels{0, 3, 2, 1, 1, 0};
  double expect = 0.0;
  for (int i = 0; i < 6; ++i) {
    double denom = 0.0;
    for (int c = 0; c < 4; ++c) denom += std::exp(z[i * 4 + c]);
    expect += std::log(denom) - z[i * 4 + labels[i]];
  }
  CHECK(softmax_cross_entropy(Var<double>(z), labels).item() == doctest::Approx(expect / 6).epsilon(1e-12));

  std::vector<uint8_t> y(24);
  for (size_t i = 0; i < y.size(); ++i) y[i] = (i * 7) % 3 == 0;
  double bce = 0.0;
  for (size_t i = 0; i < y.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z[i]));
    bce -= y[i] ? std::log(p) : std::log(1.0 - p);
  }
  CHECK(binary_cross_entropy(Var<double>(z), y).item() == doctest::Approx(bce / 24).epsilon(1e-12));

  Var<double> zv(z, true);
  CHECK(test::check_gradients({{"z", zv}}, [&] { return softmax_cross_entropy(zv, labels); }, 24, 5)
            .max_rel_error < 1e-6);
  CHECK(test::check_gradients({{"z", zv}}, [&] { return binary_cross_entropy(zv, y); }, 24, 6)
            .max_rel_error < 1e-6);
}
