#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <unistd.h>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "esi/pretrainer.hpp"
#include "esi/synthetic.hpp"

namespace esi::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("esi-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data) v = static_cast<T>(n(rng));
  return t;
}

// Unit rows of a random [n, d] matrix.
inline Tensor<double> random_unit_rows(int64_t n, int64_t d, std::mt19937_64& rng) {
  auto t = random_tensor<double>({n, d}, rng);
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t k = 0; k < d; ++k) s += t[i * d + k] * t[i * d + k];
    s = std::sqrt(s);
    for (int64_t k = 0; k < d; ++k) t[i * d + k] /= s;
  }
  return t;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;
  int checked = 0;
};

// Compares backward() against Richardson-extrapolated central differences
// (h and h/2) on up to `per_tensor` random coordinates of every parameter. The error of one tensor is
// |g_analytic - g_numeric| / max(|g_analytic| + |g_numeric|, floor) over the
// sampled coordinates, as vectors.
inline GradCheck check_gradients(const std::vector<std::pair<std::string, Var<double>>>& params,
                                 const std::function<Var<double>()>& loss, int per_tensor,
                                 uint64_t seed, double h = 1e-3, double floor = 1e-8) {
  for (auto [name, v] : params) v.zero_grad();
  backward(loss());
  GradCheck out;
  std::mt19937_64 rng(seed);
  for (auto [name, v] : params) {
    const int64_t n = v.value().numel();
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<size_t>(std::min<int64_t>(n, per_tensor)));
    double diff = 0.0, mag = 0.0;
    for (int64_t i : idx) {
      const double analytic = v.has_grad() ? v.grad()[i] : 0.0;
      const double saved = v.value()[i];
      auto central = [&](double step) {
        v.mutable_value()[i] = saved + step;
        const double up = loss().item();
        v.mutable_value()[i] = saved - step;
        const double down = loss().item();
        v.mutable_value()[i] = saved;
        return (up - down) / (2.0 * step);
      };
      const double numeric = (4.0 * central(h / 2) - central(h)) / 3.0;
      diff += (analytic - numeric) * (analytic - numeric);
      mag += analytic * analytic + numeric * numeric;
      ++out.checked;
    }
    const double err = std::sqrt(diff) / std::max(std::sqrt(mag), floor);
    if (err > out.max_rel_error) {
      out.max_rel_error = err;
      out.worst = name;
    }
  }
  return out;
}

inline std::vector<std::pair<std::string, Var<double>>> all_params(ParamStore<double>& ps) {
  std::vector<std::pair<std::string, Var<double>>> out;
  for (const auto& e : ps.entries()) out.emplace_back(e.name, e.var);
  return out;
}

// Very small towers for exact checks in double precision.
inline TrainConfig tiny_config() {
  TrainConfig c = TrainConfig::preset("micro");
  c.signal.in_leads = 2;
  c.signal.depths = {1, 1, 1, 1};
  c.signal.widths = {4, 6, 8, 8};
  c.signal.dw_kernel = 3;
  c.signal.embed_dim = 6;
  c.signal.pool_heads = 2;
  c.signal.variant = "test";
  c.text.layers = 1;
  c.text.heads = 2;
  c.text.width = 8;
  c.text.max_len = 12;
  c.text.embed_dim = 6;
  c.decoder.layers = 1;
  c.decoder.heads = 2;
  c.decoder.width = 8;
  c.decoder.max_len = 12;
  c.decoder.cross_width = 8;
  c.batch_size = 4;
  c.epochs = 3;
  c.warmup_epochs = 1;
  return c;
}

inline std::vector<std::string> tiny_corpus() {
  return {"sinus rhythm with normal axis.", "right bundle branch block, wide qrs.",
          "sinus bradycardia at 50 bpm.", "sinus tachycardia; short rr intervals.",
          "left ventricular hypertrophy with strain.", "atrial fibrillation, irregular rr."};
}

inline ECGRecord random_record(const std::string& id, int leads, int64_t samples,
                               std::mt19937_64& rng) {
  ECGRecord r;
  r.record_id = id;
  r.n_leads = leads;
  r.n_samples = samples;
  r.sampling_rate_hz = 100;
  r.signal = random_tensor<float>({leads * samples}, rng, 0.5).data;
  return r;
}

// Small synthetic pairs on a 2-lead, 64-sample layout matching tiny_config().
inline std::vector<ECGTextPair> tiny_pairs(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto corpus = tiny_corpus();
  std::vector<ECGTextPair> out;
  for (size_t i = 0; i < n; ++i) {
    ECGTextPair p;
    p.record = std::make_shared<ECGRecord>(random_record("r" + std::to_string(i), 2, 64, rng));
    p.description = corpus[i % corpus.size()];
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace esi::test
