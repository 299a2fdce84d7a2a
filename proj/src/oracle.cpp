#include "ndcrf/oracle.hpp"

#include <algorithm>
#include <cmath>

#include "ndcrf/detail/mf_core.hpp"

namespace ndcrf::oracle {

namespace {

// Odometer-style coordinate walk, deliberately implemented differently from
// the production feature builder.
std::vector<double> oracle_features(const Tensor& reference,
                                    const FeatureConfig& cfg) {
  const bool app = cfg.mode == FeatureMode::appearance;
  if (app) {
    if (!(cfg.theta_alpha > 0.0f) || !(cfg.theta_beta > 0.0f))
      throw ConfigError("oracle features: appearance thetas must be > 0");
  } else if (!(cfg.theta_gamma > 0.0f)) {
    throw ConfigError("oracle features: theta_gamma must be > 0");
  }
  const int rank = reference.rank();
  const int rc = reference.channels();
  const int d = app ? rank + rc : rank;
  const std::int64_t n = reference.voxels();
  const double spatial =
      static_cast<double>(app ? cfg.theta_alpha : cfg.theta_gamma);

  std::vector<double> f(static_cast<std::size_t>(n) * d);
  std::vector<std::int64_t> coord(rank, 0);
  for (std::int64_t p = 0; p < n; ++p) {
    for (int a = 0; a < rank; ++a)
      f[p * d + a] = static_cast<double>(coord[a]) / spatial;
    if (app)
      for (int ch = 0; ch < rc; ++ch)
        f[p * d + rank + ch] = static_cast<double>(reference.at(p, ch)) /
                               static_cast<double>(cfg.theta_beta);
    for (int a = rank - 1; a >= 0; --a) {
      if (++coord[a] < reference.extents()[a]) break;
      coord[a] = 0;
    }
  }
  return f;
}

double pair_weight(const double* fi, const double* fj, int d) {
  double dist2 = 0.0;
  for (int a = 0; a < d; ++a) {
    const double diff = fi[a] - fj[a];
    dist2 += diff * diff;
  }
  return std::exp(-0.5 * dist2);
}

void softmax_row_inplace(double* row, int k) {
  double m = row[0];
  for (int l = 1; l < k; ++l) m = std::max(m, row[l]);
  double sum = 0.0;
  for (int l = 0; l < k; ++l) {
    row[l] = std::exp(row[l] - m);
    sum += row[l];
  }
  for (int l = 0; l < k; ++l) row[l] /= sum;
}

}  // namespace

Tensor brute_filter(const Tensor& reference, const Tensor& values,
                    const FeatureConfig& config, bool exclude_self,
                    bool normalize) {
  const std::int64_t n = reference.voxels();
  if (n > 10000) throw Error("brute_filter: N exceeds the 10,000 guard");
  if (values.voxels() != n)
    throw ShapeError("brute_filter: values row count does not match reference");

  const std::vector<double> f = oracle_features(reference, config);
  const int d = static_cast<int>(f.size() / static_cast<std::size_t>(n));
  const int c = values.channels();
  const float* v = values.data();

  std::vector<double> out(static_cast<std::size_t>(n) * c);
#pragma omp parallel
  {
    std::vector<double> acc(c);
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      double norm = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        const double w = pair_weight(f.data() + i * d, f.data() + j * d, d);
        norm += w;
        if (exclude_self && j == i) continue;
        for (int ch = 0; ch < c; ++ch)
          acc[ch] += w * static_cast<double>(v[j * c + ch]);
      }
      const double div = normalize ? norm : 1.0;
      for (int ch = 0; ch < c; ++ch) out[i * c + ch] = acc[ch] / div;
    }
  }

  std::vector<float> data(out.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    data[i] = static_cast<float>(out[i]);
  return Tensor(values.extents(), c, std::move(data));
}

MeanFieldState exact_mean_field(const Tensor& reference, const Tensor& probs,
                                const CrfParams& params) {
  const std::int64_t n = reference.voxels();
  if (n > 4096) throw Error("exact_mean_field: N exceeds the 4,096 guard");
  if (reference.extents() != probs.extents())
    throw ShapeError("exact_mean_field: extents differ");
  const int k = probs.channels();
  if (k < 2) throw ShapeError("exact_mean_field: need at least 2 labels");
  if (!probs.all_finite()) throw Error("exact_mean_field: non-finite probs");

  const detail::MfParams<double> p = detail::to_mf_params<double>(params, k);

  const std::vector<double> f_app = oracle_features(
      reference, {.mode = FeatureMode::appearance,
                  .theta_alpha = params.theta_alpha,
                  .theta_beta = params.theta_beta});
  const std::vector<double> f_smooth = oracle_features(
      reference,
      {.mode = FeatureMode::smoothness, .theta_gamma = params.theta_gamma});
  const int d_app = static_cast<int>(f_app.size() / static_cast<std::size_t>(n));
  const int d_smooth =
      static_cast<int>(f_smooth.size() / static_cast<std::size_t>(n));

  // Unary in double, derived here rather than through the production path.
  std::vector<double> u(static_cast<std::size_t>(n) * k);
  for (std::int64_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int l = 0; l < k; ++l) sum += static_cast<double>(probs.at(i, l));
    const double scale = sum > 0.0 ? 1.0 / sum : 1.0;
    for (int l = 0; l < k; ++l) {
      const double pv = std::clamp(
          static_cast<double>(probs.at(i, l)) * scale, 1e-8, 1.0);
      u[i * k + l] = -std::log(pv);
    }
  }

  std::vector<double> q(static_cast<std::size_t>(n) * k);
  for (std::int64_t i = 0; i < n; ++i) {
    for (int l = 0; l < k; ++l) q[i * k + l] = -u[i * k + l];
    softmax_row_inplace(q.data() + i * k, k);
  }

  // Self-excluded normalized message under one kernel, evaluated literally.
  auto message = [n, k](const std::vector<double>& feat, int d,
                        const std::vector<double>& qin) {
    std::vector<double> out(qin.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      double norm = 0.0;
      std::vector<double> acc(k, 0.0);
      for (std::int64_t j = 0; j < n; ++j) {
        const double w = pair_weight(feat.data() + i * d, feat.data() + j * d, d);
        norm += w;
        if (j == i) continue;
        for (int l = 0; l < k; ++l) acc[l] += w * qin[j * k + l];
      }
      for (int l = 0; l < k; ++l) out[i * k + l] = acc[l] / norm;
    }
    return out;
  };

  for (int t = 0; t < p.iterations; ++t) {
    const std::vector<double> qa = message(f_app, d_app, q);
    const std::vector<double> qs = message(f_smooth, d_smooth, q);
    for (std::int64_t i = 0; i < n; ++i) {
      for (int l = 0; l < k; ++l) {
        double qh = 0.0;
        for (int lp = 0; lp < k; ++lp)
          qh += p.mu[l * k + lp] *
                (p.w1 * qa[i * k + lp] + p.w2 * qs[i * k + lp]);
        q[i * k + l] = -u[i * k + l] - qh;
      }
      softmax_row_inplace(q.data() + i * k, k);
    }
  }

  std::vector<float> data(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) data[i] = static_cast<float>(q[i]);
  return {Tensor(probs.extents(), k, std::move(data))};
}

double numeric_gradient(const std::function<double(double)>& f, double x,
                        double h) {
  const double hi = f(x + h);
  const double lo = f(x - h);
  if (!std::isfinite(hi) || !std::isfinite(lo))
    throw Error("numeric_gradient: non-finite evaluation");
  return (hi - lo) / (2.0 * h);
}

}  // namespace ndcrf::oracle
