#include "ndcrf/densecrf.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "ndcrf/detail/mf_core.hpp"
#include "ndcrf/detail/simplex.hpp"

namespace ndcrf {

namespace detail {

FilterKernel make_filter_kernel(const Lattice& lattice) {
  FilterKernel kern;
  kern.lattice = &lattice;
  const std::vector<double> ones(static_cast<std::size_t>(lattice.n_points()), 1.0);
  const std::vector<double> eta =
      filter(lattice, std::span<const double>(ones), 1);
  kern.inv_eta.resize(eta.size());
  for (std::size_t i = 0; i < eta.size(); ++i)
    kern.inv_eta[i] = 1.0 / std::max(eta[i], 1e-12);
  return kern;
}

template <typename T>
std::vector<T> message_pass(const FilterKernel& kern, std::span<const T> q, int k) {
  const std::int64_t n = kern.lattice->n_points();
  const std::vector<T> filtered = filter(*kern.lattice, q, k);
  std::vector<T> out(q.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    const double inv_eta = kern.inv_eta[i];
    for (int l = 0; l < k; ++l) {
      const std::int64_t at = i * k + l;
      out[at] = static_cast<T>((static_cast<double>(filtered[at]) -
                                static_cast<double>(q[at])) *
                               inv_eta);
    }
  }
  return out;
}

template <typename T>
void compatibility(std::span<const T> qt_app, std::span<const T> qt_smooth,
                   const MfParams<T>& p, std::int64_t n, std::span<T> q_hat) {
  const int k = p.k;
  const double w1 = static_cast<double>(p.w1);
  const double w2 = static_cast<double>(p.w2);
#pragma omp parallel
  {
    std::vector<double> m(k);
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      for (int lp = 0; lp < k; ++lp)
        m[lp] = w1 * static_cast<double>(qt_app[i * k + lp]) +
                w2 * static_cast<double>(qt_smooth[i * k + lp]);
      for (int l = 0; l < k; ++l) {
        double acc = 0.0;
        const T* mu_row = p.mu.data() + static_cast<std::size_t>(l) * k;
        for (int lp = 0; lp < k; ++lp)
          acc += static_cast<double>(mu_row[lp]) * m[lp];
        q_hat[i * k + l] = static_cast<T>(acc);
      }
    }
  }
}

template <typename T>
MfResult<T> mean_field_run(const FilterKernel& app, const FilterKernel& smooth,
                           std::span<const T> unary, std::int64_t n,
                           const MfParams<T>& p, bool keep_trace) {
  const int k = p.k;
  const std::int64_t nk = n * k;

  std::vector<T> logits(static_cast<std::size_t>(nk));
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < nk; ++i) logits[i] = -unary[i];
  std::vector<T> q(static_cast<std::size_t>(nk));
  softmax_rows(logits.data(), q.data(), n, k);

  MfResult<T> res;
  if (keep_trace) res.trace.reserve(static_cast<std::size_t>(p.iterations));

  for (int t = 0; t < p.iterations; ++t) {
    // With a trace the messages are needed for gradients even when a weight
    // is 0; without one a zero-weight kernel contributes nothing, so skip it.
    std::vector<T> qt_app =
        (keep_trace || p.w1 != T(0))
            ? message_pass<T>(app, q, k)
            : std::vector<T>(static_cast<std::size_t>(nk), T(0));
    std::vector<T> qt_smooth =
        (keep_trace || p.w2 != T(0))
            ? message_pass<T>(smooth, q, k)
            : std::vector<T>(static_cast<std::size_t>(nk), T(0));

    std::vector<T> q_hat(static_cast<std::size_t>(nk));
    compatibility<T>(qt_app, qt_smooth, p, n, q_hat);

#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < nk; ++i) logits[i] = -unary[i] - q_hat[i];
    std::vector<T> q_new(static_cast<std::size_t>(nk));
    softmax_rows(logits.data(), q_new.data(), n, k);

    double max_delta = 0.0;
#pragma omp parallel for schedule(static) reduction(max : max_delta)
    for (std::int64_t i = 0; i < nk; ++i)
      max_delta = std::max(max_delta,
                           std::abs(static_cast<double>(q_new[i]) -
                                    static_cast<double>(q[i])));
    res.max_delta_q.push_back(max_delta);

    if (keep_trace)
      res.trace.push_back({std::move(q), std::move(qt_app), std::move(qt_smooth),
                           std::move(q_hat)});
    q = std::move(q_new);
  }
  res.q = std::move(q);
  return res;
}

template <typename T>
std::vector<T> unary_values_from_probs(std::span<const float> probs,
                                       std::int64_t n, int k) {
  std::vector<T> u(probs.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int l = 0; l < k; ++l) sum += static_cast<double>(probs[i * k + l]);
    const double scale = sum > 0.0 ? 1.0 / sum : 1.0;
    for (int l = 0; l < k; ++l) {
      const double p =
          std::clamp(static_cast<double>(probs[i * k + l]) * scale, 1e-8, 1.0);
      u[i * k + l] = static_cast<T>(-std::log(p));
    }
  }
  return u;
}

template std::vector<float> message_pass<float>(const FilterKernel&,
                                                std::span<const float>, int);
template std::vector<double> message_pass<double>(const FilterKernel&,
                                                  std::span<const double>, int);
template void compatibility<float>(std::span<const float>, std::span<const float>,
                                   const MfParams<float>&, std::int64_t,
                                   std::span<float>);
template void compatibility<double>(std::span<const double>,
                                    std::span<const double>,
                                    const MfParams<double>&, std::int64_t,
                                    std::span<double>);
template MfResult<float> mean_field_run<float>(const FilterKernel&,
                                               const FilterKernel&,
                                               std::span<const float>,
                                               std::int64_t,
                                               const MfParams<float>&, bool);
template MfResult<double> mean_field_run<double>(const FilterKernel&,
                                                 const FilterKernel&,
                                                 std::span<const double>,
                                                 std::int64_t,
                                                 const MfParams<double>&, bool);
template std::vector<float> unary_values_from_probs<float>(std::span<const float>,
                                                           std::int64_t, int);
template std::vector<double> unary_values_from_probs<double>(
    std::span<const float>, std::int64_t, int);

template <typename T>
MfParams<T> to_mf_params(const CrfParams& params, int k) {
  if (params.iterations < 1) throw ConfigError("iterations must be >= 1");
  if (!std::isfinite(params.w1) || !std::isfinite(params.w2))
    throw ConfigError("kernel weights must be finite");
  const CompatibilityMatrix mu =
      params.mu.empty() ? CompatibilityMatrix::potts(k) : params.mu;
  if (mu.labels() != k)
    throw ConfigError("compatibility matrix size does not match label count");
  MfParams<T> p;
  p.w1 = static_cast<T>(params.w1);
  p.w2 = static_cast<T>(params.w2);
  p.k = k;
  p.mu.assign(mu.values().begin(), mu.values().end());
  p.iterations = params.iterations;
  return p;
}

template MfParams<float> to_mf_params<float>(const CrfParams&, int);
template MfParams<double> to_mf_params<double>(const CrfParams&, int);

}  // namespace detail

CompatibilityMatrix::CompatibilityMatrix(int k) : k_(k) {
  if (k < 2) throw ConfigError("compatibility matrix needs k >= 2");
  values_.assign(static_cast<std::size_t>(k) * k, 0.0f);
}

CompatibilityMatrix CompatibilityMatrix::potts(int k) {
  CompatibilityMatrix m(k);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b)
      if (a != b) m.values_[a * k + b] = 1.0f;
  return m;
}

CompatibilityMatrix CompatibilityMatrix::from_rows(
    const std::vector<std::vector<float>>& rows) {
  const int k = static_cast<int>(rows.size());
  CompatibilityMatrix m(k);  // throws for k < 2
  for (int a = 0; a < k; ++a) {
    if (static_cast<int>(rows[a].size()) != k)
      throw ConfigError("compatibility matrix must be square");
    for (int b = 0; b < k; ++b) {
      const float v = rows[a][b];
      if (!std::isfinite(v))
        throw ConfigError("compatibility matrix entries must be finite");
      if (a == b) {
        if (v != 0.0f)
          throw ConfigError("compatibility matrix diagonal must be zero");
      } else {
        m.values_[a * k + b] = v;
      }
    }
  }
  return m;
}

UnaryPotentials unary_from_probs(const Tensor& probs) {
  if (probs.channels() < 2)
    throw ShapeError("unary_from_probs needs at least 2 channels");
  if (!probs.all_finite())
    throw Error("unary_from_probs: non-finite probabilities");
  std::vector<float> u = detail::unary_values_from_probs<float>(
      probs.storage(), probs.voxels(), probs.channels());
  return {Tensor(probs.extents(), probs.channels(), std::move(u))};
}

MeanFieldState init_q(const UnaryPotentials& u) {
  const Tensor& psi = u.psi;
  std::vector<float> logits(psi.storage().size());
  const float* in = psi.data();
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < psi.size(); ++i) logits[i] = -in[i];
  Tensor q(psi.extents(), psi.channels());
  detail::softmax_rows(logits.data(), q.data(), psi.voxels(), psi.channels());
  return {std::move(q)};
}

Messages message_passing(const Lattice& lat_app, const Lattice& lat_smooth,
                         const MeanFieldState& q) {
  const std::int64_t n = q.q.voxels();
  if (lat_app.n_points() != n || lat_smooth.n_points() != n)
    throw ShapeError("message_passing: lattice point count does not match Q");
  const int k = q.q.channels();
  const detail::FilterKernel app = detail::make_filter_kernel(lat_app);
  const detail::FilterKernel smooth = detail::make_filter_kernel(lat_smooth);
  std::vector<float> qa =
      detail::message_pass<float>(app, q.q.storage(), k);
  std::vector<float> qs =
      detail::message_pass<float>(smooth, q.q.storage(), k);
  return {Tensor(q.q.extents(), k, std::move(qa)),
          Tensor(q.q.extents(), k, std::move(qs))};
}

Tensor compatibility_transform(const Tensor& q_tilde_app,
                               const Tensor& q_tilde_smooth,
                               const CrfParams& params) {
  if (!q_tilde_app.same_shape(q_tilde_smooth))
    throw ShapeError("compatibility_transform: message shapes differ");
  const int k = q_tilde_app.channels();
  const detail::MfParams<float> p = detail::to_mf_params<float>(params, k);
  Tensor q_hat(q_tilde_app.extents(), k);
  detail::compatibility<float>(q_tilde_app.storage(), q_tilde_smooth.storage(), p,
                               q_tilde_app.voxels(),
                               std::span<float>(q_hat.storage()));
  return q_hat;
}

MeanFieldState local_update(const UnaryPotentials& u, const Tensor& q_hat) {
  if (!u.psi.same_shape(q_hat))
    throw ShapeError("local_update: unary and q_hat shapes differ");
  const float* psi = u.psi.data();
  const float* qh = q_hat.data();
  std::vector<float> logits(u.psi.storage().size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < u.psi.size(); ++i) logits[i] = -psi[i] - qh[i];
  Tensor q(u.psi.extents(), u.psi.channels());
  detail::softmax_rows(logits.data(), q.data(), u.psi.voxels(), u.psi.channels());
  return {std::move(q)};
}

MeanFieldState mean_field_inference(const Tensor& reference, const Tensor& probs,
                                    const CrfParams& params,
                                    InferenceStats* stats) {
  if (reference.extents() != probs.extents())
    throw ShapeError("mean_field_inference: reference and probs extents differ");
  if (probs.channels() < 2)
    throw ShapeError("mean_field_inference needs at least 2 labels");
  if (!probs.all_finite())
    throw Error("mean_field_inference: non-finite probabilities");

  const int k = probs.channels();
  const detail::MfParams<float> p = detail::to_mf_params<float>(params, k);

  const FeatureMatrix f_app = build_features(
      reference, {.mode = FeatureMode::appearance,
                  .theta_alpha = params.theta_alpha,
                  .theta_beta = params.theta_beta});
  const FeatureMatrix f_smooth = build_features(
      reference,
      {.mode = FeatureMode::smoothness, .theta_gamma = params.theta_gamma});
  const Lattice lat_app(f_app);
  const Lattice lat_smooth(f_smooth);
  const detail::FilterKernel app = detail::make_filter_kernel(lat_app);
  const detail::FilterKernel smooth = detail::make_filter_kernel(lat_smooth);

  const std::vector<float> unary = detail::unary_values_from_probs<float>(
      probs.storage(), probs.voxels(), k);

  detail::MfResult<float> res = detail::mean_field_run<float>(
      app, smooth, unary, probs.voxels(), p, false);
  if (stats) stats->max_delta_q = std::move(res.max_delta_q);
  return {Tensor(probs.extents(), k, std::move(res.q))};
}

}  // namespace ndcrf
