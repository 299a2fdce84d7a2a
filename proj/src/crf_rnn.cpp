#include "ndcrf/crf_rnn.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

namespace ndcrf {

namespace detail {

template <typename T>
RnnTape<T> rnn_forward(const FilterKernel& app, const FilterKernel& smooth,
                       std::vector<T> unary, std::int64_t n, MfParams<T> params) {
  MfResult<T> res = mean_field_run<T>(app, smooth, unary, n, params, true);
  RnnTape<T> tape;
  tape.app = app;
  tape.smooth = smooth;
  tape.unary = std::move(unary);
  tape.params = std::move(params);
  tape.records = std::move(res.trace);
  tape.q_final = std::move(res.q);
  tape.n = n;
  return tape;
}

namespace {

// dz = q * (g - <g, q>) per row, the pullback of q = softmax(z).
template <typename T>
void softmax_pullback(const std::vector<T>& q, const std::vector<double>& g,
                      std::int64_t n, int k, std::vector<double>& dz) {
  for (std::int64_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (int l = 0; l < k; ++l)
      dot += g[i * k + l] * static_cast<double>(q[i * k + l]);
    for (int l = 0; l < k; ++l)
      dz[i * k + l] = static_cast<double>(q[i * k + l]) * (g[i * k + l] - dot);
  }
}

// Pullback of one kernel's message q_tilde = (F(q) - q) * inv_eta, where the
// message gradient is w * dm: accumulates F_transpose(g2) - g2 into g with
// g2 = w * dm * inv_eta.
void add_message_pullback(const FilterKernel& kern, double w,
                          const std::vector<double>& dm, int k,
                          std::vector<double>& g, std::vector<double>& g2) {
  const std::int64_t n = kern.lattice->n_points();
  for (std::int64_t i = 0; i < n; ++i) {
    const double s = w * kern.inv_eta[i];
    for (int l = 0; l < k; ++l) g2[i * k + l] = s * dm[i * k + l];
  }
  const std::vector<double> ft = filter_transpose(*kern.lattice, g2, k);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += ft[i] - g2[i];
}

}  // namespace

template <typename T>
RnnGrads<T> rnn_backward(const RnnTape<T>& tape, std::span<const T> d_q_final) {
  const std::int64_t n = tape.n;
  const int k = tape.params.k;
  const std::int64_t nk = n * k;
  if (static_cast<std::int64_t>(d_q_final.size()) != nk)
    throw ShapeError("backward: upstream gradient shape mismatch");
  if (static_cast<int>(tape.records.size()) != tape.params.iterations)
    throw Error("backward: tape record count does not match iterations");

  const double w1 = static_cast<double>(tape.params.w1);
  const double w2 = static_cast<double>(tape.params.w2);

  std::vector<double> g(nk);
  for (std::int64_t i = 0; i < nk; ++i) g[i] = static_cast<double>(d_q_final[i]);
  std::vector<double> du(nk, 0.0);
  std::vector<double> dmu(static_cast<std::size_t>(k) * k, 0.0);
  double dw1 = 0.0, dw2 = 0.0;

  std::vector<double> dh(nk), m(nk), dm(nk), g2(nk);

  for (int t = static_cast<int>(tape.records.size()) - 1; t >= 0; --t) {
    const MfRecord<T>& rec = tape.records[t];
    const std::vector<T>& q_next = t + 1 < static_cast<int>(tape.records.size())
                                       ? tape.records[t + 1].q
                                       : tape.q_final;

    // q_next = softmax(-u - q_hat): du and dq_hat are both -dz.
    softmax_pullback(q_next, g, n, k, dh);
    for (std::int64_t i = 0; i < nk; ++i) {
      du[i] -= dh[i];
      dh[i] = -dh[i];
    }

    for (std::int64_t i = 0; i < nk; ++i)
      m[i] = w1 * static_cast<double>(rec.qt_app[i]) +
             w2 * static_cast<double>(rec.qt_smooth[i]);

    // q_hat(i,l) = sum_l' mu(l,l') m(i,l')
    for (std::int64_t i = 0; i < n; ++i)
      for (int l = 0; l < k; ++l) {
        const double dhl = dh[i * k + l];
        if (dhl == 0.0) continue;
        for (int lp = 0; lp < k; ++lp) dmu[l * k + lp] += dhl * m[i * k + lp];
      }

    for (std::int64_t i = 0; i < n; ++i)
      for (int lp = 0; lp < k; ++lp) {
        double acc = 0.0;
        for (int l = 0; l < k; ++l)
          acc += static_cast<double>(tape.params.mu[l * k + lp]) * dh[i * k + l];
        dm[i * k + lp] = acc;
      }

    for (std::int64_t i = 0; i < nk; ++i) {
      dw1 += dm[i] * static_cast<double>(rec.qt_app[i]);
      dw2 += dm[i] * static_cast<double>(rec.qt_smooth[i]);
    }

    std::fill(g.begin(), g.end(), 0.0);
    add_message_pullback(tape.app, w1, dm, k, g, g2);
    add_message_pullback(tape.smooth, w2, dm, k, g, g2);
  }

  // Initialization q_0 = softmax(-u).
  softmax_pullback(tape.records[0].q, g, n, k, dh);
  for (std::int64_t i = 0; i < nk; ++i) du[i] -= dh[i];

  for (int l = 0; l < k; ++l) dmu[l * k + l] = 0.0;

  RnnGrads<T> out;
  out.d_w1 = static_cast<T>(dw1);
  out.d_w2 = static_cast<T>(dw2);
  out.d_mu.resize(dmu.size());
  for (std::size_t i = 0; i < dmu.size(); ++i)
    out.d_mu[i] = static_cast<T>(dmu[i]);
  out.d_unary.resize(du.size());
  for (std::size_t i = 0; i < du.size(); ++i)
    out.d_unary[i] = static_cast<T>(du[i]);
  return out;
}

template RnnTape<float> rnn_forward<float>(const FilterKernel&,
                                           const FilterKernel&,
                                           std::vector<float>, std::int64_t,
                                           MfParams<float>);
template RnnTape<double> rnn_forward<double>(const FilterKernel&,
                                             const FilterKernel&,
                                             std::vector<double>, std::int64_t,
                                             MfParams<double>);
template RnnGrads<float> rnn_backward<float>(const RnnTape<float>&,
                                             std::span<const float>);
template RnnGrads<double> rnn_backward<double>(const RnnTape<double>&,
                                               std::span<const double>);

}  // namespace detail

namespace {

void validate_inference_inputs(const Tensor& reference, const Tensor& probs) {
  if (reference.extents() != probs.extents())
    throw ShapeError("reference and probs extents differ");
  if (probs.channels() < 2) throw ShapeError("need at least 2 labels");
  if (!probs.all_finite()) throw Error("non-finite probabilities");
}

struct BuiltLattices {
  std::unique_ptr<Lattice> app;
  std::unique_ptr<Lattice> smooth;
};

BuiltLattices build_lattices(const Tensor& reference, const CrfParams& params) {
  const FeatureMatrix f_app = build_features(
      reference, {.mode = FeatureMode::appearance,
                  .theta_alpha = params.theta_alpha,
                  .theta_beta = params.theta_beta});
  const FeatureMatrix f_smooth = build_features(
      reference,
      {.mode = FeatureMode::smoothness, .theta_gamma = params.theta_gamma});
  return {std::make_unique<Lattice>(f_app), std::make_unique<Lattice>(f_smooth)};
}

}  // namespace

std::pair<MeanFieldState, Tape> forward_with_tape(const Tensor& reference,
                                                  const Tensor& probs,
                                                  const CrfParams& params) {
  validate_inference_inputs(reference, probs);
  const int k = probs.channels();
  const std::int64_t n = probs.voxels();
  detail::MfParams<float> p = detail::to_mf_params<float>(params, k);

  Tape tape;
  tape.extents = probs.extents();
  BuiltLattices lats = build_lattices(reference, params);
  tape.lat_app = std::move(lats.app);
  tape.lat_smooth = std::move(lats.smooth);

  std::vector<float> unary =
      detail::unary_values_from_probs<float>(probs.storage(), n, k);
  tape.run = detail::rnn_forward<float>(detail::make_filter_kernel(*tape.lat_app),
                                        detail::make_filter_kernel(*tape.lat_smooth),
                                        std::move(unary), n, std::move(p));

  MeanFieldState state{
      Tensor(probs.extents(), k, std::vector<float>(tape.run.q_final))};
  return {std::move(state), std::move(tape)};
}

Gradients backward(const Tape& tape, const Tensor& d_loss_d_q) {
  const int k = tape.run.params.k;
  if (d_loss_d_q.extents() != tape.extents || d_loss_d_q.channels() != k)
    throw ShapeError("backward: gradient shape does not match taped run");

  detail::RnnGrads<float> g =
      detail::rnn_backward<float>(tape.run, d_loss_d_q.storage());

  Gradients out;
  out.d_w1 = g.d_w1;
  out.d_w2 = g.d_w2;
  out.d_mu = CompatibilityMatrix(k);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b) out.d_mu.set(a, b, g.d_mu[a * k + b]);
  out.d_unary = Tensor(tape.extents, k, std::move(g.d_unary));
  return out;
}

Tensor distort_labels(const LabelMap& labels, int k, std::uint64_t seed,
                      float strength) {
  if (k < 2) throw ConfigError("distort_labels needs k >= 2");
  if (!(strength >= 0.0f) || strength >= 1.0f)
    throw ConfigError("distort_labels strength must lie in [0, 1)");
  const std::int64_t n = labels.voxels();
  for (std::int64_t i = 0; i < n; ++i)
    if (labels.labels[i] >= k) throw ShapeError("distort_labels: label >= k");

  std::mt19937_64 rng(seed);
  // Explicit mapping instead of std::uniform_real_distribution so the stream
  // is identical across standard library implementations.
  auto next_unit = [&rng]() {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
  };

  std::vector<double> field(static_cast<std::size_t>(n) * k, 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    int lab = labels.labels[i];
    if (strength > 0.0f && next_unit() < static_cast<double>(strength)) {
      int r = static_cast<int>(next_unit() * (k - 1));
      r = std::min(r, k - 2);
      lab = r >= lab ? r + 1 : r;
    }
    field[i * k + lab] = 1.0;
  }

  // Separable 3-wide box blur, zero-padded: renormalization below restores
  // the simplex rows that border shrinkage deflates.
  const auto& extents = labels.extents;
  const int rank = static_cast<int>(extents.size());
  std::vector<std::int64_t> stride(rank, 1);
  for (int axis = rank - 2; axis >= 0; --axis)
    stride[axis] = stride[axis + 1] * extents[axis + 1];

  std::vector<double> next(field.size());
  for (int axis = 0; axis < rank; ++axis) {
    const std::int64_t st = stride[axis];
    const std::int64_t ext = extents[axis];
    for (std::int64_t p = 0; p < n; ++p) {
      const std::int64_t coord = (p / st) % ext;
      for (int l = 0; l < k; ++l) {
        double s = field[p * k + l];
        if (coord > 0) s += field[(p - st) * k + l];
        if (coord + 1 < ext) s += field[(p + st) * k + l];
        next[p * k + l] = s / 3.0;
      }
    }
    std::swap(field, next);
  }

  std::vector<float> out(field.size());
  for (std::int64_t i = 0; i < n; ++i) {
    double sum = 0.0;
    for (int l = 0; l < k; ++l) sum += field[i * k + l];
    const double inv = 1.0 / sum;
    for (int l = 0; l < k; ++l)
      out[i * k + l] = static_cast<float>(field[i * k + l] * inv);
  }
  return Tensor(extents, k, std::move(out));
}

namespace {

double loss_and_dice(const std::vector<double>& q, const LabelMap& truth,
                     std::int64_t n, int k, std::vector<double>& dice_out) {
  double loss = 0.0;
  std::vector<std::uint8_t> pred(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const int t = truth.labels[i];
    loss -= std::log(std::max(q[i * k + t], 1e-8));
    int best = 0;
    for (int l = 1; l < k; ++l)
      if (q[i * k + l] > q[i * k + best]) best = l;
    pred[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
  }
  const LabelMap pred_map(truth.extents, std::move(pred));
  dice_out.resize(static_cast<std::size_t>(k));
  for (int l = 0; l < k; ++l) dice_out[l] = dice_coefficient(pred_map, truth, l);
  return loss / static_cast<double>(n);
}

}  // namespace

TrainResult train_overfit(const Tensor& reference, const Tensor& distorted_probs,
                          const LabelMap& labels, const CrfParams& params,
                          const TrainConfig& cfg) {
  validate_inference_inputs(reference, distorted_probs);
  if (labels.extents != distorted_probs.extents())
    throw ShapeError("train_overfit: labels extents do not match probs");
  const int k = distorted_probs.channels();
  const std::int64_t n = distorted_probs.voxels();
  for (std::int64_t i = 0; i < n; ++i)
    if (labels.labels[i] >= k) throw ShapeError("train_overfit: label >= k");
  if (!(cfg.learning_rate >= 0.0f) || !std::isfinite(cfg.learning_rate))
    throw ConfigError("learning_rate must be finite and >= 0");
  if (cfg.steps < 0) throw ConfigError("steps must be >= 0");

  detail::MfParams<double> p = detail::to_mf_params<double>(params, k);

  const BuiltLattices lats = build_lattices(reference, params);
  const detail::FilterKernel app = detail::make_filter_kernel(*lats.app);
  const detail::FilterKernel smooth = detail::make_filter_kernel(*lats.smooth);
  const std::vector<double> unary =
      detail::unary_values_from_probs<double>(distorted_probs.storage(), n, k);

  const double lr = static_cast<double>(cfg.learning_rate);
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed_ms = [&t0]() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - t0)
        .count();
  };

  TrainResult result;
  result.history.reserve(static_cast<std::size_t>(cfg.steps) + 1);

  for (int step = 0;; ++step) {
    detail::RnnTape<double> tape =
        detail::rnn_forward<double>(app, smooth, unary, n, p);

    TrainRecord rec;
    rec.step = step;
    rec.loss = loss_and_dice(tape.q_final, labels, n, k, rec.dice);
    rec.wall_ms = elapsed_ms();
    if (!std::isfinite(rec.loss))
      throw DivergenceError("training diverged: loss is not finite", step);
    result.history.push_back(std::move(rec));

    if (step == cfg.steps) break;

    // dLoss/dQ of mean cross-entropy: nonzero only at the target label, and
    // only where Q escaped the 1e-8 clamp.
    std::vector<double> g(static_cast<std::size_t>(n) * k, 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
      const int t = labels.labels[i];
      const double qv = tape.q_final[i * k + t];
      if (qv >= 1e-8)
        g[i * k + t] = -1.0 / (static_cast<double>(n) * qv);
    }

    const detail::RnnGrads<double> grads = detail::rnn_backward<double>(tape, g);
    p.w1 -= lr * grads.d_w1;
    p.w2 -= lr * grads.d_w2;
    if (cfg.train_mu)
      for (std::size_t i = 0; i < p.mu.size(); ++i) p.mu[i] -= lr * grads.d_mu[i];
  }

  result.params = params;
  result.params.w1 = static_cast<float>(p.w1);
  result.params.w2 = static_cast<float>(p.w2);
  result.params.mu = CompatibilityMatrix(k);
  for (int a = 0; a < k; ++a)
    for (int b = 0; b < k; ++b)
      result.params.mu.set(a, b, static_cast<float>(p.mu[a * k + b]));
  return result;
}

void write_history_csv(const std::vector<TrainRecord>& history,
                       const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open history file: " + path.string());

  const std::size_t k = history.empty() ? 0 : history.front().dice.size();
  out << "step,loss";
  for (std::size_t l = 0; l < k; ++l) out << ",dice_" << l;
  out << ",wall_ms\n";

  char buf[64];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const TrainRecord& rec : history) {
    out << rec.step << ',' << num(rec.loss);
    for (double d : rec.dice) out << ',' << num(d);
    std::snprintf(buf, sizeof buf, "%.3f", rec.wall_ms);
    out << ',' << buf << '\n';
  }
  if (!out.flush()) throw IoError("failed writing history file: " + path.string());
}

}  // namespace ndcrf
