#ifndef NDCRF_DETAIL_MF_CORE_HPP
#define NDCRF_DETAIL_MF_CORE_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "ndcrf/densecrf.hpp"
#include "ndcrf/permutohedral.hpp"

// Mean-field inference and its reverse-mode companion, templated on the value
// type: T = float is the production path, T = double backs gradient checks
// and the training driver. Explicitly instantiated for both in densecrf.cpp /
// crf_rnn.cpp.

namespace ndcrf::detail {

template <typename T>
struct MfParams {
  T w1 = 1;
  T w2 = 1;
  int k = 0;
  std::vector<T> mu;  // k*k row-major, zero diagonal
  int iterations = 1;
};

/// CrfParams -> core parameter pack. Resolves an empty mu to Potts(k) and
/// rejects bad iteration counts, non-finite weights, and mu/k mismatches.
template <typename T>
MfParams<T> to_mf_params(const CrfParams& params, int k);

/// One filtering kernel frozen for a run: the lattice plus the reciprocal of
/// its all-ones normalizer (clamped to >= 1e-12 before inversion).
struct FilterKernel {
  const Lattice* lattice = nullptr;
  std::vector<double> inv_eta;
};

FilterKernel make_filter_kernel(const Lattice& lattice);

/// Self-excluded normalized message: (filter(q) - q) * inv_eta, per entry.
template <typename T>
std::vector<T> message_pass(const FilterKernel& kern, std::span<const T> q, int k);

/// q_hat(i,l) = sum_l' mu(l,l') * (w1*qt_app(i,l') + w2*qt_smooth(i,l')).
template <typename T>
void compatibility(std::span<const T> qt_app, std::span<const T> qt_smooth,
                   const MfParams<T>& p, std::int64_t n, std::span<T> q_hat);

/// Intermediates of one iteration, recorded before the local update.
template <typename T>
struct MfRecord {
  std::vector<T> q;  // marginals entering the iteration
  std::vector<T> qt_app;
  std::vector<T> qt_smooth;
  std::vector<T> q_hat;
};

template <typename T>
struct MfResult {
  std::vector<T> q;                    // final marginals
  std::vector<double> max_delta_q;     // one entry per iteration
  std::vector<MfRecord<T>> trace;      // populated only when requested
};

/// Exactly p.iterations rounds starting from softmax(-unary). When keep_trace
/// is false, a kernel whose weight is exactly 0 skips its filtering (the
/// result is unchanged); with a trace the messages are always computed so
/// gradients stay exact even at w = 0.
template <typename T>
MfResult<T> mean_field_run(const FilterKernel& app, const FilterKernel& smooth,
                           std::span<const T> unary, std::int64_t n,
                           const MfParams<T>& p, bool keep_trace);

/// Unary potentials from probabilities: rows renormalized to sum 1, then
/// -log(clamp(p, 1e-8, 1)).
template <typename T>
std::vector<T> unary_values_from_probs(std::span<const float> probs,
                                       std::int64_t n, int k);

/// Everything backward() needs: the two kernels, the inputs, and the
/// per-iteration records of the matching forward run.
template <typename T>
struct RnnTape {
  FilterKernel app;
  FilterKernel smooth;
  std::vector<T> unary;
  MfParams<T> params;
  std::vector<MfRecord<T>> records;
  std::vector<T> q_final;
  std::int64_t n = 0;
};

template <typename T>
struct RnnGrads {
  T d_w1 = 0;
  T d_w2 = 0;
  std::vector<T> d_mu;     // k*k, diagonal exactly 0
  std::vector<T> d_unary;  // n*k
};

template <typename T>
RnnTape<T> rnn_forward(const FilterKernel& app, const FilterKernel& smooth,
                       std::vector<T> unary, std::int64_t n, MfParams<T> params);

/// Exact reverse-mode gradients of the unrolled run w.r.t. w1, w2, mu and the
/// unary input. Gradients flow through the Q recurrence only; the lattices
/// (and the thetas behind them) are constants.
template <typename T>
RnnGrads<T> rnn_backward(const RnnTape<T>& tape, std::span<const T> d_q_final);

}  // namespace ndcrf::detail

#endif
