#ifndef NDCRF_CRF_RNN_HPP
#define NDCRF_CRF_RNN_HPP

#include <cstdint>
#include <filesystem>
#include <memory>
#include <utility>
#include <vector>

#include "ndcrf/densecrf.hpp"
#include "ndcrf/detail/mf_core.hpp"
#include "ndcrf/tensor.hpp"

namespace ndcrf {

/// Frozen record of one taped forward run; owns the lattices its kernels
/// point into. Treat fields as read-only.
struct Tape {
  std::unique_ptr<Lattice> lat_app;
  std::unique_ptr<Lattice> lat_smooth;
  detail::RnnTape<float> run;
  std::vector<std::int64_t> extents;
};

struct Gradients {
  float d_w1 = 0.0f;
  float d_w2 = 0.0f;
  CompatibilityMatrix d_mu;  // diagonal exactly 0
  Tensor d_unary;            // N x k
};

/// Identical numerics to mean_field_inference (the returned Q is bit-equal)
/// plus the per-iteration intermediates needed for backward().
std::pair<MeanFieldState, Tape> forward_with_tape(const Tensor& reference,
                                                  const Tensor& probs,
                                                  const CrfParams& params);

/// Exact reverse-mode gradients of the unrolled run for w1, w2, mu, and the
/// unary input, given dLoss/dQ at the final marginals. Gradients flow through
/// the Q recurrence, not through the lattices or thetas.
Gradients backward(const Tape& tape, const Tensor& d_loss_d_q);

/// Seeded soft corruption of a ground-truth labelling: one-hot encode, flip
/// each voxel's label with probability `strength` to a uniformly random other
/// label, box-blur 3 wide along every spatial axis (zero-padded borders),
/// then renormalize rows. Simulates a bad upstream classifier.
Tensor distort_labels(const LabelMap& labels, int k, std::uint64_t seed,
                      float strength);

struct TrainConfig {
  double learning_rate = 0.05;
  int steps = 300;
  bool train_mu = false;
  std::uint64_t seed = 0;
};

/// One history row. Row 0 is the baseline at the initial parameters; row s
/// describes the model after s SGD updates.
struct TrainRecord {
  int step = 0;
  double loss = 0.0;
  std::vector<double> dice;  // per label, argmax(Q) vs ground truth
  double wall_ms = 0.0;      // elapsed since training start
};

struct TrainResult {
  CrfParams params;
  std::vector<TrainRecord> history;  // cfg.steps + 1 rows
};

/// Plain SGD on {w1, w2} (+ off-diagonal mu entries when cfg.train_mu),
/// minimizing mean cross-entropy between the final marginals and `labels`.
/// Runs the float64 path internally; fully deterministic for a fixed seed.
/// Throws DivergenceError (with the step index) when the loss stops being
/// finite.
TrainResult train_overfit(const Tensor& reference, const Tensor& distorted_probs,
                          const LabelMap& labels, const CrfParams& params,
                          const TrainConfig& cfg);

/// CSV with header step,loss,dice_0..dice_{k-1},wall_ms.
void write_history_csv(const std::vector<TrainRecord>& history,
                       const std::filesystem::path& path);

}  // namespace ndcrf

#endif
