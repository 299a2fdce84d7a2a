#ifndef NDCRF_DENSECRF_HPP
#define NDCRF_DENSECRF_HPP

#include <span>
#include <vector>

#include "ndcrf/permutohedral.hpp"
#include "ndcrf/tensor.hpp"

namespace ndcrf {

/// k x k label-pair penalty with the diagonal structurally pinned to zero:
/// writes to diagonal entries are ignored, reads return 0.
class CompatibilityMatrix {
 public:
  CompatibilityMatrix() = default;
  explicit CompatibilityMatrix(int k);

  /// 1 everywhere off the diagonal.
  static CompatibilityMatrix potts(int k);
  /// Validated construction from a full matrix: must be square, finite, and
  /// already zero on the diagonal (ConfigError otherwise).
  static CompatibilityMatrix from_rows(const std::vector<std::vector<float>>& rows);

  int labels() const noexcept { return k_; }
  bool empty() const noexcept { return k_ == 0; }

  float at(int a, int b) const { return values_[a * k_ + b]; }
  void set(int a, int b, float v) {
    if (a != b) values_[a * k_ + b] = v;
  }

  std::span<const float> values() const noexcept { return values_; }

 private:
  int k_ = 0;
  std::vector<float> values_;  // k*k row-major, diagonal kept at 0
};

/// Everything that defines one CRF: kernel widths, kernel weights, label
/// compatibility, and the fixed iteration count of the unrolled loop.
/// An empty mu means "Potts over however many labels the input has".
struct CrfParams {
  float theta_alpha = 0.0f;  // appearance kernel, spatial std-dev
  float theta_beta = 0.0f;   // appearance kernel, intensity std-dev
  float theta_gamma = 0.0f;  // smoothness kernel, spatial std-dev
  float w1 = 1.0f;           // appearance kernel weight
  float w2 = 1.0f;           // smoothness kernel weight
  CompatibilityMatrix mu;
  int iterations = 5;
};

/// Per-voxel, per-label costs (negative log-probabilities).
struct UnaryPotentials {
  Tensor psi;
};

/// Mean-field marginals Q; rows live on the probability simplex.
struct MeanFieldState {
  Tensor q;
};

/// psi = -log(clamp(p, 1e-8, 1)) after renormalizing each row to sum 1.
UnaryPotentials unary_from_probs(const Tensor& probs);

/// Q = softmax over labels of -psi.
MeanFieldState init_q(const UnaryPotentials& u);

struct Messages {
  Tensor appearance;
  Tensor smoothness;
};

/// Self-excluded normalized filtering of Q under both kernels:
/// q_tilde = (filter(Q) - Q) / eta with eta the filtered all-ones channel
/// (clamped to >= 1e-12), i.e. the inclusive normalized filter minus the
/// point's own normalized self-contribution.
Messages message_passing(const Lattice& lat_app, const Lattice& lat_smooth,
                         const MeanFieldState& q);

/// q_hat(i,l) = sum_l' mu(l,l') * (w1*qt_app(i,l') + w2*qt_smooth(i,l')).
Tensor compatibility_transform(const Tensor& q_tilde_app,
                               const Tensor& q_tilde_smooth,
                               const CrfParams& params);

/// Q = softmax over labels of (-psi - q_hat).
MeanFieldState local_update(const UnaryPotentials& u, const Tensor& q_hat);

/// Per-iteration max |Q_new - Q_old|, exposed for diagnostics only.
struct InferenceStats {
  std::vector<double> max_delta_q;
};

/// Builds both lattices once, then runs exactly params.iterations rounds of
/// message passing -> compatibility transform -> local update.
MeanFieldState mean_field_inference(const Tensor& reference, const Tensor& probs,
                                    const CrfParams& params,
                                    InferenceStats* stats = nullptr);

}  // namespace ndcrf

#endif
