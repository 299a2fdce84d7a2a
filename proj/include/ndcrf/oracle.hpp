#ifndef NDCRF_ORACLE_HPP
#define NDCRF_ORACLE_HPP

#include <functional>

#include "ndcrf/densecrf.hpp"
#include "ndcrf/permutohedral.hpp"
#include "ndcrf/tensor.hpp"

// Brute-force float64 references used only by tests and the acceptance
// harness. They re-derive features, unaries, and softmaxes with their own
// code so agreement tests are genuinely independent of the fast paths.

namespace ndcrf::oracle {

/// Exact O(N^2) Gaussian filtering: out_i = sum_j exp(-|f_i-f_j|^2/2) v_j.
/// exclude_self drops the i == j term from the numerator; the normalizer
/// always keeps it, matching the fast filter's self-exclusion convention.
/// Guarded to N <= 10,000.
Tensor brute_filter(const Tensor& reference, const Tensor& values,
                    const FeatureConfig& config, bool exclude_self,
                    bool normalize);

/// The mean-field update evaluated literally with brute_filter
/// (exclude_self=true, normalized), float64 throughout. Guarded to N <= 4096.
MeanFieldState exact_mean_field(const Tensor& reference, const Tensor& probs,
                                const CrfParams& params);

/// Central difference (f(x+h) - f(x-h)) / 2h.
double numeric_gradient(const std::function<double(double)>& f, double x,
                        double h);

}  // namespace ndcrf::oracle

#endif
