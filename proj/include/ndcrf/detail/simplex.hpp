#ifndef NDCRF_DETAIL_SIMPLEX_HPP
#define NDCRF_DETAIL_SIMPLEX_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace ndcrf::detail {

// Row-wise softmax shared by the public tensor op and the mean-field core so
// identities like "zero messages reproduce the initialization" hold bit for
// bit. Max-subtracted; exp and normalization accumulate in double. in == out
// aliasing is allowed.
template <typename T>
void softmax_rows(const T* in, T* out, std::int64_t n, int k) {
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < n; ++p) {
    const T* row = in + p * k;
    T* orow = out + p * k;
    T m = row[0];
    for (int ch = 1; ch < k; ++ch) m = std::max(m, row[ch]);
    double sum = 0.0;
    for (int ch = 0; ch < k; ++ch) {
      const double e =
          std::exp(static_cast<double>(row[ch]) - static_cast<double>(m));
      orow[ch] = static_cast<T>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int ch = 0; ch < k; ++ch)
      orow[ch] = static_cast<T>(static_cast<double>(orow[ch]) * inv);
  }
}

}  // namespace ndcrf::detail

#endif
