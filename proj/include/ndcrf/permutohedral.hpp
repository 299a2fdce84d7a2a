#ifndef NDCRF_PERMUTOHEDRAL_HPP
#define NDCRF_PERMUTOHEDRAL_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "ndcrf/detail/vertex_table.hpp"
#include "ndcrf/tensor.hpp"

namespace ndcrf {

enum class FeatureMode { smoothness, appearance };

/// Kernel hyper-parameters. theta_alpha/theta_beta drive the appearance
/// (bilateral) kernel, theta_gamma the position-only smoothness kernel.
struct FeatureConfig {
  FeatureMode mode = FeatureMode::smoothness;
  float theta_alpha = 0.0f;
  float theta_beta = 0.0f;
  float theta_gamma = 0.0f;
};

/// One feature row per point. Filtering applies a unit-variance Gaussian over
/// these rows, so coordinates arrive here already divided by their theta.
struct FeatureMatrix {
  std::int64_t n_points = 0;
  int dim = 0;
  std::vector<float> values;  // n_points * dim, row-major

  std::span<const float> row(std::int64_t i) const noexcept {
    return {values.data() + i * dim, static_cast<std::size_t>(dim)};
  }
};

/// smoothness: row i = integer voxel coordinates / theta_gamma.
/// appearance: row i = coordinates / theta_alpha ++ reference values / theta_beta.
FeatureMatrix build_features(const Tensor& reference, const FeatureConfig& config);

/// Frozen simplex geometry for one feature matrix: each point's d+1 enclosing
/// lattice vertices with barycentric weights, plus per-vertex neighbor links
/// along each of the d+1 lattice axes for the blur stage.
class Lattice {
 public:
  explicit Lattice(const FeatureMatrix& features);

  std::int64_t n_points() const noexcept { return n_points_; }
  int dim() const noexcept { return dim_; }
  std::int64_t n_vertices() const noexcept { return n_vertices_; }

  std::span<const std::int32_t> simplex_vertices(std::int64_t point) const noexcept {
    return {offsets_.data() + point * (dim_ + 1),
            static_cast<std::size_t>(dim_ + 1)};
  }
  std::span<const float> barycentric(std::int64_t point) const noexcept {
    return {weights_.data() + point * (dim_ + 1),
            static_cast<std::size_t>(dim_ + 1)};
  }
  /// First d coordinates of the vertex key; the last sums the total to zero.
  std::span<const std::int16_t> vertex_key(std::int64_t vertex) const noexcept {
    return {keys_.data() + vertex * dim_, static_cast<std::size_t>(dim_)};
  }

  /// Neighbor vertex indices along each of the d+1 lattice axes, -1 where the
  /// neighbor was never splatted onto. up = +1 everywhere minus (d+1) on the
  /// axis coordinate; down is the mirror image.
  std::span<const std::int32_t> neighbors_up(std::int64_t vertex) const noexcept {
    return {blur_n1_.data() + vertex * (dim_ + 1),
            static_cast<std::size_t>(dim_ + 1)};
  }
  std::span<const std::int32_t> neighbors_down(std::int64_t vertex) const noexcept {
    return {blur_n2_.data() + vertex * (dim_ + 1),
            static_cast<std::size_t>(dim_ + 1)};
  }

  /// Transposed splat map: the points contributing to a vertex, in ascending
  /// point order, aligned with contributor_weights.
  std::span<const std::int32_t> contributors(std::int64_t vertex) const noexcept {
    return {entry_point_.data() + vert_begin_[vertex],
            static_cast<std::size_t>(vert_begin_[vertex + 1] - vert_begin_[vertex])};
  }
  std::span<const float> contributor_weights(std::int64_t vertex) const noexcept {
    return {entry_weight_.data() + vert_begin_[vertex],
            static_cast<std::size_t>(vert_begin_[vertex + 1] - vert_begin_[vertex])};
  }

  const detail::VertexTable& vertex_table() const noexcept { return table_; }

 private:
  int dim_ = 0;
  std::int64_t n_points_ = 0;
  std::int64_t n_vertices_ = 0;
  detail::VertexTable table_;
  std::vector<std::int32_t> offsets_;  // n_points * (d+1)
  std::vector<float> weights_;         // n_points * (d+1)
  std::vector<std::int16_t> keys_;     // n_vertices * d
  std::vector<std::int32_t> blur_n1_;  // n_vertices * (d+1), -1 when absent
  std::vector<std::int32_t> blur_n2_;
  // Splat transpose: per-vertex contributor list in ascending point order,
  // so gather-style splat reproduces the serial scatter bit for bit.
  std::vector<std::int64_t> vert_begin_;   // n_vertices + 1
  std::vector<std::int32_t> entry_point_;  // n_points * (d+1)
  std::vector<float> entry_weight_;
};

inline Lattice lattice_build(const FeatureMatrix& features) {
  return Lattice(features);
}

struct FilterOptions {
  bool normalize = false;  // filter an all-ones channel alongside and divide by it
  bool reverse = false;    // descending blur-axis order (the transpose map)
};

/// Approximate Gaussian filter: splat, blur ([1,2,1]/4 along each of the d+1
/// lattice axes), slice. Values are n_points x channels, row-major.
/// OpenMP-parallel; bit-identical to serial::filter for any thread count.
std::vector<float> filter(const Lattice& lattice, std::span<const float> values,
                          int channels, const FilterOptions& opts = {});
std::vector<double> filter(const Lattice& lattice, std::span<const double> values,
                           int channels, const FilterOptions& opts = {});

/// Exact transpose of the normalize=false forward map.
std::vector<float> filter_transpose(const Lattice& lattice,
                                    std::span<const float> upstream, int channels);
std::vector<double> filter_transpose(const Lattice& lattice,
                                     std::span<const double> upstream, int channels);

namespace serial {
/// Scatter-based single-thread kernels, kept as the reference the parallel
/// path is tested against (outputs must match bit for bit).
std::vector<float> filter(const Lattice& lattice, std::span<const float> values,
                          int channels, const FilterOptions& opts = {});
std::vector<double> filter(const Lattice& lattice, std::span<const double> values,
                           int channels, const FilterOptions& opts = {});
}  // namespace serial

}  // namespace ndcrf

#endif
