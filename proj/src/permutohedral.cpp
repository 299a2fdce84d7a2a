#include "ndcrf/permutohedral.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

namespace ndcrf {

namespace detail {

VertexTable::VertexTable(int key_dim, std::int64_t max_entries)
    : key_dim_(key_dim) {
  // Oversize so the load factor stays below 2/3 even when every simplex
  // corner is distinct; the table never rehashes.
  const auto want = static_cast<std::uint64_t>(std::max<std::int64_t>(max_entries, 1));
  capacity_ = static_cast<std::int64_t>(std::bit_ceil(want + want / 2));
  slot_vertex_.assign(static_cast<std::size_t>(capacity_), -1);
  slot_keys_.assign(static_cast<std::size_t>(capacity_) * key_dim_, 0);
}

std::int32_t VertexTable::insert(std::span<const std::int16_t> key) {
  std::int64_t slot = static_cast<std::int64_t>(hash(key));
  for (std::int64_t probes = 0; probes < capacity_; ++probes) {
    const std::int32_t v = slot_vertex_[slot];
    if (v < 0) {
      if (n_entries_ == capacity_)
        throw LatticeCapacityError("lattice vertex table is full");
      std::copy(key.begin(), key.end(), slot_keys_.begin() + slot * key_dim_);
      const auto idx = static_cast<std::int32_t>(n_entries_++);
      slot_vertex_[slot] = idx;
      return idx;
    }
    if (key_equals(slot, key)) return v;
    slot = (slot + 1) & (capacity_ - 1);
  }
  throw LatticeCapacityError("lattice vertex table is full");
}

std::int32_t VertexTable::find(std::span<const std::int16_t> key) const {
  std::int64_t slot = static_cast<std::int64_t>(hash(key));
  for (std::int64_t probes = 0; probes < capacity_; ++probes) {
    const std::int32_t v = slot_vertex_[slot];
    if (v < 0) return -1;
    if (key_equals(slot, key)) return v;
    slot = (slot + 1) & (capacity_ - 1);
  }
  return -1;
}

}  // namespace detail

FeatureMatrix build_features(const Tensor& reference, const FeatureConfig& config) {
  if (config.mode == FeatureMode::appearance) {
    if (!(config.theta_alpha > 0.0f) || !std::isfinite(config.theta_alpha) ||
        !(config.theta_beta > 0.0f) || !std::isfinite(config.theta_beta))
      throw ConfigError("appearance features need finite theta_alpha > 0 and theta_beta > 0");
  } else {
    if (!(config.theta_gamma > 0.0f) || !std::isfinite(config.theta_gamma))
      throw ConfigError("smoothness features need finite theta_gamma > 0");
  }
  if (!reference.all_finite())
    throw Error("build_features: reference contains non-finite values");

  const int rank = reference.rank();
  const int ref_c = reference.channels();
  const bool appearance = config.mode == FeatureMode::appearance;
  const float inv_spatial =
      1.0f / (appearance ? config.theta_alpha : config.theta_gamma);
  const float inv_intensity = appearance ? 1.0f / config.theta_beta : 0.0f;

  FeatureMatrix fm;
  fm.n_points = reference.voxels();
  fm.dim = appearance ? rank + ref_c : rank;
  fm.values.resize(static_cast<std::size_t>(fm.n_points) * fm.dim);

  const auto& extents = reference.extents();
  const float* ref_data = reference.data();
  float* out = fm.values.data();
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < fm.n_points; ++p) {
    float* row = out + p * fm.dim;
    std::int64_t rem = p;
    for (int axis = rank - 1; axis >= 0; --axis) {
      const std::int64_t coord = rem % extents[axis];
      rem /= extents[axis];
      row[axis] = static_cast<float>(coord) * inv_spatial;
    }
    if (appearance)
      for (int ch = 0; ch < ref_c; ++ch)
        row[rank + ch] = ref_data[p * ref_c + ch] * inv_intensity;
  }
  return fm;
}

namespace {

constexpr std::int64_t kBuildChunk = 1 << 16;

}  // namespace

Lattice::Lattice(const FeatureMatrix& features) {
  dim_ = features.dim;
  n_points_ = features.n_points;
  const int d = dim_;
  if (d < 1) throw ShapeError("lattice needs feature dimension >= 1");
  if (n_points_ < 1) throw ShapeError("lattice needs at least one point");
  if (features.values.size() !=
      static_cast<std::size_t>(n_points_) * static_cast<std::size_t>(d))
    throw ShapeError("feature matrix storage does not match n_points * dim");

  table_ = detail::VertexTable(d, n_points_ * (d + 1));
  offsets_.resize(static_cast<std::size_t>(n_points_) * (d + 1));
  weights_.resize(static_cast<std::size_t>(n_points_) * (d + 1));

  // Embedding scale: with the [1,2,1] blur this makes the aggregate filter
  // approximate a unit-variance Gaussian per feature dimension.
  std::vector<float> scale(d);
  const float inv_std_dev = std::sqrt(2.0f / 3.0f) * static_cast<float>(d + 1);
  for (int i = 0; i < d; ++i)
    scale[i] = inv_std_dev / std::sqrt(static_cast<float>((i + 1) * (i + 2)));

  // canonical[r][q]: coordinate of the remainder-r simplex corner for a
  // feature coordinate of rank q, relative to the remainder-0 corner.
  std::vector<int> canonical((d + 1) * (d + 1));
  for (int r = 0; r <= d; ++r)
    for (int q = 0; q <= d; ++q)
      canonical[r * (d + 1) + q] = q <= d - r ? r : r - (d + 1);

  // Leave headroom for the +-(d+1) steps taken when forming neighbor keys.
  const int limit = 32767 - (d + 1);

  std::vector<std::int16_t> chunk_keys(
      static_cast<std::size_t>(std::min(kBuildChunk, n_points_)) * (d + 1) * d);
  bool range_ok = true;

  for (std::int64_t chunk_lo = 0; chunk_lo < n_points_; chunk_lo += kBuildChunk) {
    const std::int64_t chunk_hi = std::min(chunk_lo + kBuildChunk, n_points_);

    // Per-point geometry: elevate onto the hyperplane, round to the nearest
    // remainder-0 lattice point, repair ranks back onto the zero-sum plane,
    // then read off barycentric weights and the d+1 vertex keys.
#pragma omp parallel
    {
      std::vector<float> elevated(d + 1);
      std::vector<int> rem0(d + 1), rank(d + 1);
      std::vector<float> bary(d + 2);
#pragma omp for schedule(static) reduction(&& : range_ok)
      for (std::int64_t p = chunk_lo; p < chunk_hi; ++p) {
        const float* f = features.values.data() + p * d;

        float sm = 0.0f;
        for (int j = d; j > 0; --j) {
          const float cf = f[j - 1] * scale[j - 1];
          elevated[j] = sm - static_cast<float>(j) * cf;
          sm += cf;
        }
        elevated[0] = sm;

        int sum = 0;
        for (int j = 0; j <= d; ++j) {
          const float v = elevated[j] / static_cast<float>(d + 1);
          const float up = std::ceil(v) * static_cast<float>(d + 1);
          const float down = std::floor(v) * static_cast<float>(d + 1);
          rem0[j] =
              static_cast<int>(up - elevated[j] < elevated[j] - down ? up : down);
          sum += rem0[j] / (d + 1);
        }

        std::fill(rank.begin(), rank.end(), 0);
        for (int i = 0; i < d; ++i) {
          const float di = elevated[i] - static_cast<float>(rem0[i]);
          for (int j = i + 1; j <= d; ++j) {
            if (di < elevated[j] - static_cast<float>(rem0[j]))
              ++rank[i];
            else
              ++rank[j];
          }
        }

        for (int j = 0; j <= d; ++j) {
          rank[j] += sum;
          if (rank[j] < 0) {
            rank[j] += d + 1;
            rem0[j] += d + 1;
          } else if (rank[j] > d) {
            rank[j] -= d + 1;
            rem0[j] -= d + 1;
          }
        }

        std::fill(bary.begin(), bary.end(), 0.0f);
        for (int j = 0; j <= d; ++j) {
          const float v =
              (elevated[j] - static_cast<float>(rem0[j])) / static_cast<float>(d + 1);
          bary[d - rank[j]] += v;
          bary[d - rank[j] + 1] -= v;
        }
        // Wrap-around term; in exact arithmetic all entries are already >= 0.
        bary[0] += 1.0f + bary[d + 1];

        std::int16_t* keys_out = chunk_keys.data() + (p - chunk_lo) * (d + 1) * d;
        float* w_out = weights_.data() + p * (d + 1);
        bool ok = true;
        for (int r = 0; r <= d; ++r) {
          w_out[r] = std::max(bary[r], 0.0f);
          for (int j = 0; j < d; ++j) {
            const int coord = rem0[j] + canonical[r * (d + 1) + rank[j]];
            if (coord < -limit || coord > limit) ok = false;
            keys_out[r * d + j] = static_cast<std::int16_t>(coord);
          }
        }
        range_ok = range_ok && ok;
      }
    }
    if (!range_ok)
      throw LatticeRangeError(
          "lattice key coordinate exceeds the supported int16 range "
          "(feature values too large relative to theta)");

    // Vertex registration in point order keeps indices deterministic; record
    // each fresh key so vertices can be walked without probing the table.
    for (std::int64_t p = chunk_lo; p < chunk_hi; ++p) {
      const std::int16_t* keys_in = chunk_keys.data() + (p - chunk_lo) * (d + 1) * d;
      for (int r = 0; r <= d; ++r) {
        const std::int64_t before = table_.size();
        const std::int32_t v =
            table_.insert({keys_in + r * d, static_cast<std::size_t>(d)});
        if (table_.size() != before)
          keys_.insert(keys_.end(), keys_in + r * d, keys_in + (r + 1) * d);
        offsets_[p * (d + 1) + r] = v;
      }
    }
  }

  n_vertices_ = table_.size();

  // Blur adjacency: along axis j the neighbors of key K are K + 1 - (d+1)e_j
  // and K - 1 + (d+1)e_j, expressed on the d stored coordinates.
  blur_n1_.assign(static_cast<std::size_t>(n_vertices_) * (d + 1), -1);
  blur_n2_.assign(static_cast<std::size_t>(n_vertices_) * (d + 1), -1);
#pragma omp parallel
  {
    std::vector<std::int16_t> n1(d), n2(d);
#pragma omp for schedule(static)
    for (std::int64_t v = 0; v < n_vertices_; ++v) {
      const std::int16_t* key = keys_.data() + v * d;
      for (int j = 0; j <= d; ++j) {
        for (int k = 0; k < d; ++k) {
          n1[k] = static_cast<std::int16_t>(key[k] + 1);
          n2[k] = static_cast<std::int16_t>(key[k] - 1);
        }
        if (j < d) {
          n1[j] = static_cast<std::int16_t>(key[j] - d);
          n2[j] = static_cast<std::int16_t>(key[j] + d);
        }
        blur_n1_[v * (d + 1) + j] = table_.find(n1);
        blur_n2_[v * (d + 1) + j] = table_.find(n2);
      }
    }
  }

  // Splat transpose lists in ascending (point, corner) order so the
  // gather-style parallel splat accumulates in the same order as the serial
  // scatter and stays bit-identical to it.
  vert_begin_.assign(static_cast<std::size_t>(n_vertices_) + 1, 0);
  for (std::int64_t e = 0; e < n_points_ * (d + 1); ++e)
    ++vert_begin_[static_cast<std::size_t>(offsets_[e]) + 1];
  for (std::int64_t v = 0; v < n_vertices_; ++v)
    vert_begin_[v + 1] += vert_begin_[v];
  entry_point_.resize(static_cast<std::size_t>(n_points_) * (d + 1));
  entry_weight_.resize(static_cast<std::size_t>(n_points_) * (d + 1));
  {
    std::vector<std::int64_t> cursor(vert_begin_.begin(), vert_begin_.end() - 1);
    for (std::int64_t p = 0; p < n_points_; ++p) {
      for (int r = 0; r <= d; ++r) {
        const std::int32_t v = offsets_[p * (d + 1) + r];
        const std::int64_t at = cursor[v]++;
        entry_point_[at] = static_cast<std::int32_t>(p);
        entry_weight_[at] = weights_[p * (d + 1) + r];
      }
    }
  }
}

namespace {

void check_filter_args(const Lattice& lattice, std::size_t n_values, int channels) {
  if (channels < 1) throw ShapeError("filter needs channels >= 1");
  if (n_values != static_cast<std::size_t>(lattice.n_points()) *
                      static_cast<std::size_t>(channels))
    throw ShapeError("filter input size does not match n_points * channels");
}

// Intermediate vertex values are stored in T but every reduction accumulates
// in double, for both T = float and T = double.

template <typename T>
void blur_pass(const Lattice& lat, const T* cur, T* nxt, int cc, int axis,
               bool parallel) {
  const std::int64_t n_vertices = lat.n_vertices();
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t v = 0; v < n_vertices; ++v) {
    const std::int32_t up = lat.neighbors_up(v)[axis];
    const std::int32_t down = lat.neighbors_down(v)[axis];
    for (int ch = 0; ch < cc; ++ch) {
      double s = 2.0 * static_cast<double>(cur[v * cc + ch]);
      if (up >= 0) s += static_cast<double>(cur[up * cc + ch]);
      if (down >= 0) s += static_cast<double>(cur[down * cc + ch]);
      nxt[v * cc + ch] = static_cast<T>(0.25 * s);
    }
  }
}

template <typename T>
void slice_stage(const Lattice& lat, const T* cur, std::span<T> out, int channels,
                 bool normalize, bool parallel) {
  const std::int64_t n_points = lat.n_points();
  const int cc = normalize ? channels + 1 : channels;
#pragma omp parallel if (parallel)
  {
    std::vector<double> acc(cc);
#pragma omp for schedule(static)
    for (std::int64_t p = 0; p < n_points; ++p) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const auto verts = lat.simplex_vertices(p);
      const auto bary = lat.barycentric(p);
      for (std::size_t r = 0; r < verts.size(); ++r) {
        const double w = bary[r];
        for (int ch = 0; ch < cc; ++ch)
          acc[ch] += w * static_cast<double>(cur[verts[r] * cc + ch]);
      }
      if (normalize) {
        const double div = std::max(acc[channels], 1e-12);
        for (int ch = 0; ch < channels; ++ch)
          out[p * channels + ch] = static_cast<T>(acc[ch] / div);
      } else {
        for (int ch = 0; ch < channels; ++ch)
          out[p * channels + ch] = static_cast<T>(acc[ch]);
      }
    }
  }
}

template <typename T>
std::vector<T> run_blur_slice(const Lattice& lat, std::vector<T>&& splatted,
                              int channels, bool normalize, bool reverse,
                              bool parallel) {
  const int d = lat.dim();
  const int cc = normalize ? channels + 1 : channels;
  std::vector<T> a = std::move(splatted);
  std::vector<T> b(a.size());
  T* cur = a.data();
  T* nxt = b.data();
  for (int pass = 0; pass <= d; ++pass) {
    const int axis = reverse ? d - pass : pass;
    blur_pass(lat, cur, nxt, cc, axis, parallel);
    std::swap(cur, nxt);
  }
  std::vector<T> out(static_cast<std::size_t>(lat.n_points()) * channels);
  slice_stage(lat, cur, std::span<T>(out), channels, normalize, parallel);
  return out;
}

// Parallel splat: per-vertex gather over the transposed splat lists.
template <typename T>
std::vector<T> splat_gather(const Lattice& lat, std::span<const T> in,
                            int channels, bool normalize) {
  const std::int64_t n_vertices = lat.n_vertices();
  const int cc = normalize ? channels + 1 : channels;
  std::vector<T> vbuf(static_cast<std::size_t>(n_vertices) * cc);
#pragma omp parallel
  {
    std::vector<double> acc(cc);
#pragma omp for schedule(static)
    for (std::int64_t v = 0; v < n_vertices; ++v) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const auto points = lat.contributors(v);
      const auto weights = lat.contributor_weights(v);
      for (std::size_t e = 0; e < points.size(); ++e) {
        const std::int64_t p = points[e];
        const double w = weights[e];
        for (int ch = 0; ch < channels; ++ch)
          acc[ch] += w * static_cast<double>(in[p * channels + ch]);
        if (normalize) acc[channels] += w;
      }
      for (int ch = 0; ch < cc; ++ch)
        vbuf[v * cc + ch] = static_cast<T>(acc[ch]);
    }
  }
  return vbuf;
}

// Reference splat: plain scatter in point order. Contributions reach each
// vertex in the same order as the gather above, so results match exactly.
template <typename T>
std::vector<T> splat_scatter(const Lattice& lat, std::span<const T> in,
                             int channels, bool normalize) {
  const std::int64_t n_points = lat.n_points();
  const int cc = normalize ? channels + 1 : channels;
  std::vector<double> acc(static_cast<std::size_t>(lat.n_vertices()) * cc, 0.0);
  for (std::int64_t p = 0; p < n_points; ++p) {
    const auto verts = lat.simplex_vertices(p);
    const auto bary = lat.barycentric(p);
    for (std::size_t r = 0; r < verts.size(); ++r) {
      const double w = bary[r];
      double* slot = acc.data() + static_cast<std::int64_t>(verts[r]) * cc;
      for (int ch = 0; ch < channels; ++ch)
        slot[ch] += w * static_cast<double>(in[p * channels + ch]);
      if (normalize) slot[channels] += w;
    }
  }
  std::vector<T> vbuf(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) vbuf[i] = static_cast<T>(acc[i]);
  return vbuf;
}

template <typename T>
std::vector<T> filter_impl(const Lattice& lat, std::span<const T> values,
                           int channels, const FilterOptions& opts) {
  check_filter_args(lat, values.size(), channels);
  return run_blur_slice(lat, splat_gather(lat, values, channels, opts.normalize),
                        channels, opts.normalize, opts.reverse, true);
}

template <typename T>
std::vector<T> serial_filter_impl(const Lattice& lat, std::span<const T> values,
                                  int channels, const FilterOptions& opts) {
  check_filter_args(lat, values.size(), channels);
  return run_blur_slice(lat, splat_scatter(lat, values, channels, opts.normalize),
                        channels, opts.normalize, opts.reverse, false);
}

}  // namespace

std::vector<float> filter(const Lattice& lattice, std::span<const float> values,
                          int channels, const FilterOptions& opts) {
  return filter_impl(lattice, values, channels, opts);
}

std::vector<double> filter(const Lattice& lattice, std::span<const double> values,
                           int channels, const FilterOptions& opts) {
  return filter_impl(lattice, values, channels, opts);
}

std::vector<float> filter_transpose(const Lattice& lattice,
                                    std::span<const float> upstream, int channels) {
  return filter_impl(lattice, upstream, channels,
                     {.normalize = false, .reverse = true});
}

std::vector<double> filter_transpose(const Lattice& lattice,
                                     std::span<const double> upstream,
                                     int channels) {
  return filter_impl(lattice, upstream, channels,
                     {.normalize = false, .reverse = true});
}

namespace serial {

std::vector<float> filter(const Lattice& lattice, std::span<const float> values,
                          int channels, const FilterOptions& opts) {
  return serial_filter_impl(lattice, values, channels, opts);
}

std::vector<double> filter(const Lattice& lattice, std::span<const double> values,
                           int channels, const FilterOptions& opts) {
  return serial_filter_impl(lattice, values, channels, opts);
}

}  // namespace serial

}  // namespace ndcrf
