#ifndef NDCRF_TENSOR_HPP
#define NDCRF_TENSOR_HPP

#include <cstdint>
#include <span>
#include <vector>

#include "ndcrf/errors.hpp"

namespace ndcrf {

/// Dense n-dimensional float32 grid with a trailing channel axis.
/// Storage is row-major over the spatial extents, channel-fastest: element
/// (voxel p, channel ch) lives at flat(p) * channels + ch.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::int64_t> spatial_extents, int channels);
  Tensor(std::vector<std::int64_t> spatial_extents, int channels,
         std::vector<float> data);

  const std::vector<std::int64_t>& extents() const noexcept { return extents_; }
  int channels() const noexcept { return channels_; }
  int rank() const noexcept { return static_cast<int>(extents_.size()); }
  std::int64_t voxels() const noexcept { return voxels_; }
  std::int64_t size() const noexcept { return voxels_ * channels_; }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  std::span<float> voxel(std::int64_t p) noexcept {
    return {data_.data() + p * channels_, static_cast<std::size_t>(channels_)};
  }
  std::span<const float> voxel(std::int64_t p) const noexcept {
    return {data_.data() + p * channels_, static_cast<std::size_t>(channels_)};
  }

  float& at(std::int64_t p, int ch) { return data_[p * channels_ + ch]; }
  float at(std::int64_t p, int ch) const { return data_[p * channels_ + ch]; }

  bool same_shape(const Tensor& o) const noexcept {
    return extents_ == o.extents_ && channels_ == o.channels_;
  }
  bool all_finite() const noexcept;

 private:
  std::vector<std::int64_t> extents_;
  int channels_ = 0;
  std::int64_t voxels_ = 0;
  std::vector<float> data_;
};

/// Per-voxel label indices over the same grid layout as Tensor.
struct LabelMap {
  std::vector<std::int64_t> extents;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::vector<std::int64_t> spatial_extents, std::vector<std::uint8_t> l);

  std::int64_t voxels() const noexcept {
    return static_cast<std::int64_t>(labels.size());
  }
};

/// Per-voxel softmax over the channel axis, max-subtracted for stability.
/// Output rows sum to 1 and lie in (0, 1].
Tensor softmax_channels(const Tensor& t);

/// Per-voxel index of the maximal channel; ties break to the lowest index.
LabelMap argmax_channels(const Tensor& t);

/// 2|A∩B| / (|A|+|B|) over voxels equal to positive_label.
/// Both sets empty counts as perfect agreement (1.0).
double dice_coefficient(const LabelMap& a, const LabelMap& b, int positive_label);

/// Mean over voxels of -log q(voxel, target label), q clamped to >= 1e-8.
double cross_entropy(const Tensor& q, const LabelMap& target);

}  // namespace ndcrf

#endif
