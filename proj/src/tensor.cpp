#include "ndcrf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ndcrf/detail/simplex.hpp"

namespace ndcrf {

namespace {

std::int64_t checked_voxel_count(const std::vector<std::int64_t>& extents) {
  if (extents.empty()) throw ShapeError("tensor spatial rank must be >= 1");
  std::int64_t n = 1;
  for (std::int64_t e : extents) {
    if (e < 1) throw ShapeError("tensor spatial extents must be >= 1");
    n *= e;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::int64_t> spatial_extents, int channels)
    : extents_(std::move(spatial_extents)), channels_(channels) {
  voxels_ = checked_voxel_count(extents_);
  if (channels_ < 1) throw ShapeError("tensor channels must be >= 1");
  data_.assign(static_cast<std::size_t>(voxels_ * channels_), 0.0f);
}

Tensor::Tensor(std::vector<std::int64_t> spatial_extents, int channels,
               std::vector<float> data)
    : extents_(std::move(spatial_extents)),
      channels_(channels),
      data_(std::move(data)) {
  voxels_ = checked_voxel_count(extents_);
  if (channels_ < 1) throw ShapeError("tensor channels must be >= 1");
  if (static_cast<std::int64_t>(data_.size()) != voxels_ * channels_)
    throw ShapeError("tensor data length does not match extents * channels");
}

bool Tensor::all_finite() const noexcept {
  for (float v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

LabelMap::LabelMap(std::vector<std::int64_t> spatial_extents,
                   std::vector<std::uint8_t> l)
    : extents(std::move(spatial_extents)), labels(std::move(l)) {
  if (checked_voxel_count(extents) != static_cast<std::int64_t>(labels.size()))
    throw ShapeError("label map length does not match extents");
}

Tensor softmax_channels(const Tensor& t) {
  Tensor out(t.extents(), t.channels());
  detail::softmax_rows(t.data(), out.data(), t.voxels(), t.channels());
  return out;
}

LabelMap argmax_channels(const Tensor& t) {
  const int c = t.channels();
  const std::int64_t n = t.voxels();
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(n));
  const float* in = t.data();
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < n; ++p) {
    const float* row = in + p * c;
    int best = 0;
    for (int ch = 1; ch < c; ++ch)
      if (row[ch] > row[best]) best = ch;
    labels[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
  }
  return LabelMap(t.extents(), std::move(labels));
}

double dice_coefficient(const LabelMap& a, const LabelMap& b, int positive_label) {
  if (a.extents != b.extents)
    throw ShapeError("dice_coefficient: label maps have different extents");
  std::int64_t na = 0, nb = 0, both = 0;
  const std::int64_t n = a.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    const bool ia = a.labels[i] == positive_label;
    const bool ib = b.labels[i] == positive_label;
    na += ia;
    nb += ib;
    both += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double cross_entropy(const Tensor& q, const LabelMap& target) {
  if (q.extents() != target.extents)
    throw ShapeError("cross_entropy: extents mismatch");
  const std::int64_t n = q.voxels();
  const int c = q.channels();
  double sum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int l = target.labels[i];
    if (l >= c) throw ShapeError("cross_entropy: label out of range");
    const double p = std::max(static_cast<double>(q.at(i, l)), 1e-8);
    sum -= std::log(p);
  }
  return sum / static_cast<double>(n);
}

}  // namespace ndcrf
