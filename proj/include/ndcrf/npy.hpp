#ifndef NDCRF_NPY_HPP
#define NDCRF_NPY_HPP

#include <filesystem>

#include "ndcrf/tensor.hpp"

namespace ndcrf {

// NPY v1.0, little-endian only. Tensors are '<f4' with the channel axis as
// the last array axis; label maps are '|u1' with spatial axes only.

Tensor read_tensor(const std::filesystem::path& path);
void write_tensor(const Tensor& t, const std::filesystem::path& path);

LabelMap read_labels(const std::filesystem::path& path);
void write_labels(const LabelMap& l, const std::filesystem::path& path);

}  // namespace ndcrf

#endif
