#ifndef NDCRF_IMAGE_IO_HPP
#define NDCRF_IMAGE_IO_HPP

#include <filesystem>

#include "ndcrf/tensor.hpp"

namespace ndcrf {

// 8-bit grayscale / RGB PNG <-> 2D tensors in [0, 1] (divide / multiply by 255).

Tensor read_png(const std::filesystem::path& path);
void write_png(const Tensor& t, const std::filesystem::path& path);

/// Label map rendered as grayscale PNG, levels spread over [0, 255].
void write_label_png(const LabelMap& l, int num_labels,
                     const std::filesystem::path& path);

/// Dispatch on extension: .npy -> read_tensor, .png -> read_png.
Tensor read_image(const std::filesystem::path& path);

}  // namespace ndcrf

#endif
