#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "psx/tensor.hpp"

namespace psx {

/// Images of one shape with class labels, indexed per class.
class LabeledDataset {
 public:
  LabeledDataset() = default;
  LabeledDataset(std::vector<Tensor> images, std::vector<std::size_t> labels,
                 std::vector<std::string> class_names = {});

  std::size_t size() const noexcept { return images_.size(); }
  bool empty() const noexcept { return images_.empty(); }
  const Tensor& image(std::size_t i) const { return images_.at(i); }
  std::size_t label(std::size_t i) const { return labels_.at(i); }
  const std::vector<Tensor>& images() const noexcept { return images_; }
  const std::vector<std::size_t>& labels() const noexcept { return labels_; }
  const Shape& image_shape() const;

  /// One past the largest label (or the number of class names, if larger).
  std::size_t class_count() const noexcept { return by_class_.size(); }
  const std::vector<std::string>& class_names() const noexcept { return class_names_; }
  const std::vector<std::size_t>& indices_of(std::size_t c) const;

  LabeledDataset subset(std::span<const std::size_t> indices) const;

  /// Per-channel mean pixel value over the whole dataset.
  std::vector<float> channel_mean() const;

 private:
  std::vector<Tensor> images_;
  std::vector<std::size_t> labels_;
  std::vector<std::string> class_names_;
  std::vector<std::vector<std::size_t>> by_class_;
};

/// Sample indices into a dataset, all from one class.
struct SupportSet {
  std::size_t class_index = 0;
  std::vector<std::size_t> indices;
  std::uint64_t seed = 0;
};

/// IDX image (magic 0x00000803) and label (0x00000801) files; pixels are
/// scaled by 1/255 into (H, W, 1) tensors.
LabeledDataset read_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Writes the inverse of `read_idx` (pixels rounded to bytes).
void write_idx(const LabeledDataset& dataset, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

struct PgmImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t maxval = 255;
  std::vector<std::uint8_t> pixels;
};

PgmImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const PgmImage& image);

/// Area-averaging resample of a single-channel (H, W, 1) image to (size, size, 1).
Tensor area_resize(const Tensor& image, std::size_t size);

/// One subdirectory per class (lexicographic order gives the class index),
/// each holding binary P5 PGM files. Pixels map to [0, 1]; with `invert` dark
/// ink becomes 1.
LabeledDataset read_pgm_dir(const std::filesystem::path& root, std::size_t resize_to, bool invert = false);

/// Uniform sampling without replacement from class `c`, reproducible per seed.
SupportSet select_support_set(const LabeledDataset& dataset, std::size_t c, std::size_t n, std::uint64_t seed);
std::vector<Tensor> support_images(const LabeledDataset& dataset, const SupportSet& support);

struct DatasetSplit {
  LabeledDataset first;
  LabeledDataset second;
};

/// Seeded permutation, then the first `first_count` samples and the next
/// `second_count` samples as two disjoint datasets.
DatasetSplit split_dataset(const LabeledDataset& dataset, std::size_t first_count, std::size_t second_count,
                           std::uint64_t seed);

/// Extends every class with its 90, 180 and 270 degree rotations as new
/// classes: class c rotated by k quarter turns becomes class c + k * C.
LabeledDataset augment_quarter_rotations(const LabeledDataset& dataset);

/// Opens a dataset from a command-line spec: "images,labels" IDX pair, a
/// directory holding "images-idx3-ubyte" and "labels-idx1-ubyte", or a PGM
/// class directory (resized to 28).
LabeledDataset open_dataset(const std::string& spec, std::size_t pgm_size = 28, bool invert = false);

}  // namespace psx
