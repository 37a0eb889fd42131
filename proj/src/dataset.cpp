#include "psx/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>

#include "psx/rng.hpp"

namespace psx {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t big_endian_u32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                             const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) fail(ErrorCode::truncated, path.string() + ": truncated IDX header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_big_endian_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  out.write(bytes, 4);
}

Tensor rotate_quarter(const Tensor& image, int turns) {
  Tensor out = image;
  for (int t = 0; t < turns; ++t) {
    const std::size_t h = out.dim(0), w = out.dim(1), c = out.dim(2);
    Tensor next({w, h, c});
    // counter-clockwise: next(r, col) = prev(col, w - 1 - r)
    for (std::size_t r = 0; r < w; ++r)
      for (std::size_t col = 0; col < h; ++col)
        for (std::size_t ch = 0; ch < c; ++ch) next.at(r, col, ch) = out.at(col, w - 1 - r, ch);
    out = std::move(next);
  }
  return out;
}

}  // namespace

LabeledDataset::LabeledDataset(std::vector<Tensor> images, std::vector<std::size_t> labels,
                               std::vector<std::string> class_names)
    : images_(std::move(images)), labels_(std::move(labels)), class_names_(std::move(class_names)) {
  if (images_.size() != labels_.size()) {
    fail(ErrorCode::shape_mismatch, "dataset has " + std::to_string(images_.size()) + " images but " +
                                        std::to_string(labels_.size()) + " labels");
  }
  for (const auto& image : images_) {
    if (image.shape() != images_.front().shape()) {
      fail(ErrorCode::shape_mismatch, "dataset images must share one shape");
    }
  }
  std::size_t classes = class_names_.size();
  for (auto label : labels_) classes = std::max(classes, label + 1);
  by_class_.resize(classes);
  for (std::size_t i = 0; i < labels_.size(); ++i) by_class_[labels_[i]].push_back(i);
}

const Shape& LabeledDataset::image_shape() const {
  if (images_.empty()) fail(ErrorCode::invalid_argument, "empty dataset has no image shape");
  return images_.front().shape();
}

const std::vector<std::size_t>& LabeledDataset::indices_of(std::size_t c) const {
  static const std::vector<std::size_t> none;
  return c < by_class_.size() ? by_class_[c] : none;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  images.reserve(indices.size());
  labels.reserve(indices.size());
  for (auto i : indices) {
    images.push_back(image(i));
    labels.push_back(label(i));
  }
  return LabeledDataset(std::move(images), std::move(labels), class_names_);
}

std::vector<float> LabeledDataset::channel_mean() const {
  const std::size_t channels = image_shape().back();
  std::vector<double> sums(channels, 0.0);
  std::size_t per_channel = 0;
  for (const auto& image : images_) {
    for (std::size_t i = 0; i < image.size(); ++i) sums[i % channels] += image[i];
    per_channel += image.size() / channels;
  }
  std::vector<float> mean(channels);
  for (std::size_t c = 0; c < channels; ++c) mean[c] = static_cast<float>(sums[c] / static_cast<double>(per_channel));
  return mean;
}

LabeledDataset read_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto image_bytes = read_bytes(images_path);
  const auto label_bytes = read_bytes(labels_path);
  if (big_endian_u32(image_bytes, 0, images_path) != kIdxImagesMagic) {
    fail(ErrorCode::format, images_path.string() + ": not an IDX image file (magic mismatch)");
  }
  if (big_endian_u32(label_bytes, 0, labels_path) != kIdxLabelsMagic) {
    fail(ErrorCode::format, labels_path.string() + ": not an IDX label file (magic mismatch)");
  }
  const std::size_t count = big_endian_u32(image_bytes, 4, images_path);
  const std::size_t rows = big_endian_u32(image_bytes, 8, images_path);
  const std::size_t cols = big_endian_u32(image_bytes, 12, images_path);
  const std::size_t label_count = big_endian_u32(label_bytes, 4, labels_path);
  if (count != label_count) {
    fail(ErrorCode::format, "IDX count mismatch: " + std::to_string(count) + " images vs " +
                                std::to_string(label_count) + " labels");
  }
  const std::size_t pixels = rows * cols;
  if (image_bytes.size() < 16 + count * pixels) fail(ErrorCode::truncated, images_path.string() + ": truncated");
  if (label_bytes.size() < 8 + count) fail(ErrorCode::truncated, labels_path.string() + ": truncated");

  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  images.reserve(count);
  labels.reserve(count);
  for (std::size_t n = 0; n < count; ++n) {
    std::vector<float> values(pixels);
    const auto* src = image_bytes.data() + 16 + n * pixels;
    for (std::size_t p = 0; p < pixels; ++p) values[p] = static_cast<float>(src[p]) / 255.0f;
    images.emplace_back(Shape{rows, cols, 1}, std::move(values));
    labels.push_back(label_bytes[8 + n]);
  }
  return LabeledDataset(std::move(images), std::move(labels));
}

void write_idx(const LabeledDataset& dataset, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  const auto& shape = dataset.image_shape();
  if (shape.size() != 3 || shape[2] != 1) fail(ErrorCode::shape_mismatch, "IDX export needs (H, W, 1) images");
  std::ofstream images(images_path, std::ios::binary | std::ios::trunc);
  std::ofstream labels(labels_path, std::ios::binary | std::ios::trunc);
  if (!images || !labels) fail(ErrorCode::io, "cannot write IDX files");
  put_big_endian_u32(images, kIdxImagesMagic);
  put_big_endian_u32(images, static_cast<std::uint32_t>(dataset.size()));
  put_big_endian_u32(images, static_cast<std::uint32_t>(shape[0]));
  put_big_endian_u32(images, static_cast<std::uint32_t>(shape[1]));
  put_big_endian_u32(labels, kIdxLabelsMagic);
  put_big_endian_u32(labels, static_cast<std::uint32_t>(dataset.size()));
  for (std::size_t n = 0; n < dataset.size(); ++n) {
    for (float v : dataset.image(n).values()) {
      images.put(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    }
    labels.put(static_cast<char>(dataset.label(n)));
  }
}

PgmImage read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_number = [&] {
    skip_space();
    std::size_t value = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos++] - '0');
      ++digits;
    }
    if (digits == 0) fail(ErrorCode::format, path.string() + ": malformed PGM header");
    return value;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    fail(ErrorCode::format, path.string() + ": not a binary P5 PGM file");
  }
  pos = 2;
  PgmImage image;
  image.width = read_number();
  image.height = read_number();
  image.maxval = read_number();
  if (image.width == 0 || image.height == 0) fail(ErrorCode::format, path.string() + ": zero image extent");
  if (image.maxval == 0 || image.maxval > 255) {
    fail(ErrorCode::format, path.string() + ": only 8-bit PGM (maxval <= 255) is supported");
  }
  ++pos;  // single whitespace before the raster
  const std::size_t count = image.width * image.height;
  if (pos + count > bytes.size()) fail(ErrorCode::truncated, path.string() + ": truncated PGM raster");
  image.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                      bytes.begin() + static_cast<std::ptrdiff_t>(pos + count));
  return image;
}

void write_pgm(const std::filesystem::path& path, const PgmImage& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << '\n' << image.maxval << '\n';
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

Tensor area_resize(const Tensor& image, std::size_t size) {
  if (image.rank() != 3 || image.dim(2) != 1) fail(ErrorCode::shape_mismatch, "area_resize expects (H, W, 1)");
  if (size == 0) fail(ErrorCode::invalid_argument, "resize target must be positive");
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (h == size && w == size) return image;

  // weights[o] lists (source index, overlap) for output cell o along one axis
  auto axis_weights = [size](std::size_t source) {
    std::vector<std::vector<std::pair<std::size_t, double>>> weights(size);
    const double scale = static_cast<double>(source) / static_cast<double>(size);
    for (std::size_t o = 0; o < size; ++o) {
      const double lo = static_cast<double>(o) * scale;
      const double hi = static_cast<double>(o + 1) * scale;
      for (auto s = static_cast<std::size_t>(std::floor(lo)); s < source && static_cast<double>(s) < hi; ++s) {
        const double overlap = std::min(hi, static_cast<double>(s + 1)) - std::max(lo, static_cast<double>(s));
        if (overlap > 0.0) weights[o].emplace_back(s, overlap);
      }
    }
    return weights;
  };
  const auto rows = axis_weights(h);
  const auto cols = axis_weights(w);
  Tensor out({size, size, 1});
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      double sum = 0.0, area = 0.0;
      for (const auto& [sr, wr] : rows[r]) {
        for (const auto& [sc, wc] : cols[c]) {
          sum += wr * wc * image.at(sr, sc, 0);
          area += wr * wc;
        }
      }
      out.at(r, c, 0) = static_cast<float>(sum / area);
    }
  }
  return out;
}

LabeledDataset read_pgm_dir(const std::filesystem::path& root, std::size_t resize_to, bool invert) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) fail(ErrorCode::io, root.string() + " is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) fail(ErrorCode::format, root.string() + " has no class subdirectories");

  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    names.push_back(class_dirs[c].filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[c])) {
      if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) fail(ErrorCode::format, "class directory " + class_dirs[c].string() + " is empty");
    for (const auto& file : files) {
      const auto pgm = read_pgm(file);
      std::vector<float> values(pgm.pixels.size());
      for (std::size_t i = 0; i < values.size(); ++i) {
        const float v = static_cast<float>(pgm.pixels[i]) / static_cast<float>(pgm.maxval);
        values[i] = invert ? 1.0f - v : v;
      }
      images.push_back(area_resize(Tensor({pgm.height, pgm.width, 1}, std::move(values)), resize_to));
      labels.push_back(c);
    }
  }
  return LabeledDataset(std::move(images), std::move(labels), std::move(names));
}

SupportSet select_support_set(const LabeledDataset& dataset, std::size_t c, std::size_t n, std::uint64_t seed) {
  const auto& members = dataset.indices_of(c);
  if (n == 0) fail(ErrorCode::invalid_argument, "support set size must be positive");
  if (members.size() < n) {
    fail(ErrorCode::insufficient_samples, "class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                                              " samples, " + std::to_string(n) + " requested");
  }
  Rng rng(seed);
  SupportSet support{c, {}, seed};
  for (auto pick : rng.sample_without_replacement(members.size(), n)) support.indices.push_back(members[pick]);
  return support;
}

std::vector<Tensor> support_images(const LabeledDataset& dataset, const SupportSet& support) {
  std::vector<Tensor> images;
  images.reserve(support.indices.size());
  for (auto i : support.indices) images.push_back(dataset.image(i));
  return images;
}

DatasetSplit split_dataset(const LabeledDataset& dataset, std::size_t first_count, std::size_t second_count,
                           std::uint64_t seed) {
  if (first_count + second_count > dataset.size()) {
    fail(ErrorCode::insufficient_samples, "split of " + std::to_string(first_count) + " + " +
                                              std::to_string(second_count) + " exceeds dataset size " +
                                              std::to_string(dataset.size()));
  }
  Rng rng(seed);
  const auto order = rng.permutation(dataset.size());
  const std::span<const std::size_t> all(order);
  return {dataset.subset(all.subspan(0, first_count)), dataset.subset(all.subspan(first_count, second_count))};
}

LabeledDataset augment_quarter_rotations(const LabeledDataset& dataset) {
  const std::size_t classes = dataset.class_count();
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::vector<std::string> names;
  for (int turns = 0; turns < 4; ++turns) {
    for (std::size_t c = 0; c < classes; ++c) {
      const auto base = c < dataset.class_names().size() ? dataset.class_names()[c] : std::to_string(c);
      names.push_back(turns == 0 ? base : base + "_rot" + std::to_string(turns * 90));
    }
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      images.push_back(rotate_quarter(dataset.image(i), turns));
      labels.push_back(dataset.label(i) + static_cast<std::size_t>(turns) * classes);
    }
  }
  return LabeledDataset(std::move(images), std::move(labels), std::move(names));
}

LabeledDataset open_dataset(const std::string& spec, std::size_t pgm_size, bool invert) {
  namespace fs = std::filesystem;
  if (const auto comma = spec.find(','); comma != std::string::npos) {
    return read_idx(spec.substr(0, comma), spec.substr(comma + 1));
  }
  const fs::path root(spec);
  if (fs::exists(root / "images-idx3-ubyte") && fs::exists(root / "labels-idx1-ubyte")) {
    return read_idx(root / "images-idx3-ubyte", root / "labels-idx1-ubyte");
  }
  if (!fs::exists(root)) fail(ErrorCode::not_found, "dataset path " + spec + " does not exist");
  return read_pgm_dir(root, pgm_size, invert);
}

}  // namespace psx
