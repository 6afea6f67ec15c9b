#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cgnc/tensor.hpp"

namespace cgnc {

// A batch of images, pixels [B,N,H,W] in [0,1].
struct ImageBatch {
  Tensor pixels;
  std::vector<std::string> ids;
  std::string domain_tag;

  std::int64_t batch() const { return pixels.dim(0); }
  std::int64_t channels() const { return pixels.dim(1); }
  std::int64_t height() const { return pixels.dim(2); }
  std::int64_t width() const { return pixels.dim(3); }

  // Throws ShapeError / ArgumentError if the batch invariants do not hold.
  void validate() const;
};

enum class DatasetKind { directory, synthetic_shapes };
enum class Split { train, eval };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic_shapes;
  std::filesystem::path root;        // directory datasets
  std::int64_t num_classes = 8;      // synthetic
  std::int64_t samples_per_class = 100;
  std::int64_t image_size = 32;
  std::int64_t channels = 3;
  std::uint64_t seed = 0;
  Split split = Split::train;
};

std::string to_string(DatasetKind k);
std::string to_string(Split s);

// Synthetic classes are shape x color combinations.
const std::vector<std::string>& synthetic_shapes();
const std::vector<std::string>& synthetic_colors();
std::string synthetic_class_name(std::int64_t k);

// Labeled images. Synthetic datasets are rendered eagerly; directory
// datasets decode on demand.
class Dataset {
 public:
  std::int64_t size() const { return static_cast<std::int64_t>(labels_.size()); }
  std::int64_t label(std::int64_t i) const { return labels_.at(static_cast<std::size_t>(i)); }
  const std::vector<std::int64_t>& labels() const { return labels_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::string& domain_tag() const { return domain_tag_; }
  std::int64_t channels() const { return channels_; }
  std::int64_t image_size() const { return image_size_; }

  // Native-resolution [N,H,W] image.
  Tensor image(std::int64_t i) const;
  ImageBatch batch(std::span<const std::int64_t> indices, std::int64_t height, std::int64_t width) const;
  ImageBatch batch(std::span<const std::int64_t> indices) const { return batch(indices, image_size_, image_size_); }

  // Order-independent digest of every image and label.
  std::uint64_t checksum() const;

 private:
  friend Dataset synth_toy_dataset(const DatasetSpec& spec);
  friend Dataset open_dataset(const DatasetSpec& spec);

  std::vector<Tensor> images_;
  std::vector<std::filesystem::path> files_;
  std::vector<std::int64_t> labels_;
  std::vector<std::string> class_names_;
  std::string domain_tag_;
  std::int64_t channels_ = 3;
  std::int64_t image_size_ = 32;
};

Dataset synth_toy_dataset(const DatasetSpec& spec);
Dataset open_dataset(const DatasetSpec& spec);
ImageBatch load_image_batch(const DatasetSpec& spec, std::span<const std::int64_t> indices, std::int64_t height,
                            std::int64_t width);

struct AugmentOptions {
  double flip_prob = 0.5;
  double scale_min = 0.8;
  double scale_max = 1.0;
};

// Per-image random horizontal flip then random resized crop back to the
// original size. Image i draws from a stream derived from (seed, i).
ImageBatch augment(const ImageBatch& batch, std::uint64_t seed, const AugmentOptions& opts = {});

Tensor clamp_valid(Tensor x);

// Bilinear resampling of a [N,H,W] image (half-pixel centers).
Tensor resize_bilinear(const Tensor& chw, std::int64_t height, std::int64_t width);

}  // namespace cgnc
