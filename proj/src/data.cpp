#include "cgnc/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cgnc/error.hpp"
#include "cgnc/image_io.hpp"
#include "cgnc/rng.hpp"

namespace cgnc {
namespace {

struct Rgb {
  double r, g, b;
};

// Colors are tints added to a gray background, so classes differ by modest
// contrast rather than saturated hues.
const std::vector<Rgb>& palette() {
  static const std::vector<Rgb> p{{1.0, -0.4, -0.4}, {-0.4, 1.0, -0.4}, {-0.4, -0.4, 1.0},
                                  {0.7, 0.7, -0.8},  {0.7, -0.8, 0.7},  {-0.8, 0.7, 0.7}};
  return p;
}

bool inside_shape(std::size_t shape, double x, double y, double cx, double cy, double r) {
  const double dx = x - cx, dy = y - cy;
  switch (shape) {
    case 0:  // circle
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case 2: {  // triangle, apex up
      const double top = cy - r, base = cy + 0.8 * r;
      if (y < top || y > base) return false;
      const double half = r * (y - top) / (base - top);
      return std::abs(dx) <= half;
    }
    default:  // cross
      return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
  }
}

Tensor render_shape(std::int64_t label, std::int64_t size, std::int64_t channels, Rng& rng) {
  const std::size_t nshapes = synthetic_shapes().size();
  const auto shape = static_cast<std::size_t>(label) % nshapes;
  const Rgb base = palette()[static_cast<std::size_t>(label) / nshapes];
  const double s = static_cast<double>(size);
  const double r = rng.uniform(0.22 * s, 0.34 * s);
  const double cx = rng.uniform(r, s - r), cy = rng.uniform(r, s - r);
  const double level = rng.uniform(0.3, 0.6);
  const double bg[3] = {level + rng.uniform(-0.05, 0.05), level + rng.uniform(-0.05, 0.05),
                        level + rng.uniform(-0.05, 0.05)};
  const double contrast = rng.uniform(0.14, 0.20), tint = rng.uniform(0.07, 0.10);
  const double fg[3] = {level + contrast + tint * base.r, level + contrast + tint * base.g,
                        level + contrast + tint * base.b};
  Tensor rgb(Shape{3, size, size});
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      const bool in = inside_shape(shape, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, cx, cy, r);
      for (std::int64_t c = 0; c < 3; ++c) {
        const double v = (in ? fg[c] : bg[c]) + 0.02 * rng.normal();
        rgb[static_cast<std::size_t>((c * size + y) * size + x)] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  if (channels == 3) return rgb;
  Tensor gray(Shape{1, size, size});
  for (std::int64_t i = 0; i < size * size; ++i) {
    const auto k = static_cast<std::size_t>(i);
    gray[k] = 0.299 * rgb[k] + 0.587 * rgb[k + size * size] + 0.114 * rgb[k + 2 * size * size];
  }
  return gray;
}

Tensor convert_channels(const Tensor& chw, std::int64_t channels) {
  const auto c = chw.dim(0), hw = chw.dim(1) * chw.dim(2);
  if (c == channels) return chw;
  if (c == 1 && channels == 3) {
    Tensor out(Shape{3, chw.dim(1), chw.dim(2)});
    for (std::int64_t k = 0; k < 3; ++k) std::copy_n(chw.data(), hw, out.data() + k * hw);
    return out;
  }
  Tensor out(Shape{1, chw.dim(1), chw.dim(2)});
  for (std::int64_t i = 0; i < hw; ++i)
    out[static_cast<std::size_t>(i)] = 0.299 * chw[static_cast<std::size_t>(i)] +
                                       0.587 * chw[static_cast<std::size_t>(i + hw)] +
                                       0.114 * chw[static_cast<std::size_t>(i + 2 * hw)];
  return out;
}

// Samples the window (top, left, h, w) of a [N,H,W] image onto an out_h x out_w
// grid with bilinear interpolation.
Tensor sample_window(const Tensor& chw, double top, double left, double wh, double ww, std::int64_t out_h,
                     std::int64_t out_w) {
  const auto C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  Tensor out(Shape{C, out_h, out_w});
  const double sy = wh / static_cast<double>(out_h), sx = ww / static_cast<double>(out_w);
  for (std::int64_t i = 0; i < out_h; ++i) {
    const double fy = std::clamp(top + (static_cast<double>(i) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const auto y0 = static_cast<std::int64_t>(std::floor(fy));
    const auto y1 = std::min(y0 + 1, H - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::int64_t j = 0; j < out_w; ++j) {
      const double fx =
          std::clamp(left + (static_cast<double>(j) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const auto x0 = static_cast<std::int64_t>(std::floor(fx));
      const auto x1 = std::min(x0 + 1, W - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::int64_t c = 0; c < C; ++c) {
        const double* p = chw.data() + c * H * W;
        double v = p[y0 * W + x0];
        if (tx != 0.0 || ty != 0.0) {
          v = (1 - ty) * ((1 - tx) * p[y0 * W + x0] + tx * p[y0 * W + x1]) +
              ty * ((1 - tx) * p[y1 * W + x0] + tx * p[y1 * W + x1]);
        }
        out[static_cast<std::size_t>((c * out_h + i) * out_w + j)] = v;
      }
    }
  }
  return out;
}

}  // namespace

void ImageBatch::validate() const {
  if (pixels.rank() != 4) throw ShapeError("ImageBatch must be rank 4, got " + shape_str(pixels.shape()));
  if (batch() < 1) throw ShapeError("ImageBatch must hold at least one image");
  if (channels() != 1 && channels() != 3) throw ShapeError("ImageBatch channels must be 1 or 3");
  if (height() < 8 || width() < 8) throw ShapeError("ImageBatch spatial size must be >= 8x8");
  for (double v : pixels.storage()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ArgumentError("ImageBatch pixel outside [0,1]");
  }
}

std::string to_string(DatasetKind k) { return k == DatasetKind::directory ? "directory" : "synthetic-shapes"; }
std::string to_string(Split s) { return s == Split::train ? "train" : "eval"; }

const std::vector<std::string>& synthetic_shapes() {
  static const std::vector<std::string> s{"circle", "square", "triangle", "cross"};
  return s;
}

const std::vector<std::string>& synthetic_colors() {
  static const std::vector<std::string> c{"red", "green", "blue", "yellow", "magenta", "cyan"};
  return c;
}

std::string synthetic_class_name(std::int64_t k) {
  const auto n = static_cast<std::int64_t>(synthetic_shapes().size());
  return synthetic_colors().at(static_cast<std::size_t>(k / n)) + " " + synthetic_shapes()[static_cast<std::size_t>(k % n)];
}

Tensor Dataset::image(std::int64_t i) const {
  if (i < 0 || i >= size()) throw ArgumentError("dataset index " + std::to_string(i) + " out of range");
  if (!images_.empty()) return images_[static_cast<std::size_t>(i)];
  const auto& path = files_[static_cast<std::size_t>(i)];
  return convert_channels(image_to_tensor(read_image(path)), channels_);
}

ImageBatch Dataset::batch(std::span<const std::int64_t> indices, std::int64_t height, std::int64_t width) const {
  if (indices.empty()) throw ArgumentError("load_image_batch: empty index list");
  if (height < 8 || width < 8) throw ArgumentError("load_image_batch: size must be at least 8x8");
  ImageBatch out;
  out.domain_tag = domain_tag_;
  out.pixels = Tensor(Shape{static_cast<std::int64_t>(indices.size()), channels_, height, width});
  const auto per = channels_ * height * width;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    Tensor img = image(indices[k]);
    if (img.dim(1) != height || img.dim(2) != width) img = resize_bilinear(img, height, width);
    img = clamp_valid(std::move(img));
    std::copy_n(img.data(), per, out.pixels.data() + static_cast<std::int64_t>(k) * per);
    out.ids.push_back(files_.empty() ? domain_tag_ + "/" + std::to_string(indices[k])
                                     : files_[static_cast<std::size_t>(indices[k])].string());
  }
  return out;
}

std::uint64_t Dataset::checksum() const {
  std::uint64_t h = fnv1a64(domain_tag_);
  for (std::int64_t i = 0; i < size(); ++i) {
    const Tensor img = image(i);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(img.data()), img.size() * sizeof(double)), h);
    const auto lab = labels_[static_cast<std::size_t>(i)];
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&lab), sizeof(lab)), h);
  }
  return h;
}

Dataset synth_toy_dataset(const DatasetSpec& spec) {
  if (spec.kind != DatasetKind::synthetic_shapes) throw ArgumentError("synth_toy_dataset: spec kind must be synthetic-shapes");
  const auto max_classes = static_cast<std::int64_t>(synthetic_shapes().size() * synthetic_colors().size());
  if (spec.num_classes < 2 || spec.num_classes > max_classes) {
    throw ArgumentError("synthetic-shapes num_classes must be in [2," + std::to_string(max_classes) + "], got " +
                        std::to_string(spec.num_classes));
  }
  if (spec.samples_per_class < 1) throw ArgumentError("synthetic-shapes samples_per_class must be >= 1");
  if (spec.image_size < 8) throw ArgumentError("synthetic-shapes image_size must be >= 8");
  if (spec.channels != 1 && spec.channels != 3) throw ArgumentError("channels must be 1 or 3");
  Dataset ds;
  ds.channels_ = spec.channels;
  ds.image_size_ = spec.image_size;
  ds.domain_tag_ = "synthetic-shapes:" + to_string(spec.split);
  for (std::int64_t k = 0; k < spec.num_classes; ++k) ds.class_names_.push_back(synthetic_class_name(k));
  const auto n = spec.num_classes * spec.samples_per_class;
  // Interleaved labels keep every contiguous window roughly balanced.
  for (std::int64_t i = 0; i < n; ++i) {
    const auto label = i % spec.num_classes;
    Rng rng(derive_seed(spec.seed, "synthetic-" + to_string(spec.split), static_cast<std::uint64_t>(i)));
    ds.images_.push_back(render_shape(label, spec.image_size, spec.channels, rng));
    ds.labels_.push_back(label);
  }
  return ds;
}

Dataset open_dataset(const DatasetSpec& spec) {
  if (spec.kind == DatasetKind::synthetic_shapes) return synth_toy_dataset(spec);
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(spec.root, ec)) throw LoadError("dataset root is not a directory: " + spec.root.string());
  Dataset ds;
  ds.channels_ = spec.channels;
  ds.image_size_ = spec.image_size;
  ds.domain_tag_ = "directory:" + spec.root.filename().string();
  std::vector<fs::path> classes;
  for (const auto& e : fs::directory_iterator(spec.root)) {
    if (e.is_directory()) classes.push_back(e.path());
  }
  std::sort(classes.begin(), classes.end());
  for (std::size_t k = 0; k < classes.size(); ++k) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(classes[k])) {
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    ds.class_names_.push_back(classes[k].filename().string());
    for (auto& f : files) {
      ds.files_.push_back(f);
      ds.labels_.push_back(static_cast<std::int64_t>(k));
    }
  }
  if (ds.files_.empty()) throw LoadError("no PNG/JPEG images found under " + spec.root.string());
  return ds;
}

ImageBatch load_image_batch(const DatasetSpec& spec, std::span<const std::int64_t> indices, std::int64_t height,
                            std::int64_t width) {
  if (indices.empty()) throw ArgumentError("load_image_batch: empty index list");
  return open_dataset(spec).batch(indices, height, width);
}

ImageBatch augment(const ImageBatch& batch, std::uint64_t seed, const AugmentOptions& opts) {
  batch.validate();
  if (opts.scale_min <= 0.0 || opts.scale_min > opts.scale_max || opts.scale_max > 1.0) {
    throw ArgumentError("augment: scale interval must satisfy 0 < min <= max <= 1");
  }
  ImageBatch out = batch;
  const auto C = batch.channels(), H = batch.height(), W = batch.width(), per = C * H * W;
  for (std::int64_t b = 0; b < batch.batch(); ++b) {
    Rng rng(derive_seed(seed, "augment", static_cast<std::uint64_t>(b)));
    Tensor img(Shape{C, H, W}, std::vector<double>(batch.pixels.data() + b * per, batch.pixels.data() + (b + 1) * per));
    if (rng.bernoulli(opts.flip_prob)) {
      Tensor flipped(img.shape());
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t x = 0; x < W; ++x)
            flipped[static_cast<std::size_t>((c * H + y) * W + x)] = img[static_cast<std::size_t>((c * H + y) * W + (W - 1 - x))];
      img = std::move(flipped);
    }
    // Area fraction `scale` with the original aspect ratio.
    const double scale = rng.uniform(opts.scale_min, opts.scale_max);
    const double side = std::sqrt(scale);
    const double wh = side * static_cast<double>(H), ww = side * static_cast<double>(W);
    const double top = rng.uniform() * (static_cast<double>(H) - wh);
    const double left = rng.uniform() * (static_cast<double>(W) - ww);
    img = clamp_valid(sample_window(img, top, left, wh, ww, H, W));
    std::copy_n(img.data(), per, out.pixels.data() + b * per);
  }
  return out;
}

Tensor clamp_valid(Tensor x) {
  for (auto& v : x.storage()) v = std::clamp(v, 0.0, 1.0);
  return x;
}

Tensor resize_bilinear(const Tensor& chw, std::int64_t height, std::int64_t width) {
  if (chw.rank() != 3) throw ShapeError("resize_bilinear expects [N,H,W]");
  return sample_window(chw, 0.0, 0.0, static_cast<double>(chw.dim(1)), static_cast<double>(chw.dim(2)), height, width);
}

}  // namespace cgnc
