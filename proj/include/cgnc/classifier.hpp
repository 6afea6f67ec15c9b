#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cgnc/autograd.hpp"
#include "cgnc/data.hpp"
#include "cgnc/nn.hpp"

namespace cgnc {

// Small image classifiers that stand in for the surrogate and victim
// networks. Both architectures end in global average pooling, so they accept
// any input size.
//
//   small_cnn: [conv3 16, relu, maxpool] [conv3 32, relu, maxpool] [conv3 64, relu] gap fc
//   wide_cnn:  [conv5 24, relu, avgpool] [conv3 48, relu, avgpool] gap fc
class Classifier {
 public:
  Classifier() = default;
  static Classifier create(const std::string& arch, std::int64_t in_channels, std::vector<std::string> label_names,
                           std::uint64_t seed);

  // Logits [B, L]. Gradients flow to `x` if it requires them; parameter
  // gradients only when `track` is set.
  ag::Var forward(const ag::Var& x, bool track) const;
  Tensor logits(const Tensor& pixels) const;

  const std::string& arch() const { return arch_; }
  const std::vector<std::string>& label_names() const { return label_names_; }
  std::int64_t num_labels() const { return static_cast<std::int64_t>(label_names_.size()); }
  std::int64_t in_channels() const { return in_channels_; }
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  void save(const std::filesystem::path& path) const;
  static Classifier load(const std::filesystem::path& path);

 private:
  std::string arch_;
  std::int64_t in_channels_ = 3;
  std::vector<std::string> label_names_;
  std::vector<nn::Conv2d> convs_;
  nn::Linear fc_;
};

struct FitOptions {
  std::int64_t epochs = 6;
  std::int64_t batch_size = 32;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
};

// Adam + cross-entropy on the dataset's labels. Returns the final-epoch mean loss.
double fit_classifier(Classifier& model, const Dataset& data, const FitOptions& opts);
double accuracy(const Classifier& model, const Dataset& data, std::int64_t batch_size = 128);

// Index of the largest entry; ties go to the lowest index and set *tie.
std::int64_t argmax_row(const double* row, std::int64_t n, bool* tie = nullptr);

}  // namespace cgnc
