#include "cgnc/classifier.hpp"

#include <numeric>

#include "cgnc/archive.hpp"
#include "cgnc/error.hpp"
#include "cgnc/rng.hpp"

namespace cgnc {
namespace {
constexpr std::uint32_t kClassifierVersion = 1;
}

Classifier Classifier::create(const std::string& arch, std::int64_t in_channels, std::vector<std::string> label_names,
                              std::uint64_t seed) {
  if (label_names.size() < 2) throw ArgumentError("classifier needs at least 2 labels");
  Classifier c;
  c.arch_ = arch;
  c.in_channels_ = in_channels;
  c.label_names_ = std::move(label_names);
  Rng rng(derive_seed(seed, "classifier-init:" + arch));
  const auto L = c.num_labels();
  if (arch == "small_cnn") {
    c.convs_.emplace_back("conv0", in_channels, 16, 3, 1, rng);
    c.convs_.emplace_back("conv1", 16, 32, 3, 1, rng);
    c.convs_.emplace_back("conv2", 32, 64, 3, 1, rng);
    c.fc_ = nn::Linear("fc", 64, L, rng);
  } else if (arch == "wide_cnn") {
    c.convs_.emplace_back("conv0", in_channels, 24, 5, 1, rng);
    c.convs_.emplace_back("conv1", 24, 48, 3, 1, rng);
    c.fc_ = nn::Linear("fc", 48, L, rng);
  } else {
    throw ArgumentError("unknown classifier architecture \"" + arch + "\" (expected small_cnn | wide_cnn)");
  }
  return c;
}

ag::Var Classifier::forward(const ag::Var& x, bool track) const {
  if (x->value.rank() != 4 || x->value.dim(1) != in_channels_) {
    throw ShapeError("classifier " + arch_ + ": expected [B," + std::to_string(in_channels_) + ",H,W], got " +
                     shape_str(x->value.shape()));
  }
  ag::Var h = x;
  if (arch_ == "small_cnn") {
    h = ag::max_pool2(ag::relu(convs_[0](h, track)));
    h = ag::max_pool2(ag::relu(convs_[1](h, track)));
    h = ag::relu(convs_[2](h, track));
  } else {
    h = ag::avg_pool2(ag::relu(convs_[0](h, track)));
    h = ag::avg_pool2(ag::relu(convs_[1](h, track)));
  }
  return fc_(ag::global_avg_pool(h), track);
}

Tensor Classifier::logits(const Tensor& pixels) const { return forward(ag::constant(pixels), false)->value; }

std::vector<Parameter*> Classifier::parameters() {
  std::vector<Parameter*> out;
  for (auto& c : convs_) c.collect(out);
  fc_.collect(out);
  return out;
}

std::vector<const Parameter*> Classifier::parameters() const {
  auto mut = const_cast<Classifier*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

void Classifier::save(const std::filesystem::path& path) const {
  Archive a;
  a.version = kClassifierVersion;
  a.meta = {{"kind", "classifier"}, {"arch", arch_}, {"in_channels", in_channels_}, {"labels", label_names_}};
  for (const auto* p : parameters()) a.arrays.emplace_back(p->name, p->value);
  save_archive(path, a);
}

Classifier Classifier::load(const std::filesystem::path& path) {
  const Archive a = load_archive(path, kClassifierVersion);
  try {
    if (a.meta.at("kind") != "classifier") throw LoadError(path.string() + ": not a classifier archive");
    Classifier c = create(a.meta.at("arch").get<std::string>(), a.meta.at("in_channels").get<std::int64_t>(),
                          a.meta.at("labels").get<std::vector<std::string>>(), 0);
    for (auto* p : c.parameters()) {
      const Tensor& t = a.array(p->name);
      if (t.shape() != p->value.shape()) throw LoadError(path.string() + ": shape mismatch for '" + p->name + "'");
      p->value = t;
      p->zero_grad();
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": bad classifier metadata: " + e.what());
  }
}

double fit_classifier(Classifier& model, const Dataset& data, const FitOptions& opts) {
  if (opts.epochs < 1 || opts.batch_size < 1) throw ArgumentError("fit_classifier: epochs and batch_size must be >= 1");
  nn::Adam adam(model.parameters(), {opts.learning_rate, 0.9, 0.999, 1e-8});
  std::vector<std::int64_t> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  double epoch_loss = 0.0;
  for (std::int64_t epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng rng(derive_seed(opts.seed, "classifier-epoch", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    epoch_loss = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < data.size(); start += opts.batch_size) {
      const auto end = std::min(start + opts.batch_size, data.size());
      std::span<const std::int64_t> idx(order.data() + start, static_cast<std::size_t>(end - start));
      const ImageBatch b = data.batch(idx);
      std::vector<std::int64_t> labels;
      for (auto i : idx) labels.push_back(data.label(i));
      adam.zero_grad();
      auto loss = ag::cross_entropy(model.forward(ag::constant(b.pixels), true), labels);
      ag::backward(loss);
      adam.step();
      epoch_loss += loss->value[0];
      ++batches;
    }
    epoch_loss /= static_cast<double>(batches);
  }
  return epoch_loss;
}

std::int64_t argmax_row(const double* row, std::int64_t n, bool* tie) {
  std::int64_t best = 0;
  bool tied = false;
  for (std::int64_t j = 1; j < n; ++j) {
    if (row[j] > row[best]) {
      best = j;
      tied = false;
    } else if (row[j] == row[best]) {
      tied = true;
    }
  }
  if (tie) *tie = tied;
  return best;
}

double accuracy(const Classifier& model, const Dataset& data, std::int64_t batch_size) {
  std::int64_t correct = 0;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    const auto end = std::min(start + batch_size, data.size());
    std::vector<std::int64_t> idx;
    for (auto i = start; i < end; ++i) idx.push_back(i);
    const Tensor logits = model.logits(data.batch(idx).pixels);
    for (std::int64_t b = 0; b < end - start; ++b) {
      if (argmax_row(logits.data() + b * model.num_labels(), model.num_labels()) == data.label(start + b)) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace cgnc
