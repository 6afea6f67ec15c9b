#include "cgnc/conditioning.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

#include "cgnc/error.hpp"

namespace cgnc {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, TextEncoderFactory>& registry() {
  static std::map<std::string, TextEncoderFactory> r;
  return r;
}

// Normalizes in place; leaves the vector untouched if it is zero.
void normalize_or_keep(Eigen::VectorXd& target, const Eigen::VectorXd& candidate) {
  const double n = candidate.norm();
  if (n > 0.0 && std::isfinite(n)) target = candidate / n;
}

}  // namespace

std::string build_prompt(std::string_view class_name, std::string_view tmpl) {
  if (class_name.empty()) throw ArgumentError("build_prompt: empty class name");
  const auto pos = tmpl.find(kClassPlaceholder);
  if (pos == std::string_view::npos || tmpl.find(kClassPlaceholder, pos + 1) != std::string_view::npos) {
    throw ArgumentError("build_prompt: template must contain \"{class}\" exactly once: \"" + std::string(tmpl) + "\"");
  }
  std::string out(tmpl.substr(0, pos));
  out += class_name;
  out += tmpl.substr(pos + kClassPlaceholder.size());
  return out;
}

std::vector<double> StubTextEncoder::encode(std::string_view prompt) const {
  Rng rng(mix64(fnv1a64(prompt) ^ mix64(seed_)));
  std::vector<double> e(static_cast<std::size_t>(kEmbeddingDim));
  double ss = 0.0;
  for (auto& x : e) {
    x = rng.normal();
    ss += x * x;
  }
  const double inv = 1.0 / std::sqrt(ss);
  for (auto& x : e) x *= inv;
  return e;
}

void register_text_encoder(const std::string& name, TextEncoderFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry()[name] = std::move(factory);
}

std::unique_ptr<TextEncoder> make_text_encoder(std::string_view spec, std::uint64_t seed) {
  if (spec == "stub") return std::make_unique<StubTextEncoder>(seed);
  constexpr std::string_view prefix = "plugin:";
  if (spec.substr(0, prefix.size()) == prefix) {
    const std::string name(spec.substr(prefix.size()));
    std::lock_guard lock(registry_mutex());
    auto it = registry().find(name);
    if (it == registry().end()) throw EncoderError("text encoder plugin not registered: " + name);
    auto enc = it->second();
    if (!enc) throw EncoderError("text encoder plugin failed to initialize: " + name);
    return enc;
  }
  throw EncoderError("unknown text encoder \"" + std::string(spec) + "\" (expected stub | plugin:<name>)");
}

std::vector<double> encode_text(std::string_view prompt, const TextEncoder* encoder) {
  if (!encoder) throw EncoderError("text encoder is not initialized");
  auto e = encoder->encode(prompt);
  if (static_cast<std::int64_t>(e.size()) != kEmbeddingDim) {
    throw EncoderError("text encoder " + encoder->name() + " returned width " + std::to_string(e.size()) +
                       ", expected " + std::to_string(kEmbeddingDim));
  }
  return e;
}

Conditioner::Conditioner(ConditionSource source, std::vector<std::string> class_names, std::string prompt_template,
                         std::shared_ptr<const TextEncoder> encoder)
    : source_(source),
      class_names_(std::move(class_names)),
      template_(std::move(prompt_template)),
      encoder_(std::move(encoder)) {
  if (source_ == ConditionSource::one_hot && static_cast<std::int64_t>(class_names_.size()) > kEmbeddingDim) {
    throw ArgumentError("one-hot conditioning supports at most 512 classes");
  }
  if (source_ == ConditionSource::text) build_prompt("x", template_);  // validates the template
}

TextCondition Conditioner::condition(const std::string& class_name) const {
  TextCondition c;
  c.class_name = class_name;
  c.prompt = build_prompt(class_name, template_);
  if (source_ == ConditionSource::text) {
    c.embedding = encode_text(c.prompt, encoder_.get());
    return c;
  }
  const auto it = std::find(class_names_.begin(), class_names_.end(), class_name);
  if (it == class_names_.end()) throw ArgumentError("unknown class for one-hot condition: " + class_name);
  c.embedding.assign(static_cast<std::size_t>(kEmbeddingDim), 0.0);
  c.embedding[static_cast<std::size_t>(it - class_names_.begin())] = 1.0;
  return c;
}

Tensor Conditioner::embeddings(const std::vector<std::string>& class_names) const {
  Tensor out(Shape{static_cast<std::int64_t>(class_names.size()), kEmbeddingDim});
  std::map<std::string, std::vector<double>> cache;
  for (std::size_t i = 0; i < class_names.size(); ++i) {
    auto it = cache.find(class_names[i]);
    if (it == cache.end()) it = cache.emplace(class_names[i], condition(class_names[i]).embedding).first;
    std::copy(it->second.begin(), it->second.end(), out.data() + static_cast<std::int64_t>(i) * kEmbeddingDim);
  }
  return out;
}

SpectralState init_spectral_state(const Tensor& weight, Rng& rng) {
  SpectralState s{Tensor(Shape{weight.dim(0)}), Tensor(Shape{weight.dim(1)})};
  for (auto& x : s.u.storage()) x = rng.normal();
  Eigen::Map<Eigen::VectorXd> u(s.u.data(), weight.dim(0));
  u.normalize();
  Eigen::Map<const RowMat> W(weight.data(), weight.dim(0), weight.dim(1));
  Eigen::VectorXd v = W.transpose() * u;
  if (v.norm() > 0.0) v.normalize();
  std::copy(v.data(), v.data() + v.size(), s.v.data());
  return s;
}

SpectralResult spectral_normalize(const Tensor& weight, SpectralState state, int iters) {
  if (iters < 1) throw ArgumentError("spectral_normalize: iters must be >= 1");
  if (weight.rank() != 2) throw ShapeError("spectral_normalize expects a matrix");
  const auto m = weight.dim(0), n = weight.dim(1);
  if (state.u.size() != static_cast<std::size_t>(m)) state.u = Tensor(Shape{m}, 1.0 / std::sqrt(static_cast<double>(m)));
  if (state.v.size() != static_cast<std::size_t>(n)) state.v = Tensor(Shape{n}, 1.0 / std::sqrt(static_cast<double>(n)));
  Eigen::Map<const RowMat> W(weight.data(), m, n);
  Eigen::VectorXd u = Eigen::Map<const Eigen::VectorXd>(state.u.data(), m);
  Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(state.v.data(), n);
  for (int i = 0; i < iters; ++i) {
    normalize_or_keep(v, W.transpose() * u);
    normalize_or_keep(u, W * v);
  }
  std::copy(u.data(), u.data() + m, state.u.data());
  std::copy(v.data(), v.data() + n, state.v.data());
  double sigma = u.dot(W * v);
  if (!(std::abs(sigma) > 0.0)) sigma = 1.0;
  SpectralResult r{weight, std::move(state), sigma};
  for (auto& x : r.weight.storage()) x /= sigma;
  return r;
}

Purifier::Purifier(const PurifierConfig& cfg, Rng& rng, const std::string& prefix) : cfg_(cfg) {
  if (cfg_.widths.size() < 2 || cfg_.widths.front() != kEmbeddingDim) {
    throw ArgumentError("purifier widths must start at 512");
  }
  for (std::size_t i = 0; i + 1 < cfg_.widths.size(); ++i) {
    PurifierBlock b;
    b.linear = nn::Linear(prefix + "." + std::to_string(i), cfg_.widths[i], cfg_.widths[i + 1], rng);
    b.spectral = init_spectral_state(b.linear.weight.value, rng);
    // Converge the estimate up front so the first forward is already normalized.
    b.spectral = spectral_normalize(b.linear.weight.value, b.spectral, 50).state;
    blocks_.push_back(std::move(b));
  }
}

void Purifier::refresh_spectral_state(int iters) {
  for (auto& b : blocks_) b.spectral = spectral_normalize(b.linear.weight.value, b.spectral, iters).state;
}

ag::Var Purifier::forward(const ag::Var& e, bool track) const {
  if (e->value.rank() != 2 || e->value.dim(1) != cfg_.widths.front()) {
    throw ShapeError("purify: expected input width " + std::to_string(cfg_.widths.front()) + ", got " +
                     shape_str(e->value.shape()));
  }
  ag::Var x = e;
  for (const auto& b : blocks_) {
    auto w = ag::spectral_norm_weight(ag::param(b.linear.weight, track), b.spectral.u, b.spectral.v);
    x = ag::leaky_relu(ag::linear(x, w, ag::param(b.linear.bias, track)), cfg_.slope);
  }
  return x;
}

void Purifier::collect(std::vector<Parameter*>& out) {
  for (auto& b : blocks_) b.linear.collect(out);
}

PurifiedEmbedding purify(const Tensor& e_t, const Purifier& purifier) {
  return {purifier.forward(ag::constant(e_t), false)->value};
}

}  // namespace cgnc
