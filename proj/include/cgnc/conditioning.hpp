#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "cgnc/autograd.hpp"
#include "cgnc/nn.hpp"
#include "cgnc/rng.hpp"

namespace cgnc {

inline constexpr std::int64_t kEmbeddingDim = 512;
inline constexpr std::int64_t kPurifiedDim = 16;
inline constexpr std::string_view kClassPlaceholder = "{class}";
inline constexpr std::string_view kDefaultPromptTemplate = "a photo of a {class}";

// Substitutes the single "{class}" placeholder in `tmpl`.
std::string build_prompt(std::string_view class_name, std::string_view tmpl = kDefaultPromptTemplate);

// Maps a prompt to a kEmbeddingDim vector. Implementations must be
// deterministic and safe to call concurrently.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::vector<double> encode(std::string_view prompt) const = 0;
  virtual std::string name() const = 0;
};

// Gaussian vector seeded by a hash of (prompt, seed), l2-normalized.
class StubTextEncoder final : public TextEncoder {
 public:
  explicit StubTextEncoder(std::uint64_t seed = 0) : seed_(seed) {}
  std::vector<double> encode(std::string_view prompt) const override;
  std::string name() const override { return "stub"; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
};

using TextEncoderFactory = std::function<std::unique_ptr<TextEncoder>()>;
void register_text_encoder(const std::string& name, TextEncoderFactory factory);
// "stub" or "plugin:<name>" for a registered encoder.
std::unique_ptr<TextEncoder> make_text_encoder(std::string_view spec, std::uint64_t seed = 0);

// Throws EncoderError when `encoder` is null or returns the wrong width.
std::vector<double> encode_text(std::string_view prompt, const TextEncoder* encoder);

struct TextCondition {
  std::string class_name;
  std::string prompt;
  std::vector<double> embedding;  // kEmbeddingDim
};

enum class ConditionSource { text, one_hot };

// Produces per-class condition vectors: encoded prompts, or one-hot class
// indicators zero-padded to kEmbeddingDim for the label-conditioned variant.
class Conditioner {
 public:
  Conditioner(ConditionSource source, std::vector<std::string> class_names, std::string prompt_template,
              std::shared_ptr<const TextEncoder> encoder);

  TextCondition condition(const std::string& class_name) const;
  // [B, kEmbeddingDim], one row per requested class.
  Tensor embeddings(const std::vector<std::string>& class_names) const;
  const std::vector<std::string>& class_names() const { return class_names_; }
  ConditionSource source() const { return source_; }
  const std::string& prompt_template() const { return template_; }

 private:
  ConditionSource source_;
  std::vector<std::string> class_names_;
  std::string template_;
  std::shared_ptr<const TextEncoder> encoder_;
};

// Power-iteration vectors for a weight of shape [out, in].
struct SpectralState {
  Tensor u;  // [out]
  Tensor v;  // [in]
};

struct SpectralResult {
  Tensor weight;
  SpectralState state;
  double sigma = 1.0;
};

// Runs `iters` power iterations and returns weight / sigma_hat. A zero
// weight comes back unchanged with sigma_hat = 1.
SpectralResult spectral_normalize(const Tensor& weight, SpectralState state, int iters);
SpectralState init_spectral_state(const Tensor& weight, Rng& rng);

struct PurifierConfig {
  std::vector<std::int64_t> widths{kEmbeddingDim, 128, 32, kPurifiedDim};
  double slope = 0.2;
};

struct PurifierBlock {
  nn::Linear linear;
  SpectralState spectral;
};

// Fully-connected + spectral-norm + leaky-ReLU blocks, kEmbeddingDim -> kPurifiedDim.
class Purifier {
 public:
  Purifier() = default;
  Purifier(const PurifierConfig& cfg, Rng& rng, const std::string& prefix = "purifier");

  // One training-mode power-iteration step per layer.
  void refresh_spectral_state(int iters = 1);
  ag::Var forward(const ag::Var& e, bool track) const;

  const PurifierConfig& config() const { return cfg_; }
  std::vector<PurifierBlock>& blocks() { return blocks_; }
  const std::vector<PurifierBlock>& blocks() const { return blocks_; }
  void collect(std::vector<Parameter*>& out);

 private:
  PurifierConfig cfg_;
  std::vector<PurifierBlock> blocks_;
};

struct PurifiedEmbedding {
  Tensor values;  // [B, kPurifiedDim]
};

PurifiedEmbedding purify(const Tensor& e_t, const Purifier& purifier);

}  // namespace cgnc
