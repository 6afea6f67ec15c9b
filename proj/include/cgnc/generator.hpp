#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cgnc/autograd.hpp"
#include "cgnc/conditioning.hpp"
#include "cgnc/data.hpp"
#include "cgnc/nn.hpp"

namespace cgnc {

inline constexpr double kDefaultEpsilon = 16.0 / 255.0;

enum class VariantKind { full, no_cross_attention, one_hot_condition, no_purifier, no_fusion };
std::string to_string(VariantKind k);
VariantKind parse_variant(std::string_view s);

struct GeneratorConfig {
  std::int64_t image_channels = 3;
  // Channel width at the 1/4-resolution bottleneck; the stem uses base/4 and
  // the middle stage base/2.
  std::int64_t base_width = 64;
  std::int64_t residual_blocks = 6;
  // Attention modules are inserted, in order, before the first upsample,
  // before the second upsample, and before the output head.
  std::int64_t cross_attention_count = 2;
  std::int64_t attention_dim = 32;
  std::int64_t attention_tokens = 1;
  bool use_purifier = true;
  bool use_fusion = true;
  ConditionSource condition = ConditionSource::text;
  double epsilon = kDefaultEpsilon;
  PurifierConfig purifier;
  std::uint64_t init_seed = 0;
  VariantKind variant = VariantKind::full;

  static constexpr std::int64_t downsample_factor = 4;
  // Channels appended at each fusion point (0 when fusion is disabled).
  std::int64_t fusion_width() const;
  void validate() const;
};

struct FeatureMap {
  Tensor values;  // [B,C,h,w]
};

struct CrossAttentionParams {
  Parameter w_q;  // [C, d]
  Parameter w_k;  // [512/T, d]
  Parameter w_v;  // [512/T, d]
  Parameter w_o;  // [d, C]
  std::int64_t tokens = 1;

  CrossAttentionParams() = default;
  CrossAttentionParams(const std::string& name, std::int64_t channels, std::int64_t dim, std::int64_t tokens, Rng& rng);
  std::int64_t channels() const { return w_q.value.dim(0); }
  std::int64_t dim() const { return w_q.value.dim(1); }
  void collect(std::vector<Parameter*>& out);
};

// conv -> ReLU -> instance norm. Normalizing after the activation keeps
// condition-dependent per-channel offsets (from fusion or attention) from
// being cancelled by the normalization's mean subtraction.
struct ConvBlock {
  nn::Conv2d conv;
  nn::InstanceNorm norm;

  ConvBlock() = default;
  ConvBlock(const std::string& name, std::int64_t in, std::int64_t out, int stride, Rng& rng);
  ag::Var operator()(const ag::Var& x, bool track) const;
  void collect(std::vector<Parameter*>& out);
};

// x + IN(conv(IN(ReLU(conv(x)))))
struct ResidualBlock {
  nn::Conv2d conv1;
  nn::InstanceNorm norm1;
  nn::Conv2d conv2;
  nn::InstanceNorm norm2;

  ResidualBlock() = default;
  ResidualBlock(const std::string& name, std::int64_t channels, Rng& rng);
  ag::Var operator()(const ag::Var& x, bool track) const;
  void collect(std::vector<Parameter*>& out);
};

struct GeneratorState {
  GeneratorConfig config;
  Purifier purifier;  // empty when config.use_purifier is false
  ConvBlock stem;
  ConvBlock down1;
  ConvBlock down2;
  ConvBlock bottleneck;
  std::vector<ResidualBlock> residual;
  std::vector<CrossAttentionParams> attention;
  ConvBlock up1;
  ConvBlock up2;
  nn::Conv2d head;  // zero-initialized, so a fresh generator outputs delta = 0

  static GeneratorState init(const GeneratorConfig& cfg);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::int64_t parameter_count() const;
  void refresh_spectral_state(int iters = 1);
};

struct PerturbationBatch {
  Tensor delta;  // [B,N,H,W]
  double epsilon = kDefaultEpsilon;
  std::vector<TextCondition> conditions;  // one per sample, or one shared
  std::uint64_t seed = 0;
};

// Differentiable pieces; `track` routes parameter gradients.
namespace graph {
ag::Var purified(const GeneratorState& s, const ag::Var& e, bool track);
ag::Var encode(const GeneratorState& s, const ag::Var& x, const ag::Var& e_star, bool track);
ag::Var fuse(const ag::Var& h, const ag::Var& e_star);
ag::Var cross_attention(const ag::Var& z, const ag::Var& e, const CrossAttentionParams& p, bool track,
                        Tensor* weights = nullptr);
ag::Var decode(const GeneratorState& s, const ag::Var& m, const ag::Var& e, bool track);
ag::Var project(const ag::Var& o, double epsilon);
// Full path: delta = epsilon * tanh(decode(fuse(encode(x)))), e is [B,512].
ag::Var perturbation(const GeneratorState& s, const ag::Var& x, const Tensor& e, double epsilon, bool track);
}  // namespace graph

// e_star is the purified condition (or the raw condition when the purifier
// is disabled); pass nullopt to skip fusion.
FeatureMap encode_image(const ImageBatch& x, const GeneratorState& s, const std::optional<Tensor>& e_star = std::nullopt);
FeatureMap fuse(const FeatureMap& h, const PurifiedEmbedding& e_star);
FeatureMap cross_attention(const FeatureMap& z, const Tensor& e_t, const CrossAttentionParams& p,
                           Tensor* weights = nullptr);
Tensor decode(const FeatureMap& m, const Tensor& e_t, const GeneratorState& s);
Tensor project(const Tensor& o, double epsilon);

PerturbationBatch generate(const ImageBatch& x, const TextCondition& cond, double epsilon, const GeneratorState& s);
// Per-sample conditions; `embeddings` is [B,512].
PerturbationBatch generate(const ImageBatch& x, const Tensor& embeddings, double epsilon, const GeneratorState& s);

// [B,N,H,W] multiplicative mask with exactly round(ratio * P) zeroed patches
// per image, P = (H/patch) * (W/patch).
Tensor patch_mask(std::int64_t batch, std::int64_t channels, std::int64_t height, std::int64_t width,
                  std::int64_t patch_size, double ratio, std::uint64_t seed);
PerturbationBatch apply_patch_mask(const PerturbationBatch& p, std::int64_t patch_size, double ratio, std::uint64_t seed);

ImageBatch make_adversarial(const ImageBatch& x, const PerturbationBatch& p);

}  // namespace cgnc
