#include "cgnc/generator.hpp"

#include <cmath>

#include "cgnc/error.hpp"

namespace cgnc {

std::string to_string(VariantKind k) {
  switch (k) {
    case VariantKind::full: return "full";
    case VariantKind::no_cross_attention: return "no_cross_attention";
    case VariantKind::one_hot_condition: return "one_hot_condition";
    case VariantKind::no_purifier: return "no_purifier";
    case VariantKind::no_fusion: return "no_fusion";
  }
  return "full";
}

VariantKind parse_variant(std::string_view s) {
  for (auto k : {VariantKind::full, VariantKind::no_cross_attention, VariantKind::one_hot_condition,
                 VariantKind::no_purifier, VariantKind::no_fusion}) {
    if (to_string(k) == s) return k;
  }
  throw ArgumentError("unknown generator variant \"" + std::string(s) + "\"");
}

std::int64_t GeneratorConfig::fusion_width() const {
  if (!use_fusion) return 0;
  return use_purifier ? purifier.widths.back() : kEmbeddingDim;
}

void GeneratorConfig::validate() const {
  if (image_channels != 1 && image_channels != 3) throw ConfigError("generator.image_channels must be 1 or 3");
  if (base_width < 4 || base_width % 4 != 0) throw ConfigError("generator.base_width must be a positive multiple of 4");
  if (residual_blocks < 0) throw ConfigError("generator.residual_blocks must be >= 0");
  if (cross_attention_count < 0 || cross_attention_count > 3) {
    throw ConfigError("generator.cross_attention_count must be in [0,3]");
  }
  if (attention_dim < 1) throw ConfigError("generator.attention_dim must be >= 1");
  if (attention_tokens < 1 || kEmbeddingDim % attention_tokens != 0) {
    throw ConfigError("conditioning.attention_tokens must divide 512, got " + std::to_string(attention_tokens));
  }
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("generator.epsilon must be in [0,1]");
  if (use_purifier && (purifier.widths.empty() || purifier.widths.front() != kEmbeddingDim ||
                       purifier.widths.back() != kPurifiedDim)) {
    throw ConfigError("purifier widths must run from 512 to 16");
  }
}

CrossAttentionParams::CrossAttentionParams(const std::string& name, std::int64_t channels, std::int64_t dim,
                                           std::int64_t t, Rng& rng)
    : w_q(name + ".w_q", nn::orthogonal(channels, dim, rng)),
      w_k(name + ".w_k", nn::orthogonal(kEmbeddingDim / t, dim, rng)),
      w_v(name + ".w_v", nn::orthogonal(kEmbeddingDim / t, dim, rng)),
      w_o(name + ".w_o", nn::orthogonal(dim, channels, rng)),
      tokens(t) {}

void CrossAttentionParams::collect(std::vector<Parameter*>& out) {
  out.push_back(&w_q);
  out.push_back(&w_k);
  out.push_back(&w_v);
  out.push_back(&w_o);
}

ConvBlock::ConvBlock(const std::string& name, std::int64_t in, std::int64_t out, int stride, Rng& rng)
    : conv(name + ".conv", in, out, 3, stride, rng), norm(name + ".norm", out) {}

ag::Var ConvBlock::operator()(const ag::Var& x, bool track) const { return norm(ag::relu(conv(x, track)), track); }

void ConvBlock::collect(std::vector<Parameter*>& out) {
  conv.collect(out);
  norm.collect(out);
}

ResidualBlock::ResidualBlock(const std::string& name, std::int64_t c, Rng& rng)
    : conv1(name + ".conv1", c, c, 3, 1, rng),
      norm1(name + ".norm1", c),
      conv2(name + ".conv2", c, c, 3, 1, rng),
      norm2(name + ".norm2", c) {}

ag::Var ResidualBlock::operator()(const ag::Var& x, bool track) const {
  auto y = norm1(ag::relu(conv1(x, track)), track);
  y = norm2(conv2(y, track), track);
  return ag::add(x, y);
}

void ResidualBlock::collect(std::vector<Parameter*>& out) {
  conv1.collect(out);
  norm1.collect(out);
  conv2.collect(out);
  norm2.collect(out);
}

GeneratorState GeneratorState::init(const GeneratorConfig& cfg) {
  cfg.validate();
  GeneratorState s;
  s.config = cfg;
  Rng rng(derive_seed(cfg.init_seed, "generator-init"));
  const auto c = cfg.base_width, f = cfg.fusion_width();
  if (cfg.use_purifier) s.purifier = Purifier(cfg.purifier, rng);
  s.stem = ConvBlock("stem", cfg.image_channels, c / 4, 1, rng);
  s.down1 = ConvBlock("down1", c / 4 + f, c / 2, 2, rng);
  s.down2 = ConvBlock("down2", c / 2 + f, c, 2, rng);
  s.bottleneck = ConvBlock("bottleneck", c + f, c, 1, rng);
  for (std::int64_t i = 0; i < cfg.residual_blocks; ++i) {
    s.residual.emplace_back("residual." + std::to_string(i), c, rng);
  }
  const std::int64_t attn_channels[3] = {c, c / 2, c / 4};
  for (std::int64_t i = 0; i < cfg.cross_attention_count; ++i) {
    s.attention.emplace_back("attention." + std::to_string(i), attn_channels[i], cfg.attention_dim,
                             cfg.attention_tokens, rng);
  }
  s.up1 = ConvBlock("up1", c, c / 2, 1, rng);
  s.up2 = ConvBlock("up2", c / 2, c / 4, 1, rng);
  s.head = nn::Conv2d("head", c / 4, cfg.image_channels, 3, 1, rng, /*zero_init=*/true);
  return s;
}

std::vector<Parameter*> GeneratorState::parameters() {
  std::vector<Parameter*> out;
  if (config.use_purifier) purifier.collect(out);
  stem.collect(out);
  down1.collect(out);
  down2.collect(out);
  bottleneck.collect(out);
  for (auto& r : residual) r.collect(out);
  for (auto& a : attention) a.collect(out);
  up1.collect(out);
  up2.collect(out);
  head.collect(out);
  return out;
}

std::vector<const Parameter*> GeneratorState::parameters() const {
  auto mut = const_cast<GeneratorState*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::int64_t GeneratorState::parameter_count() const {
  std::int64_t n = 0;
  for (const auto* p : parameters()) n += static_cast<std::int64_t>(p->value.size());
  return n;
}

void GeneratorState::refresh_spectral_state(int iters) {
  if (config.use_purifier) purifier.refresh_spectral_state(iters);
}

namespace graph {

ag::Var purified(const GeneratorState& s, const ag::Var& e, bool track) {
  if (!s.config.use_purifier) return e;
  return s.purifier.forward(e, track);
}

ag::Var fuse(const ag::Var& h, const ag::Var& e_star) {
  if (h->value.rank() != 4 || e_star->value.rank() != 2 || h->value.dim(0) != e_star->value.dim(0)) {
    throw ShapeError("fuse: batch mismatch between features " + shape_str(h->value.shape()) + " and embedding " +
                     shape_str(e_star->value.shape()));
  }
  return ag::concat_channels(h, ag::broadcast_spatial(e_star, h->value.dim(2), h->value.dim(3)));
}

ag::Var encode(const GeneratorState& s, const ag::Var& x, const ag::Var& e_star, bool track) {
  const auto& xv = x->value;
  if (xv.rank() != 4 || xv.dim(1) != s.config.image_channels) {
    throw ShapeError("encode_image: expected [B," + std::to_string(s.config.image_channels) + ",H,W], got " +
                     shape_str(xv.shape()));
  }
  const auto k = GeneratorConfig::downsample_factor;
  if (xv.dim(2) % k != 0 || xv.dim(3) % k != 0) {
    throw ShapeError("encode_image: height and width must be divisible by " + std::to_string(k) + ", got " +
                     shape_str(xv.shape()));
  }
  const bool fusing = static_cast<bool>(e_star);
  auto h = s.stem(x, track);
  h = s.down1(fusing ? fuse(h, e_star) : h, track);
  h = s.down2(fusing ? fuse(h, e_star) : h, track);
  return h;
}

ag::Var cross_attention(const ag::Var& z, const ag::Var& e, const CrossAttentionParams& p, bool track, Tensor* weights) {
  const auto& zv = z->value;
  if (zv.rank() != 4 || zv.dim(1) != p.channels()) {
    throw ShapeError("cross_attention: feature channels " + shape_str(zv.shape()) + " do not match parameters (C=" +
                     std::to_string(p.channels()) + ")");
  }
  if (p.tokens < 1 || kEmbeddingDim % p.tokens != 0) {
    throw ConfigError("cross_attention: token count " + std::to_string(p.tokens) + " does not divide 512");
  }
  const auto B = zv.dim(0), C = zv.dim(1), h = zv.dim(2), w = zv.dim(3), d = p.dim(), T = p.tokens;
  if (e->value.rank() != 2 || e->value.dim(0) != B || e->value.dim(1) != kEmbeddingDim) {
    throw ShapeError("cross_attention: condition must be [B,512], got " + shape_str(e->value.shape()));
  }
  auto tokens = ag::reshape(ag::to_tokens(z), {B * h * w, C});
  auto q = ag::reshape(ag::matmul(tokens, ag::param(p.w_q, track)), {B, h * w, d});
  auto text = ag::reshape(e, {B * T, kEmbeddingDim / T});
  auto k = ag::reshape(ag::matmul(text, ag::param(p.w_k, track)), {B, T, d});
  auto v = ag::reshape(ag::matmul(text, ag::param(p.w_v, track)), {B, T, d});
  auto a = ag::attention(q, k, v, weights);
  auto o = ag::matmul(ag::reshape(a, {B * h * w, d}), ag::param(p.w_o, track));
  return ag::add(z, ag::from_tokens(ag::reshape(o, {B, h * w, C}), h, w));
}

ag::Var decode(const GeneratorState& s, const ag::Var& m, const ag::Var& e, bool track) {
  const auto expected = s.config.base_width + s.config.fusion_width();
  if (m->value.rank() != 4 || m->value.dim(1) != expected) {
    throw ShapeError("decode: expected " + std::to_string(expected) + " feature channels, got " +
                     shape_str(m->value.shape()));
  }
  auto z = s.bottleneck(m, track);
  for (const auto& r : s.residual) z = r(z, track);
  std::size_t next = 0;
  auto attend = [&](ag::Var v) {
    if (next < s.attention.size()) v = cross_attention(v, e, s.attention[next++], track);
    return v;
  };
  z = attend(z);
  z = s.up1(ag::upsample_nearest2x(z), track);
  z = attend(z);
  z = s.up2(ag::upsample_nearest2x(z), track);
  z = attend(z);
  return s.head(z, track);
}

ag::Var project(const ag::Var& o, double epsilon) {
  if (!(epsilon >= 0.0)) throw ArgumentError("project: epsilon must be non-negative");
  return ag::scale(ag::tanh(o), epsilon);
}

ag::Var perturbation(const GeneratorState& s, const ag::Var& x, const Tensor& e, double epsilon, bool track) {
  if (e.rank() != 2 || e.dim(0) != x->value.dim(0) || e.dim(1) != kEmbeddingDim) {
    throw ShapeError("generate: condition embeddings must be [B,512], got " + shape_str(e.shape()));
  }
  auto ev = ag::constant(e);
  ag::Var e_star;
  if (s.config.use_fusion) e_star = purified(s, ev, track);
  auto h = encode(s, x, e_star, track);
  auto m = e_star ? fuse(h, e_star) : h;
  return project(decode(s, m, ev, track), epsilon);
}

}  // namespace graph

FeatureMap encode_image(const ImageBatch& x, const GeneratorState& s, const std::optional<Tensor>& e_star) {
  ag::Var e = e_star ? ag::constant(*e_star) : ag::Var{};
  return {graph::encode(s, ag::constant(x.pixels), e, false)->value};
}

FeatureMap fuse(const FeatureMap& h, const PurifiedEmbedding& e_star) {
  return {graph::fuse(ag::constant(h.values), ag::constant(e_star.values))->value};
}

FeatureMap cross_attention(const FeatureMap& z, const Tensor& e_t, const CrossAttentionParams& p, Tensor* weights) {
  return {graph::cross_attention(ag::constant(z.values), ag::constant(e_t), p, false, weights)->value};
}

Tensor decode(const FeatureMap& m, const Tensor& e_t, const GeneratorState& s) {
  return graph::decode(s, ag::constant(m.values), ag::constant(e_t), false)->value;
}

Tensor project(const Tensor& o, double epsilon) { return graph::project(ag::constant(o), epsilon)->value; }

PerturbationBatch generate(const ImageBatch& x, const Tensor& embeddings, double epsilon, const GeneratorState& s) {
  if (!(epsilon >= 0.0)) throw ArgumentError("generate: epsilon must be non-negative");
  PerturbationBatch p;
  p.delta = graph::perturbation(s, ag::constant(x.pixels), embeddings, epsilon, false)->value;
  p.epsilon = epsilon;
  return p;
}

PerturbationBatch generate(const ImageBatch& x, const TextCondition& cond, double epsilon, const GeneratorState& s) {
  if (static_cast<std::int64_t>(cond.embedding.size()) != kEmbeddingDim) {
    throw ShapeError("generate: condition embedding must have 512 entries");
  }
  Tensor e(Shape{x.batch(), kEmbeddingDim});
  for (std::int64_t b = 0; b < x.batch(); ++b) std::copy(cond.embedding.begin(), cond.embedding.end(), e.data() + b * kEmbeddingDim);
  auto p = generate(x, e, epsilon, s);
  p.conditions = {cond};
  return p;
}

Tensor patch_mask(std::int64_t batch, std::int64_t channels, std::int64_t height, std::int64_t width,
                  std::int64_t patch_size, double ratio, std::uint64_t seed) {
  if (patch_size < 1 || height % patch_size != 0 || width % patch_size != 0) {
    throw ArgumentError("apply_patch_mask: patch size " + std::to_string(patch_size) + " must divide " +
                        std::to_string(height) + "x" + std::to_string(width));
  }
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ArgumentError("apply_patch_mask: ratio must be in [0,1]");
  const auto gh = height / patch_size, gw = width / patch_size, P = gh * gw;
  const auto k = static_cast<std::int64_t>(std::round(ratio * static_cast<double>(P)));
  Tensor mask(Shape{batch, channels, height, width}, 1.0);
  for (std::int64_t b = 0; b < batch; ++b) {
    Rng rng(derive_seed(seed, "patch-mask", static_cast<std::uint64_t>(b)));
    for (auto cell : rng.sample_without_replacement(P, k)) {
      const auto py = (cell / gw) * patch_size, px = (cell % gw) * patch_size;
      for (std::int64_t c = 0; c < channels; ++c)
        for (std::int64_t y = py; y < py + patch_size; ++y)
          for (std::int64_t x = px; x < px + patch_size; ++x) mask.at(b, c, y, x) = 0.0;
    }
  }
  return mask;
}

PerturbationBatch apply_patch_mask(const PerturbationBatch& p, std::int64_t patch_size, double ratio, std::uint64_t seed) {
  const auto& d = p.delta;
  if (d.rank() != 4) throw ShapeError("apply_patch_mask: delta must be [B,N,H,W]");
  const Tensor mask = patch_mask(d.dim(0), d.dim(1), d.dim(2), d.dim(3), patch_size, ratio, seed);
  PerturbationBatch out = p;
  for (std::size_t i = 0; i < out.delta.size(); ++i) out.delta[i] *= mask[i];
  out.seed = seed;
  return out;
}

ImageBatch make_adversarial(const ImageBatch& x, const PerturbationBatch& p) {
  if (x.pixels.shape() != p.delta.shape()) {
    throw ShapeError("make_adversarial: image " + shape_str(x.pixels.shape()) + " vs perturbation " +
                     shape_str(p.delta.shape()));
  }
  ImageBatch out = x;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] += p.delta[i];
  out.pixels = clamp_valid(std::move(out.pixels));
  return out;
}

}  // namespace cgnc
