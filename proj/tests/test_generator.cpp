#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"

#include "cgnc/error.hpp"
#include "cgnc/evaluation.hpp"
#include "cgnc/generator.hpp"
#include "support/oracle.hpp"

using namespace cgnc;

namespace {

GeneratorConfig small_config(std::uint64_t seed = 1) {
  GeneratorConfig c;
  c.base_width = 8;
  c.residual_blocks = 1;
  c.attention_dim = 8;
  c.init_seed = seed;
  return c;
}

// Fresh generators output zero; tests that need signal randomize the head.
void randomize_head(GeneratorState& s, Rng& rng, double scale = 0.3) {
  for (auto& w : s.head.weight.value.storage()) w = scale * rng.normal();
  for (auto& b : s.head.bias.value.storage()) b = 0.1 * rng.normal();
}

ImageBatch random_images(std::int64_t B, std::int64_t H, Rng& rng, std::int64_t C = 3) {
  ImageBatch x;
  x.pixels = oracle::random_tensor(Shape{B, C, H, H}, rng, 0.0, 1.0);
  return x;
}

std::int64_t zero_patches(const Tensor& d, std::int64_t b, std::int64_t patch) {
  std::int64_t n = 0;
  for (std::int64_t py = 0; py < d.dim(2); py += patch)
    for (std::int64_t px = 0; px < d.dim(3); px += patch) {
      bool zero = true;
      for (std::int64_t c = 0; c < d.dim(1); ++c)
        for (std::int64_t y = py; y < py + patch; ++y)
          for (std::int64_t x = px; x < px + patch; ++x) zero = zero && d.at(b, c, y, x) == 0.0;
      n += zero;
    }
  return n;
}

}  // namespace

TEST_SUITE("generator") {
  TEST_CASE("projection values") {
    Tensor one(Shape{1}, 1.0);
    // (16/255) tanh(1) to 30 digits: 0.0477862999815381890584758138105
    CHECK(std::abs(project(one, 16.0 / 255.0)[0] - 0.04778629998153819) < 1e-6);
    CHECK(project(Tensor(Shape{4}), 0.1).max_abs() == 0.0);
    CHECK(project(Tensor(Shape{4}, 5.0), 0.0).max_abs() == 0.0);
    CHECK_THROWS_AS(project(one, -0.1), ArgumentError);
  }

  TEST_CASE("a fresh generator outputs zero perturbation") {
    auto s = GeneratorState::init(small_config());
    Rng rng(1);
    auto x = random_images(2, 16, rng);
    CHECK(generate(x, oracle::random_embeddings(2, rng), kDefaultEpsilon, s).delta.max_abs() == 0.0);
  }

  TEST_CASE("l_inf bound across budgets") {
    Rng rng(2);
    auto s = GeneratorState::init(small_config());
    randomize_head(s, rng, 20.0);
    auto x = random_images(6, 32, rng);
    auto e = oracle::random_embeddings(6, rng);
    for (int k : {4, 8, 12, 16}) {
      const double eps = k / 255.0;
      auto p = generate(x, e, eps, s);
      CHECK(p.delta.max_abs() <= eps + 1e-7);
      CHECK(p.delta.max_abs() > 0.9 * eps);
    }
    CHECK(generate(x, e, 0.0, s).delta.max_abs() == 0.0);
    CHECK_THROWS_AS(generate(x, e, -1.0, s), ArgumentError);
  }

  TEST_CASE("encoder output geometry and errors") {
    auto cfg = small_config();
    cfg.base_width = 64;
    auto s = GeneratorState::init(cfg);
    Rng rng(3);
    auto x = random_images(2, 32, rng);
    const Tensor es = purify(oracle::random_embeddings(2, rng), s.purifier).values;
    auto h = encode_image(x, s, es);
    CHECK(h.values.shape() == Shape{2, 64, 8, 8});
    CHECK_THROWS_AS(encode_image(random_images(2, 30, rng), s, es), ShapeError);
    CHECK_THROWS_AS(encode_image(random_images(2, 32, rng, 1), s, es), ShapeError);
    cfg.use_fusion = false;
    auto plain = GeneratorState::init(cfg);
    CHECK(encode_image(x, plain).values.shape() == Shape{2, 64, 8, 8});
    for (auto* blk : {&s.stem, &s.down1, &s.down2}) {
      blk->conv.weight.value.fill(0.0);
      blk->conv.bias.value.fill(0.0);
    }
    CHECK(encode_image(x, s, es).values.max_abs() == 0.0);
  }

  TEST_CASE("fusion appends the embedding as constant channels") {
    Rng rng(4);
    FeatureMap h{oracle::random_tensor(Shape{2, 64, 4, 4}, rng)};
    PurifiedEmbedding e{oracle::random_tensor(Shape{2, 16}, rng)};
    auto m = fuse(h, e);
    REQUIRE(m.values.shape() == Shape{2, 80, 4, 4});
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t y = 0; y < 4; ++y)
        for (std::int64_t x = 0; x < 4; ++x) {
          for (std::int64_t c = 0; c < 64; ++c) CHECK(m.values.at(b, c, y, x) == h.values.at(b, c, y, x));
          for (std::int64_t c = 0; c < 16; ++c) CHECK(m.values.at(b, 64 + c, y, x) == e.values.at(b, c));
        }
    auto z = fuse(h, PurifiedEmbedding{Tensor(Shape{2, 16})});
    for (std::int64_t c = 64; c < 80; ++c) CHECK(z.values.at(1, c, 2, 3) == 0.0);
    CHECK_THROWS_AS(fuse(h, PurifiedEmbedding{Tensor(Shape{3, 16})}), ShapeError);
  }

  TEST_CASE("cross attention with one token") {
    Rng rng(5);
    CrossAttentionParams p("ca", 8, 16, 1, rng);
    FeatureMap z{oracle::random_tensor(Shape{2, 8, 4, 4}, rng)};
    Tensor e = oracle::random_embeddings(2, rng);
    Tensor w;
    auto out = cross_attention(z, e, p, &w);
    for (double a : w.values()) CHECK(a == 1.0);
    // Every position receives the same update per sample.
    for (std::int64_t b = 0; b < 2; ++b)
      for (std::int64_t c = 0; c < 8; ++c) {
        const double u0 = out.values.at(b, c, 0, 0) - z.values.at(b, c, 0, 0);
        for (std::int64_t y = 0; y < 4; ++y)
          for (std::int64_t x = 0; x < 4; ++x)
            CHECK(out.values.at(b, c, y, x) - z.values.at(b, c, y, x) == doctest::Approx(u0).epsilon(1e-12));
      }
  }

  TEST_CASE("cross attention identities") {
    Rng rng(6);
    CrossAttentionParams p("ca", 8, 16, 4, rng);
    FeatureMap z{oracle::random_tensor(Shape{2, 8, 4, 4}, rng)};
    Tensor e = oracle::random_embeddings(2, rng);
    auto zero_o = p;
    zero_o.w_o.value.fill(0.0);
    CHECK(cross_attention(z, e, zero_o).values == z.values);
    auto all_zero = p;
    for (auto* q : {&all_zero.w_q, &all_zero.w_k, &all_zero.w_v, &all_zero.w_o}) q->value.fill(0.0);
    CHECK(cross_attention(z, e, all_zero).values == z.values);
    CHECK_THROWS_AS(cross_attention(FeatureMap{Tensor(Shape{2, 6, 4, 4})}, e, p), ShapeError);
    auto bad = small_config();
    bad.attention_tokens = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    auto bad_p = p;
    bad_p.tokens = 3;
    CHECK_THROWS_AS(cross_attention(z, e, bad_p), ConfigError);
  }

  TEST_CASE("cross attention matches the naive oracle on random shapes") {
    Rng rng(7);
    for (int trial = 0; trial < 25; ++trial) {
      const std::int64_t C = 1 + static_cast<std::int64_t>(rng.below(16)), h = 1 + static_cast<std::int64_t>(rng.below(8)),
                         w = 1 + static_cast<std::int64_t>(rng.below(8)), d = 1 + static_cast<std::int64_t>(rng.below(16));
      const std::int64_t T = std::vector<std::int64_t>{1, 4, 8}[rng.below(3)];
      CrossAttentionParams p("ca", C, d, T, rng);
      FeatureMap z{oracle::random_tensor(Shape{2, C, h, w}, rng)};
      Tensor e = oracle::random_embeddings(2, rng);
      Tensor wl, wr;
      auto ours = cross_attention(z, e, p, &wl);
      auto ref = oracle::cross_attention(z.values, e, p, &wr);
      CHECK(oracle::max_abs_diff(ours.values, ref) < 1e-5);
      CHECK(oracle::max_abs_diff(wl, wr) < 1e-10);
      for (std::int64_t r = 0; r < 2 * h * w; ++r) {
        double s = 0;
        for (std::int64_t t = 0; t < T; ++t) s += wl[static_cast<std::size_t>(r * T + t)];
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
    }
  }

  TEST_CASE("decoder restores the input resolution") {
    auto s = GeneratorState::init(small_config());
    Rng rng(8);
    FeatureMap m{oracle::random_tensor(Shape{2, 8 + 16, 8, 8}, rng)};
    Tensor e = oracle::random_embeddings(2, rng);
    auto o = decode(m, e, s);
    CHECK(o.shape() == Shape{2, 3, 32, 32});
    CHECK(o.max_abs() == 0.0);
    randomize_head(s, rng);
    auto o1 = decode(m, e, s), o2 = decode(m, e, s);
    CHECK(o1 == o2);
    CHECK(o1.max_abs() > 0.0);
    CHECK_THROWS_AS(decode(FeatureMap{Tensor(Shape{2, 9, 8, 8})}, e, s), ShapeError);
  }

  TEST_CASE("full generator matches the straight-line oracle") {
    Rng rng(9);
    for (auto kind : {VariantKind::full, VariantKind::no_cross_attention, VariantKind::no_purifier, VariantKind::no_fusion}) {
      auto cfg = small_config(3);
      cfg.cross_attention_count = 2;
      auto s = build_variant(kind, cfg);
      randomize_head(s, rng);
      auto x = random_images(2, 16, rng);
      Tensor e = oracle::random_embeddings(2, rng);
      auto p = generate(x, e, kDefaultEpsilon, s);
      auto ref = oracle::generate(s, x.pixels, e, kDefaultEpsilon);
      CHECK(oracle::max_abs_diff(p.delta, ref) < 1e-5);
    }
    auto cfg = small_config(4);
    cfg.cross_attention_count = 3;
    cfg.attention_tokens = 8;
    auto s = GeneratorState::init(cfg);
    randomize_head(s, rng);
    auto x = random_images(2, 16, rng);
    Tensor e = oracle::random_embeddings(2, rng);
    CHECK(oracle::max_abs_diff(generate(x, e, kDefaultEpsilon, s).delta, oracle::generate(s, x.pixels, e, kDefaultEpsilon)) <
          1e-5);
  }

  TEST_CASE("generation is deterministic and batch equivariant") {
    Rng rng(10);
    auto s = GeneratorState::init(small_config());
    randomize_head(s, rng);
    auto x = random_images(4, 16, rng);
    Tensor e = oracle::random_embeddings(4, rng);
    auto a = generate(x, e, kDefaultEpsilon, s);
    CHECK(a.delta == generate(x, e, kDefaultEpsilon, s).delta);
    const std::vector<std::int64_t> perm{2, 0, 3, 1};
    std::vector<Tensor> xs, es;
    for (auto i : perm) {
      xs.push_back(x.pixels.slice0(i, i + 1));
      es.push_back(e.slice0(i, i + 1));
    }
    ImageBatch xp;
    xp.pixels = concat0(xs);
    auto b = generate(xp, concat0(es), kDefaultEpsilon, s);
    for (std::size_t k = 0; k < perm.size(); ++k)
      CHECK(oracle::max_abs_diff(b.delta.slice0(k, k + 1), a.delta.slice0(perm[k], perm[k] + 1)) < 1e-12);
  }

  TEST_CASE("parameter gradients match finite differences on a 1% sample") {
    Rng rng(11);
    auto s = GeneratorState::init(small_config(5));
    randomize_head(s, rng, 0.1);
    auto x = random_images(2, 16, rng);
    Tensor e = oracle::random_embeddings(2, rng);
    const Tensor R = oracle::random_tensor(Shape{2, 3, 16, 16}, rng);
    auto objective = [&](bool track) {
      return ag::mean(ag::mul_const(graph::perturbation(s, ag::constant(x.pixels), e, kDefaultEpsilon, track), R));
    };
    auto params = s.parameters();
    for (auto* p : params) p->zero_grad();
    ag::backward(objective(true));
    std::int64_t total = 0;
    for (auto* p : params) total += static_cast<std::int64_t>(p->value.size());
    oracle::GradCheck gc;
    for (auto* p : params) {
      const auto n = static_cast<std::int64_t>(p->value.size());
      const auto k = std::max<std::int64_t>(1, n / 100);
      std::vector<std::size_t> coords;
      for (auto i : rng.sample_without_replacement(n, k)) coords.push_back(static_cast<std::size_t>(i));
      oracle::check_coordinates(*p, coords, [&] { return objective(false)->value[0]; }, 1e-3, 1e-3, 1e-8, gc);
    }
    MESSAGE("checked " << gc.checked << " of " << total << " coordinates (" << gc.rechecked
                        << " near a kink, rechecked with a finer step), worst " << gc.worst);
    CHECK(gc.checked * 100 >= static_cast<std::size_t>(total));
    CHECK(gc.failed == 0);
  }

  TEST_CASE("patch mask counts") {
    PerturbationBatch p;
    p.delta = Tensor(Shape{50, 3, 32, 32}, 0.05);
    auto none = apply_patch_mask(p, 8, 0.0, 1);
    CHECK(none.delta == p.delta);
    CHECK(apply_patch_mask(p, 8, 1.0, 1).delta.max_abs() == 0.0);
    auto m = apply_patch_mask(p, 8, 0.2, 1);
    for (std::int64_t b = 0; b < 50; ++b) CHECK(zero_patches(m.delta, b, 8) == 3);
    for (std::size_t i = 0; i < p.delta.size(); ++i) CHECK(std::abs(m.delta[i]) <= std::abs(p.delta[i]));
    CHECK(apply_patch_mask(p, 8, 0.2, 1).delta == m.delta);
    CHECK_FALSE(apply_patch_mask(p, 8, 0.2, 2).delta == m.delta);
    CHECK_THROWS_AS(apply_patch_mask(p, 7, 0.2, 1), ArgumentError);
    CHECK_THROWS_AS(apply_patch_mask(p, 8, 1.5, 1), ArgumentError);
  }

  TEST_CASE("patch mask rounds half away from zero") {
    PerturbationBatch p;
    p.delta = Tensor(Shape{4, 1, 16, 16}, 1.0);
    // P = 4: 0.125 * 4 = 0.5 rounds to 1; 0.375 * 4 = 1.5 rounds to 2.
    auto a = apply_patch_mask(p, 8, 0.125, 3), b = apply_patch_mask(p, 8, 0.375, 3);
    for (std::int64_t i = 0; i < 4; ++i) {
      CHECK(zero_patches(a.delta, i, 8) == 1);
      CHECK(zero_patches(b.delta, i, 8) == 2);
    }
  }

  TEST_CASE("adversarial assembly clamps to the valid range") {
    Rng rng(12);
    auto x = random_images(3, 8, rng);
    PerturbationBatch p;
    p.delta = Tensor(x.pixels.shape());
    CHECK(make_adversarial(x, p).pixels == x.pixels);
    ImageBatch white;
    white.pixels = Tensor(Shape{1, 3, 8, 8}, 1.0);
    PerturbationBatch up;
    up.delta = Tensor(Shape{1, 3, 8, 8}, 0.03);
    CHECK(make_adversarial(white, up).pixels == white.pixels);
    PerturbationBatch r;
    r.delta = oracle::random_tensor(x.pixels.shape(), rng, -kDefaultEpsilon, kDefaultEpsilon);
    auto adv = make_adversarial(x, r);
    CHECK(oracle::max_abs_diff(adv.pixels, x.pixels) <= kDefaultEpsilon);
    CHECK(adv.pixels.min() >= 0.0);
    CHECK(adv.pixels.max() <= 1.0);
    CHECK_THROWS_AS(make_adversarial(x, up), ShapeError);
  }

  TEST_CASE("configuration validation") {
    auto c = small_config();
    CHECK_NOTHROW(c.validate());
    c.base_width = 6;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_config();
    c.cross_attention_count = 4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK(small_config().fusion_width() == 16);
    CHECK(GeneratorState::init(small_config()).attention.size() == 2);
  }
}

TEST_SUITE("variants") {
  TEST_CASE("no cross attention removes exactly the attention parameters") {
    auto base = small_config();
    auto full = build_variant(VariantKind::full, base);
    auto none = build_variant(VariantKind::no_cross_attention, base);
    CHECK(none.attention.empty());
    std::int64_t attn = 0;
    for (const auto& a : full.attention)
      for (const auto* q : {&a.w_q, &a.w_k, &a.w_v, &a.w_o}) attn += static_cast<std::int64_t>(q->value.size());
    CHECK(attn == (8 * 8 + 512 * 8 * 2 + 8 * 8) + (4 * 8 + 512 * 8 * 2 + 8 * 4));
    CHECK(full.parameter_count() - none.parameter_count() == attn);
  }

  TEST_CASE("other ablations") {
    auto base = small_config();
    auto oh = build_variant(VariantKind::one_hot_condition, base);
    CHECK(oh.config.condition == ConditionSource::one_hot);
    auto np = build_variant(VariantKind::no_purifier, base);
    CHECK_FALSE(np.config.use_purifier);
    CHECK(np.purifier.blocks().empty());
    auto nf = build_variant(VariantKind::no_fusion, base);
    CHECK(nf.config.fusion_width() == 0);
    CHECK(nf.down1.conv.weight.value.dim(1) == 2);
    CHECK(parse_variant("no_fusion") == VariantKind::no_fusion);
    CHECK_THROWS_AS(parse_variant("no_decoder"), ArgumentError);
  }
}
