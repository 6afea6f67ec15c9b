#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"

#include "cgnc/archive.hpp"
#include "cgnc/autograd.hpp"
#include "cgnc/classifier.hpp"
#include "cgnc/error.hpp"
#include "cgnc/image_io.hpp"
#include "cgnc/nn.hpp"
#include "cgnc/rng.hpp"
#include "cgnc/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/oracle.hpp"

using namespace cgnc;
namespace fs = std::filesystem;

namespace {

Tensor rnd(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  return oracle::random_tensor(s, rng, lo, hi);
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "cgnc_unit";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("tensor") {
  TEST_CASE("shape arithmetic and reshape") {
    Tensor t(Shape{2, 3, 4});
    CHECK(t.size() == 24);
    CHECK(shape_numel(Shape{5, 0, 2}) == 0);
    CHECK(t.reshaped({6, 4}).shape() == Shape{6, 4});
    CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeError);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  }

  TEST_CASE("slice and concat are inverse") {
    Tensor t = rnd({5, 2, 3}, 1);
    Tensor a = t.slice0(0, 2), b = t.slice0(2, 5);
    CHECK(a.dim(0) == 2);
    CHECK(concat0({a, b}) == t);
    CHECK_THROWS_AS(t.slice0(3, 7), ShapeError);
    CHECK_THROWS_AS(concat0({a, Tensor(Shape{1, 3, 3})}), ShapeError);
  }

  TEST_CASE("reductions") {
    Tensor t(Shape{4}, std::vector<double>{-3, 1, 2, 0.5});
    CHECK(t.sum() == doctest::Approx(0.5));
    CHECK(t.max_abs() == 3);
    CHECK(t.min() == -3);
    CHECK(t.max() == 2);
  }

  TEST_CASE("storage is 64-byte aligned") {
    for (int n = 1; n < 50; n += 7) {
      Tensor t(Shape{n});
      CHECK(reinterpret_cast<std::uintptr_t>(t.data()) % 64 == 0);
    }
  }
}

TEST_SUITE("rng") {
  TEST_CASE("same seed same stream, different purposes differ") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK(derive_seed(7, "data") != derive_seed(7, "init"));
    CHECK(derive_seed(7, "data", 0) != derive_seed(7, "data", 1));
    CHECK(derive_seed(7, "data", 3) == derive_seed(7, "data", 3));
  }

  TEST_CASE("fnv1a64 known vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
  }

  TEST_CASE("distribution moments") {
    Rng rng(3);
    const int n = 200000;
    double su = 0, sn = 0, sn2 = 0;
    for (int i = 0; i < n; ++i) {
      su += rng.uniform();
      const double z = rng.normal();
      sn += z;
      sn2 += z * z;
    }
    CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
    CHECK(std::abs(sn / n) < 0.01);
    CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.02));
  }

  TEST_CASE("below and sampling without replacement") {
    Rng rng(5);
    std::vector<int> hist(7, 0);
    for (int i = 0; i < 70000; ++i) {
      auto k = rng.below(7);
      REQUIRE(k < 7);
      ++hist[k];
    }
    for (int h : hist) CHECK(std::abs(h - 10000) < 500);
    for (int rep = 0; rep < 50; ++rep) {
      auto s = rng.sample_without_replacement(16, 5);
      CHECK(s.size() == 5);
      CHECK(std::set<std::int64_t>(s.begin(), s.end()).size() == 5);
      for (auto v : s) CHECK((v >= 0 && v < 16));
    }
  }
}

TEST_SUITE("autograd") {
  const double tol = 1e-5;

  TEST_CASE("conv2d forward matches the naive loop") {
    Tensor x = rnd({2, 3, 7, 6}, 1), w = rnd({4, 3, 3, 3}, 2), b = rnd({4}, 3);
    for (int stride : {1, 2}) {
      auto y = ag::conv2d(ag::constant(x), ag::constant(w), ag::constant(b), stride, 1)->value;
      auto ref = oracle::conv2d(x, w, b, stride);
      REQUIRE(y.shape() == ref.shape());
      CHECK(oracle::max_abs_diff(y, ref) < 1e-12);
    }
  }

  TEST_CASE("conv2d gradients") {
    for (int stride : {1, 2}) {
      auto f = [&](const std::vector<ag::Var>& v) { return ag::conv2d(v[0], v[1], v[2], stride, 1); };
      CHECK(gradcheck::worst_error(f, {rnd({2, 2, 6, 6}, 4), rnd({3, 2, 3, 3}, 5), rnd({3}, 6)}) < tol);
    }
    auto f5 = [](const std::vector<ag::Var>& v) { return ag::conv2d(v[0], v[1], v[2], 1, 2); };
    CHECK(gradcheck::worst_error(f5, {rnd({1, 2, 6, 6}, 7), rnd({2, 2, 5, 5}, 8), rnd({2}, 9)}) < tol);
  }

  TEST_CASE("instance norm forward and gradients") {
    Tensor x = rnd({2, 3, 4, 5}, 10), g = rnd({3}, 11, 0.5, 1.5), b = rnd({3}, 12);
    auto y = ag::instance_norm(ag::constant(x), ag::constant(g), ag::constant(b))->value;
    CHECK(oracle::max_abs_diff(y, oracle::instance_norm(x, g, b)) < 1e-12);
    auto f = [](const std::vector<ag::Var>& v) { return ag::instance_norm(v[0], v[1], v[2]); };
    CHECK(gradcheck::worst_error(f, {x, g, b}) < tol);
  }

  TEST_CASE("linear, matmul and elementwise gradients") {
    auto lin = [](const std::vector<ag::Var>& v) { return ag::linear(v[0], v[1], v[2]); };
    CHECK(gradcheck::worst_error(lin, {rnd({3, 5}, 13), rnd({4, 5}, 14), rnd({4}, 15)}) < tol);
    Tensor x = rnd({3, 5}, 13), w = rnd({4, 5}, 14), b = rnd({4}, 15);
    CHECK(oracle::max_abs_diff(ag::linear(ag::constant(x), ag::constant(w), ag::constant(b))->value,
                               oracle::linear(x, w, b)) < 1e-12);
    auto mm = [](const std::vector<ag::Var>& v) { return ag::matmul(v[0], v[1]); };
    CHECK(gradcheck::worst_error(mm, {rnd({3, 4}, 16), rnd({4, 2}, 17)}) < tol);
    auto ew = [](const std::vector<ag::Var>& v) {
      return ag::add(ag::tanh(ag::scale(v[0], 1.5)), ag::leaky_relu(v[1], 0.2));
    };
    CHECK(gradcheck::worst_error(ew, {rnd({10}, 18), rnd({10}, 19)}) < tol);
    auto cl = [](const std::vector<ag::Var>& v) { return ag::relu(ag::clamp(v[0], -0.5, 0.5)); };
    CHECK(gradcheck::worst_error(cl, {rnd({20}, 20)}) < tol);
  }

  TEST_CASE("spatial op gradients") {
    auto up = [](const std::vector<ag::Var>& v) { return ag::upsample_nearest2x(v[0]); };
    CHECK(gradcheck::worst_error(up, {rnd({1, 2, 3, 3}, 21)}) < tol);
    auto mp = [](const std::vector<ag::Var>& v) { return ag::max_pool2(v[0]); };
    CHECK(gradcheck::worst_error(mp, {rnd({1, 2, 4, 4}, 22)}) < tol);
    auto ap = [](const std::vector<ag::Var>& v) { return ag::avg_pool2(v[0]); };
    CHECK(gradcheck::worst_error(ap, {rnd({1, 2, 4, 4}, 23)}) < tol);
    auto gp = [](const std::vector<ag::Var>& v) { return ag::global_avg_pool(v[0]); };
    CHECK(gradcheck::worst_error(gp, {rnd({2, 3, 3, 3}, 24)}) < tol);
    auto cat = [](const std::vector<ag::Var>& v) {
      return ag::concat_channels(v[0], ag::broadcast_spatial(v[1], 3, 3));
    };
    CHECK(gradcheck::worst_error(cat, {rnd({2, 2, 3, 3}, 25), rnd({2, 4}, 26)}) < tol);
    auto tok = [](const std::vector<ag::Var>& v) { return ag::from_tokens(ag::to_tokens(v[0]), 2, 3); };
    Tensor z = rnd({2, 4, 2, 3}, 27);
    CHECK(tok({ag::constant(z)})->value == z);
    CHECK(gradcheck::worst_error(tok, {z}) < tol);
  }

  TEST_CASE("attention forward, row sums and gradients") {
    Tensor q = rnd({2, 5, 3}, 28), k = rnd({2, 4, 3}, 29), v = rnd({2, 4, 3}, 30);
    Tensor w;
    auto out = ag::attention(ag::constant(q), ag::constant(k), ag::constant(v), &w)->value;
    for (std::int64_t b = 0; b < 2; ++b) {
      std::vector<double> qb(q.data() + b * 15, q.data() + (b + 1) * 15), kb(k.data() + b * 12, k.data() + (b + 1) * 12),
          vb(v.data() + b * 12, v.data() + (b + 1) * 12);
      auto ref = oracle::attend(qb, kb, vb, 5, 4, 3);
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(out[b * 15 + i] == doctest::Approx(ref[i]).epsilon(1e-12));
      for (std::int64_t i = 0; i < 5; ++i) {
        double s = 0;
        for (std::int64_t t = 0; t < 4; ++t) s += w[(b * 5 + i) * 4 + t];
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
    }
    auto f = [](const std::vector<ag::Var>& vv) { return ag::attention(vv[0], vv[1], vv[2]); };
    CHECK(gradcheck::worst_error(f, {q, k, v}) < tol);
  }

  TEST_CASE("cross entropy value and gradient") {
    Tensor logits = rnd({4, 10}, 31, -3, 3);
    std::vector<std::int64_t> t{0, 9, 3, 3};
    double ref = 0;
    for (int b = 0; b < 4; ++b) {
      double z = 0;
      for (int j = 0; j < 10; ++j) z += std::exp(logits[b * 10 + j]);
      ref += -(logits[b * 10 + t[b]] - std::log(z));
    }
    CHECK(ag::cross_entropy(ag::constant(logits), t)->value[0] == doctest::Approx(ref / 4).epsilon(1e-12));
    auto f = [&](const std::vector<ag::Var>& v) { return ag::cross_entropy(v[0], t); };
    CHECK(gradcheck::worst_error(f, {logits}) < tol);
    CHECK_THROWS(ag::cross_entropy(ag::constant(logits), {0, 1, 2, 10}));
  }

  TEST_CASE("spectral norm weight treats u,v as constants") {
    Tensor w = rnd({4, 3}, 32), u = rnd({4}, 33), v = rnd({3}, 34);
    auto y = ag::spectral_norm_weight(ag::constant(w), u, v)->value;
    CHECK(oracle::max_abs_diff(y, oracle::spectral_scaled(w, u, v)) < 1e-12);
    auto f = [&](const std::vector<ag::Var>& vv) { return ag::spectral_norm_weight(vv[0], u, v); };
    CHECK(gradcheck::worst_error(f, {w}) < tol);
    Tensor zero(Shape{4, 3});
    CHECK(ag::spectral_norm_weight(ag::constant(zero), u, v)->value == zero);
  }

  TEST_CASE("constants build no graph") {
    auto y = ag::tanh(ag::add(ag::constant(rnd({3}, 35)), ag::constant(rnd({3}, 36))));
    CHECK_FALSE(y->requires_grad);
    CHECK(y->inputs.empty());
  }

  TEST_CASE("gradient accumulates on reused nodes") {
    auto x = ag::leaf(Tensor(Shape{1}, std::vector<double>{2.0}));
    auto y = ag::add(x, ag::add(x, x));
    ag::backward(ag::mean(y));
    CHECK(x->grad[0] == doctest::Approx(3.0));
  }
}

TEST_SUITE("nn") {
  TEST_CASE("orthogonal init has orthonormal columns or rows") {
    Rng rng(1);
    for (auto [r, c] : {std::pair{8, 5}, std::pair{5, 8}, std::pair{6, 6}}) {
      Tensor q = nn::orthogonal(r, c, rng);
      const auto k = std::min(r, c);
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
          double s = 0;
          if (r >= c)
            for (int t = 0; t < r; ++t) s += q[t * c + i] * q[t * c + j];
          else
            for (int t = 0; t < c; ++t) s += q[i * c + t] * q[j * c + t];
          CHECK(s == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-9));
        }
    }
  }

  TEST_CASE("kaiming normal variance") {
    Rng rng(2);
    Tensor w = nn::kaiming_normal(Shape{64, 32, 3, 3}, 32 * 9, rng);
    double s2 = 0;
    for (double v : w.values()) s2 += v * v;
    CHECK(s2 / static_cast<double>(w.size()) == doctest::Approx(2.0 / 288).epsilon(0.05));
  }

  TEST_CASE("adam first step moves each coordinate by lr against the gradient sign") {
    Parameter p("p", Tensor(Shape{3}, std::vector<double>{1.0, -2.0, 0.5}));
    nn::Adam opt({&p}, nn::AdamOptions{0.1, 0.5, 0.999, 1e-8});
    p.grad = Tensor(Shape{3}, std::vector<double>{0.3, -4.0, 1e-3});
    opt.step();
    CHECK(p.value[0] == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(p.value[1] == doctest::Approx(-1.9).epsilon(1e-6));
    CHECK(p.value[2] == doctest::Approx(0.4).epsilon(1e-4));
  }

  TEST_CASE("adam with zero learning rate is a bitwise no-op") {
    Rng rng(3);
    Parameter p("p", oracle::random_tensor(Shape{10}, rng));
    const Tensor before = p.value;
    nn::Adam opt({&p}, nn::AdamOptions{0.0});
    for (int i = 0; i < 3; ++i) {
      p.grad = oracle::random_tensor(Shape{10}, rng);
      opt.step();
    }
    CHECK(p.value == before);
  }
}

TEST_SUITE("archive") {
  Archive sample() {
    Archive a;
    a.meta = {{"kind", "test"}, {"n", 3}};
    a.arrays.emplace_back("x", rnd({2, 3}, 40));
    a.arrays.emplace_back("y", Tensor(Shape{4}, std::vector<double>{0.1, -0.0, 1e300, -5e-324}));
    return a;
  }

  TEST_CASE("round trip is bitwise") {
    auto bytes = serialize_archive(sample());
    Archive b = parse_archive(bytes, 1, "mem");
    CHECK(b.meta == sample().meta);
    CHECK(b.array("x") == sample().array("x"));
    const auto& y = b.array("y");
    CHECK(std::signbit(y[1]));
    CHECK(y[3] == -5e-324);
    CHECK_THROWS_AS(b.array("missing"), LoadError);
  }

  TEST_CASE("every truncation is rejected") {
    auto bytes = serialize_archive(sample());
    for (std::size_t n = 0; n < bytes.size(); n += 7) {
      std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
      CHECK_THROWS_AS(parse_archive(cut, 1, "mem"), LoadError);
    }
  }

  TEST_CASE("corruption and newer versions are rejected") {
    auto bytes = serialize_archive(sample());
    auto bad = bytes;
    bad[bad.size() / 2] ^= 0x40;
    CHECK_THROWS_AS(parse_archive(bad, 1, "mem"), LoadError);
    Archive v2 = sample();
    v2.version = 2;
    try {
      parse_archive(serialize_archive(v2), 1, "mem");
      FAIL("expected a version error");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }

  TEST_CASE("atomic file write leaves no temp file") {
    auto path = scratch("archive.bin");
    save_archive(path, sample());
    CHECK(load_archive(path, 1).array("x") == sample().array("x"));
    for (const auto& e : fs::directory_iterator(path.parent_path()))
      CHECK(e.path().filename().string().find(".tmp") == std::string::npos);
    CHECK(file_digest(path).size() == 16);
  }
}

TEST_SUITE("image_io") {
  TEST_CASE("png round trip is exact") {
    Image8 img{5, 4, 3, {}};
    for (int i = 0; i < 60; ++i) img.pixels.push_back(static_cast<std::uint8_t>(i * 4));
    auto path = scratch("rt.png");
    write_png(path, img);
    Image8 back = read_image(path);
    CHECK(back.width == 5);
    CHECK(back.height == 4);
    CHECK(back.channels == 3);
    CHECK(back.pixels == img.pixels);
  }

  TEST_CASE("tensor conversion rounds and clamps") {
    Tensor t(Shape{1, 1, 4}, std::vector<double>{-0.2, 0.5, 1.0 / 255.0 * 0.49, 1.7});
    Image8 img = tensor_to_image(t);
    CHECK(img.pixels == std::vector<std::uint8_t>{0, 128, 0, 255});
    Tensor back = image_to_tensor(img);
    CHECK(back[1] == doctest::Approx(128.0 / 255.0));
  }

  TEST_CASE("unreadable files raise load errors naming the path") {
    auto path = scratch("garbage.png");
    write_file_atomic(path, std::string("not an image at all"));
    try {
      read_image(path);
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("garbage.png") != std::string::npos);
    }
    CHECK_THROWS_AS(read_image(scratch("absent.png")), LoadError);
  }
}

TEST_SUITE("classifier") {
  TEST_CASE("argmax ties resolve to the lowest index") {
    const double row[] = {0.1, 0.7, 0.7, 0.2};
    bool tie = false;
    CHECK(argmax_row(row, 4, &tie) == 1);
    CHECK(tie);
    const double row2[] = {0.1, 0.2, 0.9};
    CHECK(argmax_row(row2, 3, &tie) == 2);
    CHECK_FALSE(tie);
  }

  TEST_CASE("save and load preserve logits") {
    auto c = Classifier::create("wide_cnn", 3, {"a", "b", "c"}, 4);
    auto path = scratch("clf.model");
    c.save(path);
    auto d = Classifier::load(path);
    Tensor x = rnd({2, 3, 16, 16}, 41, 0, 1);
    CHECK(c.logits(x) == d.logits(x));
    CHECK(d.arch() == "wide_cnn");
    CHECK_THROWS_AS(Classifier::create("resnet", 3, {"a", "b"}, 0), ArgumentError);
    CHECK_THROWS_AS(Classifier::create("small_cnn", 3, {"a"}, 0), ArgumentError);
  }
}
