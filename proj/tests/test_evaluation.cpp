#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <sstream>

#include "doctest.h"

#include "cgnc/error.hpp"
#include "cgnc/evaluation.hpp"
#include "support/oracle.hpp"

using namespace cgnc;
namespace fs = std::filesystem;

namespace {

// Always predicts `winner`.
class ConstantVictim final : public VictimModel {
 public:
  ConstantVictim(std::string name, std::vector<std::string> labels, std::int64_t winner)
      : name_(std::move(name)), labels_(std::move(labels)), winner_(winner) {}
  const std::string& name() const override { return name_; }
  const std::vector<std::string>& label_names() const override { return labels_; }
  Tensor logits(const Tensor& pixels) const override {
    Tensor out(Shape{pixels.dim(0), static_cast<std::int64_t>(labels_.size())});
    for (std::int64_t b = 0; b < pixels.dim(0); ++b) out.at(b, winner_) = 1.0;
    return out;
  }

 private:
  std::string name_;
  std::vector<std::string> labels_;
  std::int64_t winner_;
};

class BrokenVictim final : public VictimModel {
 public:
  explicit BrokenVictim(std::vector<std::string> labels) : labels_(std::move(labels)) {}
  const std::string& name() const override { return name_; }
  const std::vector<std::string>& label_names() const override { return labels_; }
  Tensor logits(const Tensor&) const override { throw LoadError("weights went missing"); }

 private:
  std::string name_ = "broken";
  std::vector<std::string> labels_;
};

ImageBatch batch_of(const Tensor& t) {
  ImageBatch b;
  b.pixels = t;
  return b;
}

ImageBatch natural_image() {
  const Tensor chw = image_to_tensor(read_image(fs::path(CGNC_SOURCE_DIR) / "tests" / "data" / "astronaut96.png"));
  return batch_of(chw.reshaped(Shape{1, chw.dim(0), chw.dim(1), chw.dim(2)}));
}

double psnr(const Tensor& a, const Tensor& b) {
  double mse = 0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.size());
  return 10.0 * std::log10(1.0 / mse);
}

struct EvalFixture {
  Dataset eval_set;
  std::shared_ptr<Classifier> surrogate;
  std::shared_ptr<Classifier> other;
};

const EvalFixture& eval_fixture() {
  static const EvalFixture f = [] {
    DatasetSpec spec;
    spec.num_classes = 8;
    spec.samples_per_class = 6;
    spec.split = Split::eval;
    EvalFixture out{synth_toy_dataset(spec), nullptr, nullptr};
    DatasetSpec train_spec = spec;
    train_spec.split = Split::train;
    train_spec.samples_per_class = 12;
    const Dataset train_set = synth_toy_dataset(train_spec);
    out.surrogate = std::make_shared<Classifier>(Classifier::create("small_cnn", 3, train_set.class_names(), 3));
    fit_classifier(*out.surrogate, train_set, FitOptions{3, 32, 3e-3, 1});
    out.other = std::make_shared<Classifier>(Classifier::create("wide_cnn", 3, train_set.class_names(), 4));
    fit_classifier(*out.other, train_set, FitOptions{2, 32, 3e-3, 1});
    return out;
  }();
  return f;
}

// Untrained generator: the head is zero, so every perturbation is zero.
Checkpoint zero_checkpoint(const std::vector<std::string>& target_names) {
  GeneratorConfig g;
  g.base_width = 8;
  g.residual_blocks = 1;
  g.attention_dim = 8;
  Checkpoint c;
  c.generator = GeneratorState::init(g);
  c.surrogate_name = "small_cnn";
  c.targets = TargetClassSet::resolve(target_names, eval_fixture().eval_set.class_names());
  c.train.target_classes = target_names;
  return c;
}

Checkpoint signal_checkpoint(const std::vector<std::string>& target_names) {
  Checkpoint c = zero_checkpoint(target_names);
  Rng rng(17);
  for (auto& w : c.generator.head.weight.value.storage()) w = 0.5 * rng.normal();
  return c;
}

double clean_target_rate(const Classifier& m, const Dataset& d, std::int64_t target) {
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < d.size(); ++i) {
    const Tensor img = d.image(i);
    const Tensor l = m.logits(img.reshaped(Shape{1, img.dim(0), img.dim(1), img.dim(2)}));
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < l.dim(1); ++j)
      if (l.at(0, j) > l.at(0, best)) best = j;
    hits += best == target;
  }
  return static_cast<double>(hits) / static_cast<double>(d.size());
}

std::vector<std::string> split_lines(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

}  // namespace

TEST_SUITE("evaluation") {
  TEST_CASE("constant victims give ASR one and zero") {
    const std::vector<std::string> labels{"a", "b", "c", "d"};
    ConstantVictim always_c("const", labels, 2);
    Rng rng(1);
    const ImageBatch x = batch_of(oracle::random_tensor(Shape{7, 3, 8, 8}, rng, 0, 1));
    auto hit = attack_success_rate(x, always_c, 2);
    CHECK(hit.n == 7);
    CHECK(hit.successes == 7);
    CHECK(hit.asr == 1.0);
    CHECK(attack_success_rate(x, always_c, 0).asr == 0.0);
    CHECK(resolve_victim_label(always_c, "c") == 2);
    CHECK_THROWS_AS(resolve_victim_label(always_c, "zebra"), MappingError);
    CHECK_THROWS_AS(attack_success_rate(x, always_c, 4), MappingError);
  }

  TEST_CASE("success counting from hand-built logits") {
    Tensor l(Shape{5, 3}, std::vector<double>{
                              0.1, 0.9, 0.0,  // 1
                              2.0, 1.0, 0.0,  // 0
                              0.0, 3.0, 1.0,  // 1
                              0.5, 0.5, 0.1,  // tie -> 0
                              0.0, 1.0, 0.2,  // 1
                          });
    auto r = success_from_logits(l, 1);
    CHECK(r.successes == 3);
    CHECK(r.asr == doctest::Approx(0.6));
    CHECK(r.ties == 1);
    CHECK(success_from_logits(l, 0).successes == 2);
    CHECK_THROWS_AS(success_from_logits(l, 3), MappingError);
    CHECK_THROWS_AS(success_from_logits(l, -1), MappingError);
  }

  TEST_CASE("filters leave constant images unchanged") {
    const ImageBatch c = batch_of(Tensor(Shape{2, 3, 9, 11}, 0.37));
    for (const auto& out : {gaussian_smooth(c, 5, 1.3), median_smooth(c, 3), average_smooth(c, 5)}) {
      CHECK(out.pixels.shape() == c.pixels.shape());
      CHECK(oracle::max_abs_diff(out.pixels, c.pixels) < 1e-12);
    }
  }

  TEST_CASE("impulse responses") {
    Tensor t(Shape{1, 1, 7, 7});
    t.at(0, 0, 3, 3) = 1.0;
    const ImageBatch x = batch_of(t);
    const auto avg = average_smooth(x, 3);
    for (std::int64_t i = 0; i < 7; ++i)
      for (std::int64_t j = 0; j < 7; ++j) {
        const bool near = std::abs(i - 3) <= 1 && std::abs(j - 3) <= 1;
        CHECK(avg.pixels.at(0, 0, i, j) == doctest::Approx(near ? 1.0 / 9.0 : 0.0));
      }
    CHECK(median_smooth(x, 3).pixels.max_abs() == 0.0);
    const auto g = gaussian_smooth(x, 3, 1.0);
    const auto w = gaussian_kernel(3, 1.0);
    for (std::int64_t di = -1; di <= 1; ++di)
      for (std::int64_t dj = -1; dj <= 1; ++dj)
        CHECK(g.pixels.at(0, 0, 3 + di, 3 + dj) == doctest::Approx(w[static_cast<std::size_t>((di + 1) * 3 + dj + 1)]));
    CHECK_THROWS_AS(average_smooth(x, 4), ArgumentError);
    CHECK_THROWS_AS(median_smooth(x, 2), ArgumentError);
    CHECK_THROWS_AS(gaussian_smooth(x, 6, 1.0), ArgumentError);
    CHECK_THROWS_AS(gaussian_smooth(x, 3, 0.0), ArgumentError);
  }

  TEST_CASE("gaussian kernel closed form") {
    for (std::int64_t k : {3, 5, 7}) {
      for (double sigma : {0.5, 1.0, 2.5}) {
        const auto w = gaussian_kernel(k, sigma);
        REQUIRE(w.size() == static_cast<std::size_t>(k * k));
        CHECK(std::accumulate(w.begin(), w.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
        const auto r = k / 2;
        double z = 0;
        for (std::int64_t i = -r; i <= r; ++i)
          for (std::int64_t j = -r; j <= r; ++j) z += std::exp(-(i * i + j * j) / (2 * sigma * sigma));
        for (std::int64_t i = -r; i <= r; ++i)
          for (std::int64_t j = -r; j <= r; ++j)
            CHECK(w[static_cast<std::size_t>((i + r) * k + j + r)] ==
                  doctest::Approx(std::exp(-(i * i + j * j) / (2 * sigma * sigma)) / z).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("jpeg round trip") {
    const ImageBatch x = natural_image();
    REQUIRE(x.pixels.shape() == Shape{1, 3, 96, 96});
    const auto q90 = jpeg_roundtrip(x, 90), q70 = jpeg_roundtrip(x, 70);
    CHECK(q90.pixels.shape() == x.pixels.shape());
    CHECK(q90.pixels.min() >= 0.0);
    CHECK(q90.pixels.max() <= 1.0);
    CHECK(jpeg_roundtrip(x, 90).pixels == q90.pixels);
    const double p90 = psnr(q90.pixels, x.pixels), p70 = psnr(q70.pixels, x.pixels);
    MESSAGE("PSNR q90 " << p90 << " dB, q70 " << p70 << " dB");
    CHECK(p90 >= p70);
    CHECK(p70 > 25.0);
    CHECK_THROWS_AS(jpeg_roundtrip(x, 0), ArgumentError);
    CHECK_THROWS_AS(jpeg_roundtrip(x, 101), ArgumentError);
  }

  TEST_CASE("defense specs") {
    auto g = DefenseSpec::parse("gaussian:k=5,sigma=1.5");
    CHECK(g.kind == DefenseKind::gaussian);
    CHECK(g.label() == "gaussian");
    CHECK(g.params() == "k=5;sigma=1.5");
    CHECK(DefenseSpec::parse("gaussian").params() == "k=3;sigma=1");
    CHECK(DefenseSpec::parse("median:k=3").params() == "k=3");
    CHECK(DefenseSpec::parse("average").params() == "k=3");
    CHECK(DefenseSpec::parse("jpeg:q=90").params() == "q=90");
    CHECK(DefenseSpec::parse("none").params() == "");
    CHECK_THROWS_AS(DefenseSpec::parse("jpeg"), ArgumentError);
    CHECK_THROWS_AS(DefenseSpec::parse("jpeg:q=0"), ArgumentError);
    CHECK_THROWS_AS(DefenseSpec::parse("median:k=4"), ArgumentError);
    CHECK_THROWS_AS(DefenseSpec::parse("median:sigma=2"), ArgumentError);
    CHECK_THROWS_AS(DefenseSpec::parse("blur"), ArgumentError);
    CHECK_THROWS_AS(DefenseSpec::parse("gaussian:k=x"), ArgumentError);
    const ImageBatch x = batch_of(Tensor(Shape{1, 3, 8, 8}, 0.25));
    CHECK(apply_defense(x, DefenseSpec{}).pixels == x.pixels);
  }

  TEST_CASE("zero perturbation ASR equals the clean target rate") {
    const auto& f = eval_fixture();
    const std::vector<std::string> targets{"red circle", "green square", "green cross"};
    const Checkpoint ck = zero_checkpoint(targets);
    std::vector<std::shared_ptr<const VictimModel>> victims{
        std::make_shared<ClassifierVictim>("small_cnn", f.surrogate),
        std::make_shared<ClassifierVictim>("wide_cnn", f.other)};
    EvalOptions opts;
    opts.batch_size = 10;
    const auto rep = evaluate(ck, victims, f.eval_set, ck.targets, {DefenseSpec{}}, opts);
    REQUIRE(rep.rows.size() == 6);
    CHECK(rep.failures.empty());
    for (const auto& row : rep.rows) {
      const auto& model = row.victim == "small_cnn" ? *f.surrogate : *f.other;
      const auto t = ck.targets.indices[static_cast<std::size_t>(ck.targets.find(row.target_class))];
      CHECK(row.n == f.eval_set.size());
      CHECK(row.asr == doctest::Approx(clean_target_rate(model, f.eval_set, t)));
      CHECK(row.white_box == (row.victim == "small_cnn"));
      CHECK(row.surrogate == "small_cnn");
    }
  }

  TEST_CASE("report shape, means and reproducibility") {
    const auto& f = eval_fixture();
    const std::vector<std::string> targets{"red square", "green cross"};
    const Checkpoint ck = signal_checkpoint(targets);
    std::vector<std::shared_ptr<const VictimModel>> victims{
        std::make_shared<ClassifierVictim>("small_cnn", f.surrogate),
        std::make_shared<ClassifierVictim>("wide_cnn", f.other)};
    const std::vector<DefenseSpec> defenses{DefenseSpec{}, DefenseSpec::parse("median:k=3"),
                                            DefenseSpec::parse("jpeg:q=75")};
    EvalOptions opts;
    opts.batch_size = 16;
    const auto rep = evaluate(ck, victims, f.eval_set, ck.targets, defenses, opts);
    CHECK(rep.rows.size() == victims.size() * targets.size() * defenses.size());
    for (const auto& r : rep.rows) {
      CHECK(r.successes <= r.n);
      CHECK(r.asr == doctest::Approx(static_cast<double>(r.successes) / static_cast<double>(r.n)));
    }
    const auto means = rep.means();
    CHECK(means.size() == victims.size() * defenses.size());
    for (const auto& m : means) {
      double sum = 0;
      int k = 0;
      for (const auto& r : rep.rows)
        if (r.victim == m.victim && r.defense == m.defense && r.params == m.params) sum += r.asr, ++k;
      CHECK(k == 2);
      CHECK(m.targets == 2);
      CHECK(m.mean_asr == doctest::Approx(sum / k).epsilon(1e-12));
    }
    const auto again = evaluate(ck, victims, f.eval_set, ck.targets, defenses, opts);
    REQUIRE(again.rows.size() == rep.rows.size());
    for (std::size_t i = 0; i < rep.rows.size(); ++i) CHECK(again.rows[i].successes == rep.rows[i].successes);
    CHECK(again.config_digest == rep.config_digest);
    opts.batch_size = 7;
    const auto rebatched = evaluate(ck, victims, f.eval_set, ck.targets, defenses, opts);
    for (std::size_t i = 0; i < rep.rows.size(); ++i) CHECK(rebatched.rows[i].successes == rep.rows[i].successes);
  }

  TEST_CASE("a failing victim yields a partial report") {
    const auto& f = eval_fixture();
    const Checkpoint ck = zero_checkpoint({"red circle"});
    std::vector<std::shared_ptr<const VictimModel>> victims{
        std::make_shared<BrokenVictim>(f.eval_set.class_names()),
        std::make_shared<ConstantVictim>("other-labels", std::vector<std::string>{"x", "y"}, 0),
        std::make_shared<ClassifierVictim>("wide_cnn", f.other)};
    const auto rep = evaluate(ck, victims, f.eval_set, ck.targets, {DefenseSpec{}});
    REQUIRE(rep.failures.size() == 2);
    std::map<std::string, std::string> by_victim;
    for (const auto& fl : rep.failures) by_victim[fl.victim] = fl.message;
    CHECK(by_victim["broken"].find("weights went missing") != std::string::npos);
    CHECK(by_victim["other-labels"].find("red circle") != std::string::npos);
    REQUIRE(rep.rows.size() == 1);
    CHECK(rep.rows[0].victim == "wide_cnn");
    CHECK(rep.table().find("FAILED broken") != std::string::npos);
  }

  TEST_CASE("evaluate argument errors") {
    const auto& f = eval_fixture();
    const Checkpoint ck = zero_checkpoint({"red circle"});
    std::vector<std::shared_ptr<const VictimModel>> victims{std::make_shared<ClassifierVictim>("v", f.other)};
    CHECK_THROWS_AS(evaluate(ck, {}, f.eval_set, ck.targets, {DefenseSpec{}}), ArgumentError);
    CHECK_THROWS_AS(evaluate(ck, victims, f.eval_set, ck.targets, {}), ArgumentError);
    EvalOptions neg;
    neg.epsilon = -1.0;
    CHECK_THROWS_AS(evaluate(ck, victims, f.eval_set, ck.targets, {DefenseSpec{}}, neg), ArgumentError);
  }

  TEST_CASE("report serialization") {
    AttackReport rep;
    rep.rows.push_back({"small_cnn", "small_cnn", "red circle", "none", "", 10, 9, 0.9, true});
    rep.rows.push_back({"small_cnn", "wide_cnn", "red circle", "jpeg", "q=75", 10, 3, 0.3, false});
    rep.rows.push_back({"small_cnn", "wide,cnn", "say \"hi\"", "median", "k=3", 4, 1, 0.25, false});
    rep.failures.push_back({"broken", "boom"});
    rep.config_digest = "0123456789abcdef";
    rep.timestamp = "2026-01-01T00:00:00Z";
    const auto back = AttackReport::from_json(nlohmann::json::parse(rep.to_json().dump()));
    REQUIRE(back.rows.size() == 3);
    CHECK(back.rows[1].params == "q=75");
    CHECK(back.rows[0].white_box);
    CHECK(back.rows[2].asr == 0.25);
    CHECK(back.failures.size() == 1);
    CHECK(back.to_json() == rep.to_json());
    CHECK_THROWS_AS(AttackReport::from_json(nlohmann::json::object()), LoadError);

    const auto lines = split_lines(rep.to_csv());
    REQUIRE(lines.size() == 4);
    CHECK(lines[0] == "surrogate,victim,target_class,defense,params,n,successes,asr,white_box");
    CHECK(lines[1] == "small_cnn,small_cnn,red circle,none,,10,9,0.900000,1");
    CHECK(lines[3] == "small_cnn,\"wide,cnn\",\"say \"\"hi\"\"\",median,k=3,4,1,0.250000,0");
    CHECK(rep.table().find("white-box") != std::string::npos);
  }

  TEST_CASE("visualization grid") {
    const double eps = 16.0 / 255.0;
    ImageBatch x = batch_of(Tensor(Shape{2, 3, 4, 5}, 0.5));
    PerturbationBatch p;
    p.epsilon = eps;
    p.delta = Tensor(Shape{2, 3, 4, 5});
    auto img = visualization_grid(p, x);
    CHECK(img.width == 10);
    CHECK(img.height == 8);
    CHECK(img.channels == 3);
    for (int row = 0; row < 8; ++row)
      for (int col = 0; col < 5; ++col) CHECK(img.pixels[static_cast<std::size_t>((row * 10 + col) * 3)] == 128);
    p.delta.fill(eps);
    img = visualization_grid(p, x);
    CHECK(img.pixels[0] == 255);
    // right half is the adversarial image: 0.5 + 16/255 -> 128 + 16
    CHECK(img.pixels[static_cast<std::size_t>(5 * 3)] == 144);
    p.delta.fill(-eps);
    CHECK(visualization_grid(p, x).pixels[0] == 0);

    const auto dir = fs::temp_directory_path() / "cgnc_unit";
    fs::create_directories(dir);
    visualize(p, x, dir / "grid.png");
    const Image8 read = read_image(dir / "grid.png");
    CHECK(read.width == 10);
    CHECK(read.height == 8);
    CHECK_THROWS_AS(visualize(p, x, dir / "no" / "such" / "dir" / "grid.png"), IoError);
    PerturbationBatch wrong = p;
    wrong.delta = Tensor(Shape{1, 3, 4, 5});
    CHECK_THROWS_AS(visualization_grid(wrong, x), ShapeError);
  }

  TEST_CASE("variant configs") {
    GeneratorConfig base;
    auto c = variant_config(VariantKind::no_fusion, base);
    CHECK_FALSE(c.use_fusion);
    CHECK_FALSE(c.use_purifier);
    CHECK(variant_config(VariantKind::no_cross_attention, base).cross_attention_count == 0);
    CHECK(variant_config(VariantKind::one_hot_condition, base).condition == ConditionSource::one_hot);
  }

  TEST_CASE("timestamp format") {
    const auto ts = utc_timestamp();
    CHECK(ts.size() == 20);
    CHECK(ts[4] == '-');
    CHECK(ts[10] == 'T');
    CHECK(ts.back() == 'Z');
  }
}
