#include "cgnc/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <map>
#include <numeric>
#include <sstream>

#include "cgnc/error.hpp"
#include "cgnc/rng.hpp"

namespace cgnc {
namespace {

using nlohmann::json;

void check_kernel(std::int64_t k, const char* what) {
  if (k < 3 || k % 2 == 0) throw ArgumentError(std::string(what) + ": kernel size must be odd and >= 3, got " + std::to_string(k));
}

std::int64_t reflect(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

// Applies `reduce` to every k x k reflect-padded window of every channel.
template <class Reduce>
ImageBatch filter(const ImageBatch& x, std::int64_t k, Reduce reduce) {
  const auto B = x.batch(), C = x.channels(), H = x.height(), W = x.width(), r = k / 2;
  ImageBatch out = x;
  std::vector<double> window(static_cast<std::size_t>(k * k));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t c = 0; c < C; ++c) {
      const double* src = x.pixels.data() + (b * C + c) * H * W;
      double* dst = out.pixels.data() + (b * C + c) * H * W;
      for (std::int64_t i = 0; i < H; ++i) {
        for (std::int64_t j = 0; j < W; ++j) {
          std::size_t n = 0;
          for (std::int64_t di = -r; di <= r; ++di)
            for (std::int64_t dj = -r; dj <= r; ++dj) window[n++] = src[reflect(i + di, H) * W + reflect(j + dj, W)];
          dst[i * W + j] = std::clamp(reduce(window), 0.0, 1.0);
        }
      }
    }
  }
  return out;
}

std::string fmt_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace

ClassifierVictim::ClassifierVictim(std::string name, std::shared_ptr<const Classifier> model)
    : name_(std::move(name)), model_(std::move(model)) {
  if (!model_) throw ArgumentError("victim \"" + name_ + "\" has no model");
}

AsrResult success_from_logits(const Tensor& logits, std::int64_t target) {
  const auto B = logits.dim(0), L = logits.dim(1);
  if (target < 0 || target >= L) throw MappingError("target index " + std::to_string(target) + " outside victim label space");
  AsrResult r;
  r.n = B;
  for (std::int64_t b = 0; b < B; ++b) {
    bool tie = false;
    if (argmax_row(logits.data() + b * L, L, &tie) == target) ++r.successes;
    if (tie) ++r.ties;
  }
  r.asr = B > 0 ? static_cast<double>(r.successes) / static_cast<double>(B) : 0.0;
  return r;
}

AsrResult attack_success_rate(const ImageBatch& x_adv, const VictimModel& victim, std::int64_t target) {
  const auto L = static_cast<std::int64_t>(victim.label_names().size());
  if (target < 0 || target >= L) {
    throw MappingError("target index " + std::to_string(target) + " outside label space of victim " + victim.name());
  }
  return success_from_logits(victim.logits(x_adv.pixels), target);
}

std::int64_t resolve_victim_label(const VictimModel& victim, const std::string& class_name) {
  const auto& names = victim.label_names();
  const auto it = std::find(names.begin(), names.end(), class_name);
  if (it == names.end()) throw MappingError("class \"" + class_name + "\" not in label space of victim " + victim.name());
  return it - names.begin();
}

std::string to_string(DefenseKind k) {
  switch (k) {
    case DefenseKind::none: return "none";
    case DefenseKind::gaussian: return "gaussian";
    case DefenseKind::median: return "median";
    case DefenseKind::average: return "average";
    case DefenseKind::jpeg: return "jpeg";
  }
  return "?";
}

void DefenseSpec::validate() const {
  switch (kind) {
    case DefenseKind::gaussian:
      if (!(sigma > 0.0)) throw ArgumentError("gaussian defense: sigma must be > 0");
      [[fallthrough]];
    case DefenseKind::median:
    case DefenseKind::average: check_kernel(kernel, "defense"); break;
    case DefenseKind::jpeg:
      if (quality < 1 || quality > 100) throw ArgumentError("jpeg defense: quality must be in [1,100]");
      break;
    case DefenseKind::none: break;
  }
}

std::string DefenseSpec::label() const { return to_string(kind); }

std::string DefenseSpec::params() const {
  switch (kind) {
    case DefenseKind::gaussian: return "k=" + std::to_string(kernel) + ";sigma=" + fmt_number(sigma);
    case DefenseKind::median:
    case DefenseKind::average: return "k=" + std::to_string(kernel);
    case DefenseKind::jpeg: return "q=" + std::to_string(quality);
    case DefenseKind::none: return "";
  }
  return "";
}

DefenseSpec DefenseSpec::parse(const std::string& text) {
  DefenseSpec d;
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  if (kind == "none") d.kind = DefenseKind::none;
  else if (kind == "gaussian") d.kind = DefenseKind::gaussian;
  else if (kind == "median") d.kind = DefenseKind::median;
  else if (kind == "average") d.kind = DefenseKind::average;
  else if (kind == "jpeg") d.kind = DefenseKind::jpeg;
  else throw ArgumentError("unknown defense \"" + kind + "\" (expected none, gaussian, median, average, jpeg)");
  if (kind == "jpeg" && colon == std::string::npos) throw ArgumentError("jpeg defense needs a quality, e.g. jpeg:q=75");
  if (colon != std::string::npos) {
    std::stringstream ss(text.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ArgumentError("defense parameter \"" + item + "\" must be key=value");
      const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
      try {
        if (key == "k" && d.kind != DefenseKind::jpeg && d.kind != DefenseKind::none) d.kernel = std::stoll(value);
        else if (key == "sigma" && d.kind == DefenseKind::gaussian) d.sigma = std::stod(value);
        else if (key == "q" && d.kind == DefenseKind::jpeg) d.quality = std::stoi(value);
        else throw ArgumentError("defense " + kind + " does not take parameter \"" + key + "\"");
      } catch (const std::logic_error&) {
        throw ArgumentError("bad value for defense parameter \"" + item + "\"");
      }
    }
  }
  d.validate();
  return d;
}

std::vector<double> gaussian_kernel(std::int64_t k, double sigma) {
  check_kernel(k, "gaussian_kernel");
  if (!(sigma > 0.0)) throw ArgumentError("gaussian_kernel: sigma must be > 0");
  std::vector<double> w(static_cast<std::size_t>(k * k));
  const auto r = k / 2;
  for (std::int64_t i = -r; i <= r; ++i)
    for (std::int64_t j = -r; j <= r; ++j)
      w[static_cast<std::size_t>((i + r) * k + j + r)] = std::exp(-static_cast<double>(i * i + j * j) / (2 * sigma * sigma));
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= s;
  return w;
}

ImageBatch gaussian_smooth(const ImageBatch& x, std::int64_t k, double sigma) {
  const auto w = gaussian_kernel(k, sigma);
  return filter(x, k, [&](const std::vector<double>& win) { return std::inner_product(win.begin(), win.end(), w.begin(), 0.0); });
}

ImageBatch median_smooth(const ImageBatch& x, std::int64_t k) {
  check_kernel(k, "median_smooth");
  return filter(x, k, [](std::vector<double>& win) {
    auto mid = win.begin() + static_cast<std::ptrdiff_t>(win.size() / 2);
    std::nth_element(win.begin(), mid, win.end());
    return *mid;
  });
}

ImageBatch average_smooth(const ImageBatch& x, std::int64_t k) {
  check_kernel(k, "average_smooth");
  return filter(x, k, [](const std::vector<double>& win) {
    return std::accumulate(win.begin(), win.end(), 0.0) / static_cast<double>(win.size());
  });
}

ImageBatch jpeg_roundtrip(const ImageBatch& x, int quality) {
  if (quality < 1 || quality > 100) throw ArgumentError("jpeg_roundtrip: quality must be in [1,100]");
  ImageBatch out = x;
  const auto per = x.channels() * x.height() * x.width();
  for (std::int64_t b = 0; b < x.batch(); ++b) {
    Tensor chw(Shape{x.channels(), x.height(), x.width()});
    std::copy_n(x.pixels.data() + b * per, per, chw.data());
    Image8 decoded;
    try {
      decoded = decode_jpeg(encode_jpeg(tensor_to_image(chw), quality));
    } catch (const LoadError& e) {
      throw DefenseError(e.what());
    }
    if (decoded.width != x.width() || decoded.height != x.height() || decoded.channels != x.channels()) {
      throw DefenseError("JPEG round-trip changed the image geometry");
    }
    const Tensor back = image_to_tensor(decoded);
    std::copy_n(back.data(), per, out.pixels.data() + b * per);
  }
  return out;
}

ImageBatch apply_defense(const ImageBatch& x, const DefenseSpec& d) {
  d.validate();
  switch (d.kind) {
    case DefenseKind::none: return x;
    case DefenseKind::gaussian: return gaussian_smooth(x, d.kernel, d.sigma);
    case DefenseKind::median: return median_smooth(x, d.kernel);
    case DefenseKind::average: return average_smooth(x, d.kernel);
    case DefenseKind::jpeg: return jpeg_roundtrip(x, d.quality);
  }
  return x;
}

std::vector<VictimMean> AttackReport::means() const {
  std::vector<VictimMean> out;
  std::map<std::tuple<std::string, std::string, std::string>, std::size_t> at;
  for (const auto& r : rows) {
    const auto key = std::make_tuple(r.victim, r.defense, r.params);
    auto it = at.find(key);
    if (it == at.end()) {
      it = at.emplace(key, out.size()).first;
      out.push_back({r.victim, r.defense, r.params, 0.0, 0, r.white_box});
    }
    auto& m = out[it->second];
    m.mean_asr += r.asr;
    ++m.targets;
  }
  for (auto& m : out) m.mean_asr /= static_cast<double>(m.targets);
  return out;
}

json AttackReport::to_json() const {
  json rs = json::array();
  for (const auto& r : rows) {
    rs.push_back({{"surrogate", r.surrogate}, {"victim", r.victim}, {"target_class", r.target_class},
                  {"defense", r.defense},     {"params", r.params}, {"n", r.n},
                  {"successes", r.successes}, {"asr", r.asr},       {"white_box", r.white_box}});
  }
  json ms = json::array();
  for (const auto& m : means()) {
    ms.push_back({{"victim", m.victim}, {"defense", m.defense}, {"params", m.params},
                  {"mean_asr", m.mean_asr}, {"targets", m.targets}, {"white_box", m.white_box}});
  }
  json fs = json::array();
  for (const auto& f : failures) fs.push_back({{"victim", f.victim}, {"message", f.message}});
  return {{"rows", rs}, {"means", ms}, {"failures", fs}, {"config_digest", config_digest}, {"timestamp", timestamp}};
}

AttackReport AttackReport::from_json(const json& j) {
  AttackReport rep;
  try {
    for (const auto& r : j.at("rows")) {
      rep.rows.push_back({r.at("surrogate").get<std::string>(), r.at("victim").get<std::string>(),
                          r.at("target_class").get<std::string>(), r.at("defense").get<std::string>(),
                          r.at("params").get<std::string>(), r.at("n").get<std::int64_t>(),
                          r.at("successes").get<std::int64_t>(), r.at("asr").get<double>(),
                          r.at("white_box").get<bool>()});
    }
    for (const auto& f : j.at("failures")) {
      rep.failures.push_back({f.at("victim").get<std::string>(), f.at("message").get<std::string>()});
    }
    rep.config_digest = j.at("config_digest").get<std::string>();
    rep.timestamp = j.at("timestamp").get<std::string>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("malformed attack report: ") + e.what());
  }
  return rep;
}

std::string AttackReport::to_csv() const {
  std::string out = "surrogate,victim,target_class,defense,params,n,successes,asr,white_box\n";
  for (const auto& r : rows) {
    char asr[32];
    std::snprintf(asr, sizeof(asr), "%.6f", r.asr);
    out += csv_field(r.surrogate) + "," + csv_field(r.victim) + "," + csv_field(r.target_class) + "," +
           csv_field(r.defense) + "," + csv_field(r.params) + "," + std::to_string(r.n) + "," +
           std::to_string(r.successes) + "," + asr + "," + (r.white_box ? "1" : "0") + "\n";
  }
  return out;
}

std::string AttackReport::table() const {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-20s %-10s %-16s %8s %7s\n", "victim", "defense", "params", "mean_asr", "targets");
  out += line;
  for (const auto& m : means()) {
    const std::string v = m.victim + (m.white_box ? " *" : "");
    std::snprintf(line, sizeof(line), "%-20s %-10s %-16s %8.4f %7ld\n", v.c_str(), m.defense.c_str(),
                  m.params.c_str(), m.mean_asr, static_cast<long>(m.targets));
    out += line;
  }
  if (std::any_of(rows.begin(), rows.end(), [](const ReportRow& r) { return r.white_box; })) {
    out += "* white-box (victim is the surrogate)\n";
  }
  for (const auto& f : failures) out += "FAILED " + f.victim + ": " + f.message + "\n";
  return out;
}

AttackReport evaluate(const Checkpoint& ckpt, const std::vector<std::shared_ptr<const VictimModel>>& victims,
                      const Dataset& eval_set, const TargetClassSet& targets, const std::vector<DefenseSpec>& defenses,
                      const EvalOptions& opts) {
  if (victims.empty()) throw ArgumentError("evaluate: no victims given");
  if (defenses.empty()) throw ArgumentError("evaluate: no defenses given (use \"none\" for the undefended row)");
  if (targets.size() < 1) throw ArgumentError("evaluate: no target classes");
  if (eval_set.size() < 1) throw ArgumentError("evaluate: empty evaluation set");
  if (!(opts.epsilon >= 0.0)) throw ArgumentError("evaluate: epsilon must be non-negative");
  if (opts.batch_size < 1) throw ArgumentError("evaluate: batch size must be >= 1");
  for (const auto& d : defenses) d.validate();
  for (const auto& v : victims) {
    if (!v) throw ArgumentError("evaluate: null victim");
  }

  AttackReport rep;
  rep.timestamp = utc_timestamp();
  std::string digest_src = checkpoint_hash(ckpt) + "|" + std::to_string(eval_set.checksum()) + "|" +
                           fmt_number(opts.epsilon) + "|" + std::to_string(opts.batch_size);
  for (const auto& v : victims) digest_src += "|v:" + v->name();
  for (const auto& t : targets.names) digest_src += "|t:" + t;
  for (const auto& d : defenses) digest_src += "|d:" + d.label() + ":" + d.params();
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(fnv1a64(digest_src)));
  rep.config_digest = hex;

  const Conditioner cond = ckpt.conditioner();
  std::vector<std::int64_t> all(static_cast<std::size_t>(eval_set.size()));
  std::iota(all.begin(), all.end(), 0);

  // counts[victim][target][defense]
  const auto V = victims.size(), T = static_cast<std::size_t>(targets.size()), D = defenses.size();
  std::vector<AsrResult> counts(V * T * D);
  std::vector<bool> failed(V, false);
  std::vector<std::int64_t> victim_label(V * T, -1);
  for (std::size_t v = 0; v < V; ++v) {
    try {
      for (std::size_t t = 0; t < T; ++t) victim_label[v * T + t] = resolve_victim_label(*victims[v], targets.names[t]);
    } catch (const std::exception& e) {
      failed[v] = true;
      rep.failures.push_back({victims[v]->name(), e.what()});
    }
  }

  for (std::size_t t = 0; t < T; ++t) {
    const TextCondition c = cond.condition(targets.names[t]);
    for (std::int64_t start = 0; start < eval_set.size(); start += opts.batch_size) {
      const auto end = std::min(start + opts.batch_size, eval_set.size());
      const ImageBatch x =
          eval_set.batch(std::span<const std::int64_t>(all.data() + start, static_cast<std::size_t>(end - start)));
      const ImageBatch x_adv = make_adversarial(x, generate(x, c, opts.epsilon, ckpt.generator));
      for (std::size_t d = 0; d < D; ++d) {
        const ImageBatch defended = apply_defense(x_adv, defenses[d]);
        for (std::size_t v = 0; v < V; ++v) {
          if (failed[v]) continue;
          try {
            const AsrResult r = attack_success_rate(defended, *victims[v], victim_label[v * T + t]);
            auto& acc = counts[(v * T + t) * D + d];
            acc.n += r.n;
            acc.successes += r.successes;
            acc.ties += r.ties;
          } catch (const std::exception& e) {
            failed[v] = true;
            rep.failures.push_back({victims[v]->name(), e.what()});
          }
        }
      }
    }
  }

  for (std::size_t v = 0; v < V; ++v) {
    if (failed[v]) continue;
    const bool white_box = victims[v]->name() == ckpt.surrogate_name;
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t d = 0; d < D; ++d) {
        const auto& r = counts[(v * T + t) * D + d];
        if (r.ties > 0 && opts.log) {
          opts.log("argmax ties broken by lowest index: victim=" + victims[v]->name() + " target=" + targets.names[t] +
                   " defense=" + defenses[d].label() + " count=" + std::to_string(r.ties));
        }
        rep.rows.push_back({ckpt.surrogate_name, victims[v]->name(), targets.names[t], defenses[d].label(),
                            defenses[d].params(), r.n, r.successes,
                            static_cast<double>(r.successes) / static_cast<double>(r.n), white_box});
      }
    }
  }
  return rep;
}

GeneratorConfig variant_config(VariantKind kind, GeneratorConfig base) {
  base.variant = kind;
  base.cross_attention_count = kind == VariantKind::no_cross_attention ? 0 : base.cross_attention_count;
  base.condition = kind == VariantKind::one_hot_condition ? ConditionSource::one_hot : ConditionSource::text;
  base.use_purifier = kind != VariantKind::no_purifier && kind != VariantKind::no_fusion;
  base.use_fusion = kind != VariantKind::no_fusion;
  return base;
}

GeneratorState build_variant(VariantKind kind, const GeneratorConfig& base) {
  return GeneratorState::init(variant_config(kind, base));
}

Image8 visualization_grid(const PerturbationBatch& p, const ImageBatch& x) {
  if (p.delta.shape() != x.pixels.shape()) {
    throw ShapeError("visualize: perturbation " + shape_str(p.delta.shape()) + " vs images " + shape_str(x.pixels.shape()));
  }
  const ImageBatch adv = make_adversarial(x, p);
  const auto B = x.batch(), C = x.channels(), H = x.height(), W = x.width();
  Image8 img;
  img.width = static_cast<int>(2 * W);
  img.height = static_cast<int>(B * H);
  img.channels = static_cast<int>(C);
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * img.channels, 0);
  auto put = [&](std::int64_t row, std::int64_t col, std::int64_t c, double v) {
    img.pixels[static_cast<std::size_t>((row * img.width + col) * C + c)] =
        static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  };
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) {
          const double d = p.delta.at(b, c, i, j);
          put(b * H + i, j, c, p.epsilon > 0.0 ? (d / p.epsilon + 1.0) / 2.0 : 0.5);
          put(b * H + i, W + j, c, adv.pixels.at(b, c, i, j));
        }
  return img;
}

void visualize(const PerturbationBatch& p, const ImageBatch& x, const std::filesystem::path& path) {
  write_png(path, visualization_grid(p, x));
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace cgnc
