#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>

#include "cgnc/archive.hpp"
#include "cgnc/config.hpp"
#include "cgnc/error.hpp"
#include "cgnc/evaluation.hpp"
#include "cgnc/image_io.hpp"
#include "cgnc/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cgnc;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

void log(const std::string& msg) { std::cerr << "[cgnc] " << msg << "\n"; }

bool deterministic_mode() {
  const char* v = std::getenv("CGNC_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

std::string slug(std::string s) {
  for (auto& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c))) c = '_';
  }
  return s;
}

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output_dir;
};

void add_common(CLI::App* cmd, Overrides& o, bool config_required = true) {
  auto* opt = cmd->add_option("-c,--config", o.config, "run configuration (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--seed", o.seed, "root seed (overrides the config)");
  cmd->add_option("--output-dir", o.output_dir, "output directory (overrides the config)");
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
}

// Applies command-line overrides to the raw document, then validates it.
RunConfig resolve_config(const Overrides& o, const std::function<void(json&)>& extra = {}) {
  json j = read_json_file(o.config);
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (o.seed) j["seed"] = *o.seed;
  if (!o.output_dir.empty()) j["output_dir"] = o.output_dir;
  if (extra) extra(j);
  return parse_run_config(j);
}

void write_snapshot(const RunConfig& cfg, const std::string& name) {
  fs::create_directories(cfg.output_dir);
  json snap = cfg.to_json();
  snap["deterministic"] = deterministic_mode();
  write_file_atomic(cfg.output_dir / name, snap.dump(2) + "\n");
}

class MetricsLog {
 public:
  explicit MetricsLog(const fs::path& path) : path_(path), out_(path, std::ios::trunc) {
    if (!out_) throw IoError("cannot open metrics log " + path.string());
  }
  void write(const StepMetrics& m) {
    out_ << json{{"step", m.step},
                 {"epoch", m.epoch},
                 {"loss", m.loss},
                 {"hit_rate", m.hit_rate},
                 {"max_abs_delta", m.max_abs_delta},
                 {"timestamp", utc_timestamp()}}
                .dump()
         << "\n";
    out_.flush();
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

fs::path default_checkpoint(const RunConfig& cfg) { return cfg.output_dir / "generator.ckpt"; }

TrainHooks progress_hooks(MetricsLog& metrics, const fs::path& ckpt_path, std::int64_t every) {
  TrainHooks h;
  h.on_step = [&metrics, every](const StepMetrics& m) {
    metrics.write(m);
    if (m.step % every == 0) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "step %ld epoch %ld loss %.4f hit %.3f max|delta| %.5f", static_cast<long>(m.step),
                    static_cast<long>(m.epoch), m.loss, m.hit_rate, m.max_abs_delta);
      log(buf);
    }
  };
  h.on_epoch = [ckpt_path](const Checkpoint& c, std::int64_t epoch) {
    save_checkpoint(c, ckpt_path);
    log("epoch " + std::to_string(epoch) + " done, checkpoint written to " + ckpt_path.string());
  };
  return h;
}

int cmd_train(const Overrides& o, std::int64_t epochs, std::int64_t max_steps) {
  const RunConfig cfg = resolve_config(o, [&](json& j) {
    if (epochs > 0) j["train"]["epochs"] = epochs;
    if (max_steps > 0) j["train"]["max_steps"] = max_steps;
  });
  write_snapshot(cfg, "resolved_config.json");
  const Dataset data = load_split(cfg, Split::train);
  log("training set: " + std::to_string(data.size()) + " images from " + data.domain_tag());
  const Classifier surrogate = obtain_classifier(cfg, cfg.surrogate, data, log);
  MetricsLog metrics(cfg.output_dir / "metrics.jsonl");
  const auto path = default_checkpoint(cfg);
  const Checkpoint ckpt =
      train(data, surrogate, cfg.surrogate.name, cfg.train, cfg.generator, cfg.conditioning, progress_hooks(metrics, path, 50));
  save_checkpoint(ckpt, path);
  std::cout << "checkpoint " << path.string() << "\n"
            << "steps " << ckpt.steps << "\n"
            << "hash " << checkpoint_hash(ckpt) << "\n";
  return 0;
}

int cmd_finetune(const Overrides& o, const std::string& cls, std::optional<double> ratio, std::optional<std::int64_t> epochs,
                 std::optional<std::int64_t> patch, std::optional<std::int64_t> max_steps, const std::string& base,
                 const std::string& out) {
  const RunConfig cfg = resolve_config(o, [&](json& j) {
    if (ratio) j["finetune"]["mask_ratio"] = *ratio;
    if (epochs) j["finetune"]["epochs"] = *epochs;
    if (patch) j["finetune"]["patch_size"] = *patch;
    if (max_steps) j["finetune"]["max_steps"] = *max_steps;
    if (!cls.empty()) j["finetune"]["target_class"] = cls;
  });
  if (cfg.finetune.target_class.empty()) throw ArgumentError("finetune needs --class (or finetune.target_class)");
  const fs::path base_path =
      !base.empty() ? fs::path(base)
                    : (cfg.finetune.base_checkpoint.empty() ? default_checkpoint(cfg) : cfg.finetune.base_checkpoint);
  const Checkpoint ck = load_checkpoint(base_path);
  const std::string& target = cfg.finetune.target_class;
  const Dataset data = load_split(cfg, Split::train);
  const auto& labels = data.class_names();
  const bool resolvable = ck.generator.config.condition == ConditionSource::text &&
                          std::find(labels.begin(), labels.end(), target) != labels.end();
  if (ck.targets.find(target) < 0 && !resolvable) {
    std::string avail;
    for (const auto& n : ck.targets.names) avail += (avail.empty() ? "" : ", ") + n;
    throw ArgumentError("unknown class \"" + target + "\" (available: " + avail + ")");
  }
  const Classifier surrogate = obtain_classifier(cfg, cfg.surrogate, data, log);
  write_snapshot(cfg, "resolved_config.finetune-" + slug(target) + ".json");
  const fs::path out_path = !out.empty() ? fs::path(out) : cfg.output_dir / ("generator.ft-" + slug(target) + ".ckpt");
  MetricsLog metrics(cfg.output_dir / ("metrics.finetune-" + slug(target) + ".jsonl"));
  const Checkpoint ft = masked_finetune(ck, target, cfg.finetune.config, data, surrogate, progress_hooks(metrics, out_path, 50));
  save_checkpoint(ft, out_path);
  std::cout << "checkpoint " << out_path.string() << "\n"
            << "class " << ft.finetune->target_class << "\n"
            << "mask_ratio " << ft.finetune->mask_ratio << (ft.finetune->mask_ratio == 0.0 ? " (plain fine-tuning)" : "")
            << "\n"
            << "patch_size " << ft.finetune->patch_size << "\n"
            << "epochs " << ft.finetune->epochs << "\n"
            << "steps " << ft.finetune->steps << "\n";
  return 0;
}

// Replicates edge pixels so both sides are multiples of `m`.
Tensor pad_to_multiple(const Tensor& chw, std::int64_t m) {
  const auto C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
  const auto Hp = (H + m - 1) / m * m, Wp = (W + m - 1) / m * m;
  if (Hp == H && Wp == W) return chw;
  Tensor out(Shape{C, Hp, Wp});
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < Hp; ++i)
      for (std::int64_t j = 0; j < Wp; ++j)
        out[static_cast<std::size_t>((c * Hp + i) * Wp + j)] =
            chw[static_cast<std::size_t>((c * H + std::min(i, H - 1)) * W + std::min(j, W - 1))];
  return out;
}

Tensor crop(const Tensor& chw, std::int64_t H, std::int64_t W) {
  const auto C = chw.dim(0), Hp = chw.dim(1), Wp = chw.dim(2);
  if (Hp == H && Wp == W) return chw;
  Tensor out(Shape{C, H, W});
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j)
        out[static_cast<std::size_t>((c * H + i) * W + j)] = chw[static_cast<std::size_t>((c * Hp + i) * Wp + j)];
  return out;
}

int cmd_attack(const std::string& ckpt_path, const std::vector<std::string>& images, const std::string& target,
               std::optional<double> epsilon, const std::string& out_dir) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const double eps = epsilon.value_or(ck.generator.config.epsilon);
  if (!(eps >= 0.0 && eps <= 1.0)) throw ArgumentError("--epsilon must be in [0,1]");
  const std::string cls = target.empty() && ck.finetune ? ck.finetune->target_class : target;
  if (cls.empty()) throw ArgumentError("attack needs --target");
  if (ck.targets.find(cls) < 0 && ck.generator.config.condition == ConditionSource::one_hot) {
    std::string avail;
    for (const auto& n : ck.targets.names) avail += (avail.empty() ? "" : ", ") + n;
    throw ArgumentError("unknown target \"" + cls + "\" (available: " + avail + ")");
  }
  const TextCondition cond = ck.conditioner().condition(cls);
  fs::create_directories(out_dir);
  for (const auto& file : images) {
    const Image8 img = read_image(file);
    if (img.channels != ck.generator.config.image_channels) {
      throw LoadError(file + ": image has " + std::to_string(img.channels) + " channels, generator expects " +
                      std::to_string(ck.generator.config.image_channels));
    }
    const Tensor chw = image_to_tensor(img);
    const Tensor padded = pad_to_multiple(chw, GeneratorConfig::downsample_factor);
    ImageBatch x;
    x.pixels = padded.reshaped(Shape{1, padded.dim(0), padded.dim(1), padded.dim(2)});
    x.ids = {file};
    PerturbationBatch p = generate(x, cond, eps, ck.generator);
    const ImageBatch adv = make_adversarial(x, p);
    const auto H = chw.dim(1), W = chw.dim(2);
    const Tensor adv_chw = crop(adv.pixels.reshaped(padded.shape()), H, W);
    Tensor delta_chw = crop(p.delta.reshaped(padded.shape()), H, W);
    const double max_delta = delta_chw.max_abs();
    Tensor vis = delta_chw;
    for (auto& v : vis.storage()) v = eps > 0.0 ? (v / eps + 1.0) / 2.0 : 0.5;
    const std::string stem = fs::path(file).stem().string();
    const fs::path adv_path = fs::path(out_dir) / (stem + ".adv.png");
    const fs::path delta_path = fs::path(out_dir) / (stem + ".delta.png");
    write_png(adv_path, tensor_to_image(adv_chw));
    write_png(delta_path, tensor_to_image(vis));
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.8f", max_delta);
    std::cout << file << " -> " << adv_path.string() << " max|delta| " << buf << " (epsilon " << eps << ")\n";
  }
  std::cout << "target \"" << cls << "\"; generator forward only, no classifier was queried\n";
  return 0;
}

int cmd_evaluate(const Overrides& o, const std::string& ckpt_arg, const std::vector<std::string>& defenses) {
  const RunConfig cfg = resolve_config(o, [&](json& j) {
    if (!defenses.empty()) j["eval"]["defenses"] = defenses;
  });
  if (cfg.eval.victims.empty()) throw ConfigError("eval.victims is empty; configure at least one victim");
  const fs::path ckpt_path = ckpt_arg.empty() ? default_checkpoint(cfg) : fs::path(ckpt_arg);
  const Checkpoint ck = load_checkpoint(ckpt_path);
  write_snapshot(cfg, "resolved_config.evaluate.json");
  const Dataset train_data = load_split(cfg, Split::train);
  const Dataset eval_data = load_split(cfg, Split::eval);
  std::vector<std::shared_ptr<const VictimModel>> victims;
  for (const auto& spec : cfg.eval.victims) {
    try {
      auto model = std::make_shared<const Classifier>(obtain_classifier(cfg, spec, train_data, log));
      victims.push_back(std::make_shared<ClassifierVictim>(spec.name, model));
    } catch (const std::exception& e) {
      throw Error("cannot construct victim " + spec.name + ": " + e.what());
    }
  }
  std::vector<std::string> names = cfg.eval.targets;
  if (names.empty()) names = ck.finetune ? std::vector<std::string>{ck.finetune->target_class} : ck.targets.names;
  TargetClassSet targets;
  targets.names = names;
  for (const auto& n : names) targets.indices.push_back(std::max<std::int64_t>(ck.targets.find(n), 0));
  EvalOptions eo;
  eo.epsilon = cfg.eval.epsilon;
  eo.batch_size = cfg.eval.batch_size;
  eo.log = log;
  const AttackReport rep = evaluate(ck, victims, eval_data, targets, cfg.eval.defenses, eo);
  fs::create_directories(cfg.output_dir);
  write_file_atomic(cfg.output_dir / "report.json", rep.to_json().dump(2) + "\n");
  write_file_atomic(cfg.output_dir / "report.csv", rep.to_csv());
  std::cout << rep.table();
  std::cout << "report " << (cfg.output_dir / "report.json").string() << "\n";
  return rep.failures.empty() ? 0 : kExitRuntime;
}

int cmd_report(const std::string& path, const std::string& csv) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw LoadError(path + " is not valid JSON: " + e.what());
  }
  const AttackReport rep = AttackReport::from_json(j);
  std::cout << "config digest " << rep.config_digest << ", generated " << rep.timestamp << "\n" << rep.table();
  if (!csv.empty()) write_file_atomic(csv, rep.to_csv());
  return 0;
}

int cmd_visualize(const Overrides& o, const std::string& ckpt_arg, const std::string& target, std::int64_t count,
                  const std::string& out) {
  const RunConfig cfg = resolve_config(o);
  if (count < 1) throw ArgumentError("--count must be >= 1");
  const fs::path ckpt_path = ckpt_arg.empty() ? default_checkpoint(cfg) : fs::path(ckpt_arg);
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const std::string cls = target.empty() ? (ck.finetune ? ck.finetune->target_class : ck.targets.names.front()) : target;
  const Dataset data = load_split(cfg, Split::eval);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(std::min(count, data.size())));
  std::iota(idx.begin(), idx.end(), 0);
  const ImageBatch x = data.batch(idx);
  const PerturbationBatch p = generate(x, ck.conditioner().condition(cls), cfg.eval.epsilon, ck.generator);
  const fs::path path = out.empty() ? cfg.output_dir / ("visualize-" + slug(cls) + ".png") : fs::path(out);
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  visualize(p, x, path);
  std::cout << path.string() << " (" << x.batch() << " rows x 2 panels, target \"" << cls << "\")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (deterministic_mode()) Eigen::setNbThreads(1);

  CLI::App app{"Conditional generative targeted attacks on image classifiers"};
  app.require_subcommand(1);

  Overrides train_o;
  std::int64_t train_epochs = 0, train_max_steps = 0;
  auto* train_cmd = app.add_subcommand("train", "train a multi-target conditional generator");
  add_common(train_cmd, train_o);
  train_cmd->add_option("--epochs", train_epochs, "override train.epochs");
  train_cmd->add_option("--max-steps", train_max_steps, "override train.max_steps");

  Overrides ft_o;
  std::string ft_class, ft_base, ft_out;
  std::optional<double> ft_ratio;
  std::optional<std::int64_t> ft_epochs, ft_patch, ft_steps;
  auto* ft_cmd = app.add_subcommand("finetune", "masked fine-tuning on one target class");
  add_common(ft_cmd, ft_o);
  ft_cmd->add_option("--class", ft_class, "target class name");
  ft_cmd->add_option("--mask-ratio", ft_ratio, "fraction of patches zeroed per image (0 = plain fine-tuning)");
  ft_cmd->add_option("--epochs", ft_epochs, "fine-tuning epochs");
  ft_cmd->add_option("--patch-size", ft_patch, "mask patch size in pixels");
  ft_cmd->add_option("--max-steps", ft_steps, "cap on optimizer steps");
  ft_cmd->add_option("--base", ft_base, "base checkpoint (default <output_dir>/generator.ckpt)");
  ft_cmd->add_option("-o,--out", ft_out, "output checkpoint path");

  std::string at_ckpt, at_target, at_out = ".";
  std::vector<std::string> at_images;
  std::optional<double> at_eps;
  auto* at_cmd = app.add_subcommand("attack", "write adversarial and perturbation PNGs for input images");
  at_cmd->add_option("--checkpoint", at_ckpt, "generator checkpoint")->required();
  at_cmd->add_option("--target", at_target, "target class name");
  at_cmd->add_option("--epsilon", at_eps, "l_inf budget (default: the checkpoint's)");
  at_cmd->add_option("-o,--out", at_out, "output directory");
  at_cmd->add_option("images", at_images, "input PNG/JPEG files")->required();

  Overrides ev_o;
  std::string ev_ckpt;
  std::vector<std::string> ev_defenses;
  auto* ev_cmd = app.add_subcommand("evaluate", "measure targeted attack success on the configured victims");
  add_common(ev_cmd, ev_o);
  ev_cmd->add_option("--checkpoint", ev_ckpt, "generator checkpoint (default <output_dir>/generator.ckpt)");
  ev_cmd->add_option("--defense", ev_defenses, "defense spec, repeatable (e.g. none, median:k=3, jpeg:q=70)");

  std::string rp_path, rp_csv;
  auto* rp_cmd = app.add_subcommand("report", "print the mean-ASR table of a saved report");
  rp_cmd->add_option("report", rp_path, "report.json")->required();
  rp_cmd->add_option("--csv", rp_csv, "also write the flat CSV here");

  Overrides vz_o;
  std::string vz_ckpt, vz_target, vz_out;
  std::int64_t vz_count = 4;
  auto* vz_cmd = app.add_subcommand("visualize", "render perturbation | adversarial grids for evaluation images");
  add_common(vz_cmd, vz_o);
  vz_cmd->add_option("--checkpoint", vz_ckpt, "generator checkpoint (default <output_dir>/generator.ckpt)");
  vz_cmd->add_option("--target", vz_target, "target class name");
  vz_cmd->add_option("--count", vz_count, "number of images");
  vz_cmd->add_option("-o,--out", vz_out, "output PNG");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_o, train_epochs, train_max_steps);
    if (*ft_cmd) return cmd_finetune(ft_o, ft_class, ft_ratio, ft_epochs, ft_patch, ft_steps, ft_base, ft_out);
    if (*at_cmd) return cmd_attack(at_ckpt, at_images, at_target, at_eps, at_out);
    if (*ev_cmd) return cmd_evaluate(ev_o, ev_ckpt, ev_defenses);
    if (*rp_cmd) return cmd_report(rp_path, rp_csv);
    if (*vz_cmd) return cmd_visualize(vz_o, vz_ckpt, vz_target, vz_count, vz_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
