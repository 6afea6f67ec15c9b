#include "cgnc/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "cgnc/archive.hpp"
#include "cgnc/error.hpp"
#include "cgnc/rng.hpp"

namespace cgnc {
namespace {

using nlohmann::json;

// Object reader that records which keys were consumed so leftovers can be
// reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  bool has(const std::string& key) {
    known_.insert(key);
    return j_.contains(key);
  }

  template <class T>
  void opt(const std::string& key, T& out) {
    if (has(key)) out = read<T>(j_.at(key), name(key));
  }

  template <class T>
  T req(const std::string& key) {
    if (!has(key)) throw ConfigError("missing required field " + name(key));
    return read<T>(j_.at(key), name(key));
  }

  Section sub(const std::string& key) {
    known_.insert(key);
    return Section(j_.contains(key) ? j_.at(key) : empty(), name(key));
  }

  const json& raw(const std::string& key) {
    known_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!known_.count(it.key())) throw ConfigError("unknown key " + name(it.key()));
    }
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  static const json& empty() {
    static const json e = json::object();
    return e;
  }

  template <class T>
  static T read(const json& v, const std::string& field) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field + " must be a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) throw ConfigError(field + " must be a non-negative integer");
      return v.get<std::uint64_t>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field + " must be an integer");
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field + " must be a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string> || std::is_same_v<T, std::filesystem::path>) {
      if (!v.is_string()) throw ConfigError(field + " must be a string");
      return T(v.get<std::string>());
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      if (!v.is_array()) throw ConfigError(field + " must be an array of strings");
      T out;
      for (const auto& e : v) {
        if (!e.is_string()) throw ConfigError(field + " must be an array of strings");
        out.push_back(e.get<std::string>());
      }
      return out;
    } else if constexpr (std::is_same_v<T, std::vector<std::int64_t>>) {
      if (!v.is_array()) throw ConfigError(field + " must be an array of integers");
      T out;
      for (const auto& e : v) {
        if (!e.is_number_integer()) throw ConfigError(field + " must be an array of integers");
        out.push_back(e.get<std::int64_t>());
      }
      return out;
    } else {
      static_assert(sizeof(T) == 0, "unsupported config field type");
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

ModelSpec parse_model(Section s, const std::string& default_name) {
  ModelSpec m;
  m.name = default_name;
  s.opt("name", m.name);
  s.opt("arch", m.arch);
  s.opt("weights", m.weights);
  if (s.has("fit_seed")) m.fit_seed = s.req<std::uint64_t>("fit_seed");
  s.opt("fit_epochs", m.fit_epochs);
  s.opt("fit_learning_rate", m.fit_learning_rate);
  s.opt("fit_batch_size", m.fit_batch_size);
  s.finish();
  return m;
}

json model_json(const ModelSpec& m) {
  json j = {{"name", m.name},
            {"arch", m.arch},
            {"weights", m.weights.string()},
            {"fit_epochs", m.fit_epochs},
            {"fit_learning_rate", m.fit_learning_rate},
            {"fit_batch_size", m.fit_batch_size}};
  if (m.fit_seed) j["fit_seed"] = *m.fit_seed;
  return j;
}

void validate_model(const ModelSpec& m, const std::string& field) {
  if (m.name.empty()) throw ConfigError(field + ".name must be nonempty");
  if (m.arch != "small_cnn" && m.arch != "wide_cnn") {
    throw ConfigError(field + ".arch must be small_cnn or wide_cnn, got \"" + m.arch + "\"");
  }
  if (m.fit_epochs < 1) throw ConfigError(field + ".fit_epochs must be >= 1");
  if (!(m.fit_learning_rate > 0.0)) throw ConfigError(field + ".fit_learning_rate must be > 0");
  if (m.fit_batch_size < 1) throw ConfigError(field + ".fit_batch_size must be >= 1");
}

// Re-throws a module validation error with the owning config section prefixed.
template <class F>
void in_section(const std::string& section, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  RunConfig cfg;
  Section root(j, "");
  root.opt("seed", cfg.seed);
  root.opt("output_dir", cfg.output_dir);

  {
    Section s = root.sub("data");
    std::string kind = to_string(cfg.data.kind);
    s.opt("kind", kind);
    if (kind == "directory") cfg.data.kind = DatasetKind::directory;
    else if (kind == "synthetic-shapes") cfg.data.kind = DatasetKind::synthetic_shapes;
    else throw ConfigError("data.kind must be \"directory\" or \"synthetic-shapes\", got \"" + kind + "\"");
    s.opt("root", cfg.data.root);
    s.opt("eval_root", cfg.data.eval_root);
    s.opt("num_classes", cfg.data.num_classes);
    s.opt("samples_per_class", cfg.data.samples_per_class);
    s.opt("eval_samples_per_class", cfg.data.eval_samples_per_class);
    s.opt("image_size", cfg.data.image_size);
    s.opt("channels", cfg.data.channels);
    s.finish();
  }

  cfg.surrogate = parse_model(root.sub("surrogate"), "small_cnn");

  {
    Section s = root.sub("conditioning");
    s.opt("prompt_template", cfg.conditioning.prompt_template);
    s.opt("text_encoder", cfg.conditioning.text_encoder);
    s.opt("encoder_seed", cfg.conditioning.encoder_seed);
    s.opt("attention_tokens", cfg.generator.attention_tokens);
    s.finish();
  }

  {
    Section s = root.sub("generator");
    cfg.generator.base_width = 32;
    cfg.generator.residual_blocks = 2;
    s.opt("base_width", cfg.generator.base_width);
    s.opt("residual_blocks", cfg.generator.residual_blocks);
    s.opt("cross_attention_count", cfg.generator.cross_attention_count);
    s.opt("attention_dim", cfg.generator.attention_dim);
    s.opt("purifier_widths", cfg.generator.purifier.widths);
    s.opt("purifier_slope", cfg.generator.purifier.slope);
    if (s.has("variant")) {
      const auto v = s.req<std::string>("variant");
      try {
        cfg.generator.variant = parse_variant(v);
      } catch (const ArgumentError& e) {
        throw ConfigError(s.name("variant") + ": " + e.what());
      }
    }
    s.finish();
  }

  {
    Section s = root.sub("train");
    cfg.train.epochs = s.req<std::int64_t>("epochs");
    s.opt("learning_rate", cfg.train.learning_rate);
    s.opt("batch_size", cfg.train.batch_size);
    s.opt("epsilon", cfg.train.epsilon);
    s.opt("target_classes", cfg.train.target_classes);
    s.opt("beta1", cfg.train.beta1);
    s.opt("beta2", cfg.train.beta2);
    s.opt("use_augmented_branch", cfg.train.use_augmented_branch);
    s.opt("max_steps", cfg.train.max_steps);
    s.finish();
  }

  {
    Section s = root.sub("finetune");
    s.opt("epochs", cfg.finetune.config.epochs);
    s.opt("mask_ratio", cfg.finetune.config.mask_ratio);
    s.opt("patch_size", cfg.finetune.config.patch_size);
    s.opt("learning_rate", cfg.finetune.config.learning_rate);
    s.opt("batch_size", cfg.finetune.config.batch_size);
    s.opt("max_steps", cfg.finetune.config.max_steps);
    s.opt("base_checkpoint", cfg.finetune.base_checkpoint);
    s.opt("target_class", cfg.finetune.target_class);
    s.finish();
  }

  {
    Section s = root.sub("eval");
    if (s.has("victims")) {
      const json& vs = s.raw("victims");
      if (!vs.is_array()) throw ConfigError("eval.victims must be an array");
      for (std::size_t i = 0; i < vs.size(); ++i) {
        cfg.eval.victims.push_back(parse_model(Section(vs[i], "eval.victims[" + std::to_string(i) + "]"), ""));
      }
    }
    if (s.has("defenses")) {
      const auto ds = s.req<std::vector<std::string>>("defenses");
      cfg.eval.defenses.clear();
      for (std::size_t i = 0; i < ds.size(); ++i) {
        try {
          cfg.eval.defenses.push_back(DefenseSpec::parse(ds[i]));
        } catch (const ArgumentError& e) {
          throw ConfigError("eval.defenses[" + std::to_string(i) + "]: " + e.what());
        }
      }
    }
    s.opt("epsilon", cfg.eval.epsilon);
    s.opt("batch_size", cfg.eval.batch_size);
    s.opt("targets", cfg.eval.targets);
    s.finish();
  }

  root.finish();
  cfg.resolve();
  return cfg;
}

void RunConfig::resolve() {
  if (output_dir.empty()) throw ConfigError("output_dir must be nonempty");
  if (data.kind == DatasetKind::directory && data.root.empty()) throw ConfigError("data.root is required for directory datasets");
  if (data.kind == DatasetKind::synthetic_shapes) {
    if (data.num_classes < 2 || data.num_classes > 24) throw ConfigError("data.num_classes must be in [2,24]");
    if (data.samples_per_class < 1) throw ConfigError("data.samples_per_class must be >= 1");
    if (data.eval_samples_per_class < 1) throw ConfigError("data.eval_samples_per_class must be >= 1");
  }
  if (data.image_size < 8 || data.image_size % 4 != 0) {
    throw ConfigError("data.image_size must be >= 8 and a multiple of 4");
  }
  if (data.channels != 1 && data.channels != 3) throw ConfigError("data.channels must be 1 or 3");

  validate_model(surrogate, "surrogate");
  if (!surrogate.fit_seed) surrogate.fit_seed = derive_seed(seed, "surrogate");
  for (std::size_t i = 0; i < eval.victims.size(); ++i) {
    auto& v = eval.victims[i];
    validate_model(v, "eval.victims[" + std::to_string(i) + "]");
    if (!v.fit_seed) v.fit_seed = v.name == surrogate.name ? *surrogate.fit_seed : derive_seed(seed, "victim", i);
  }

  in_section("conditioning", [&] {
    build_prompt("x", conditioning.prompt_template);
    make_text_encoder(conditioning.text_encoder, conditioning.encoder_seed);
  });

  train.seed = seed;
  in_section("train", [&] { train.validate(); });
  generator.image_channels = data.channels;
  generator.epsilon = train.epsilon;
  generator.init_seed = derive_seed(seed, "generator-init");
  generator = variant_config(generator.variant, generator);
  in_section("generator", [&] { generator.validate(); });

  finetune.config.seed = derive_seed(seed, "finetune");
  in_section("finetune", [&] { finetune.config.validate(); });
  if (data.image_size % finetune.config.patch_size != 0) {
    throw ConfigError("finetune.patch_size must divide data.image_size");
  }

  if (!(eval.epsilon >= 0.0 && eval.epsilon <= 1.0)) throw ConfigError("eval.epsilon must be in [0,1]");
  if (eval.batch_size < 1) throw ConfigError("eval.batch_size must be >= 1");
}

json RunConfig::to_json() const {
  json victims = json::array();
  for (const auto& v : eval.victims) victims.push_back(model_json(v));
  json defenses = json::array();
  for (const auto& d : eval.defenses) {
    const auto p = d.params();
    std::string text = d.label();
    if (!p.empty()) {
      std::string q = p;
      std::replace(q.begin(), q.end(), ';', ',');
      text += ":" + q;
    }
    defenses.push_back(text);
  }
  return {{"seed", seed},
          {"output_dir", output_dir.string()},
          {"data",
           {{"kind", to_string(data.kind)},
            {"root", data.root.string()},
            {"eval_root", data.eval_root.string()},
            {"num_classes", data.num_classes},
            {"samples_per_class", data.samples_per_class},
            {"eval_samples_per_class", data.eval_samples_per_class},
            {"image_size", data.image_size},
            {"channels", data.channels}}},
          {"surrogate", model_json(surrogate)},
          {"conditioning",
           {{"prompt_template", conditioning.prompt_template},
            {"text_encoder", conditioning.text_encoder},
            {"encoder_seed", conditioning.encoder_seed},
            {"attention_tokens", generator.attention_tokens}}},
          {"generator",
           {{"base_width", generator.base_width},
            {"residual_blocks", generator.residual_blocks},
            {"cross_attention_count", generator.cross_attention_count},
            {"attention_dim", generator.attention_dim},
            {"purifier_widths", generator.purifier.widths},
            {"purifier_slope", generator.purifier.slope},
            {"variant", to_string(generator.variant)}}},
          {"train",
           {{"epochs", train.epochs},
            {"learning_rate", train.learning_rate},
            {"batch_size", train.batch_size},
            {"epsilon", train.epsilon},
            {"target_classes", train.target_classes},
            {"beta1", train.beta1},
            {"beta2", train.beta2},
            {"use_augmented_branch", train.use_augmented_branch},
            {"max_steps", train.max_steps}}},
          {"finetune",
           {{"epochs", finetune.config.epochs},
            {"mask_ratio", finetune.config.mask_ratio},
            {"patch_size", finetune.config.patch_size},
            {"learning_rate", finetune.config.learning_rate},
            {"batch_size", finetune.config.batch_size},
            {"max_steps", finetune.config.max_steps},
            {"base_checkpoint", finetune.base_checkpoint.string()},
            {"target_class", finetune.target_class}}},
          {"eval",
           {{"victims", victims},
            {"defenses", defenses},
            {"epsilon", eval.epsilon},
            {"batch_size", eval.batch_size},
            {"targets", eval.targets}}}};
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

DatasetSpec dataset_spec(const RunConfig& cfg, Split split) {
  DatasetSpec s;
  s.kind = cfg.data.kind;
  s.root = split == Split::eval && !cfg.data.eval_root.empty() ? cfg.data.eval_root : cfg.data.root;
  s.num_classes = cfg.data.num_classes;
  s.samples_per_class = split == Split::train ? cfg.data.samples_per_class : cfg.data.eval_samples_per_class;
  s.image_size = cfg.data.image_size;
  s.channels = cfg.data.channels;
  s.seed = derive_seed(cfg.seed, "data");
  s.split = split;
  return s;
}

Dataset load_split(const RunConfig& cfg, Split split) { return open_dataset(dataset_spec(cfg, split)); }

std::filesystem::path model_path(const RunConfig& cfg, const ModelSpec& spec) {
  return spec.weights.empty() ? cfg.output_dir / (spec.name + ".model") : spec.weights;
}

Classifier obtain_classifier(const RunConfig& cfg, const ModelSpec& spec, const Dataset& train_data,
                             const std::function<void(const std::string&)>& log) {
  const auto path = model_path(cfg, spec);
  if (std::filesystem::exists(path)) {
    Classifier c = Classifier::load(path);
    if (c.arch() != spec.arch) {
      throw LoadError(path.string() + ": model arch " + c.arch() + " does not match configured " + spec.arch);
    }
    if (log) log("loaded model " + spec.name + " from " + path.string());
    return c;
  }
  Classifier c = Classifier::create(spec.arch, train_data.channels(), train_data.class_names(), *spec.fit_seed);
  FitOptions fo;
  fo.epochs = spec.fit_epochs;
  fo.learning_rate = spec.fit_learning_rate;
  fo.batch_size = spec.fit_batch_size;
  fo.seed = *spec.fit_seed;
  const double loss = fit_classifier(c, train_data, fo);
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  c.save(path);
  if (log) log("fitted model " + spec.name + " (" + spec.arch + "), final loss " + std::to_string(loss) + ", saved to " + path.string());
  return c;
}

}  // namespace cgnc
