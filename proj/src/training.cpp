#include "cgnc/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "cgnc/archive.hpp"
#include "cgnc/error.hpp"
#include "cgnc/rng.hpp"

namespace cgnc {
namespace {

using nlohmann::json;

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
  return s;
}

std::string condition_source_name(ConditionSource c) { return c == ConditionSource::text ? "text" : "one_hot"; }

ConditionSource parse_condition_source(const std::string& s) {
  if (s == "text") return ConditionSource::text;
  if (s == "one_hot") return ConditionSource::one_hot;
  throw LoadError("unknown condition source \"" + s + "\"");
}

std::string sn_name(std::size_t i, char which) { return "purifier." + std::to_string(i) + ".sn_" + which; }

Archive to_archive(const Checkpoint& c) {
  Archive a;
  a.version = c.format_version;
  json targets = {{"names", c.targets.names}, {"indices", c.targets.indices}};
  json ft = nullptr;
  if (c.finetune) {
    ft = {{"target_class", c.finetune->target_class}, {"mask_ratio", c.finetune->mask_ratio},
          {"patch_size", c.finetune->patch_size},     {"epochs", c.finetune->epochs},
          {"learning_rate", c.finetune->learning_rate}, {"seed", c.finetune->seed},
          {"steps", c.finetune->steps}};
  }
  a.meta = {{"kind", "generator"},
            {"format_version", c.format_version},
            {"generator", to_json(c.generator.config)},
            {"train", to_json(c.train)},
            {"targets", targets},
            {"conditioning",
             {{"prompt_template", c.conditioning.prompt_template},
              {"text_encoder", c.conditioning.text_encoder},
              {"encoder_seed", c.conditioning.encoder_seed}}},
            {"surrogate", c.surrogate_name},
            {"seed", c.seed},
            {"steps", c.steps},
            {"finetune", ft}};
  for (const auto* p : c.generator.parameters()) a.arrays.emplace_back(p->name, p->value);
  if (c.generator.config.use_purifier) {
    const auto& blocks = c.generator.purifier.blocks();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      a.arrays.emplace_back(sn_name(i, 'u'), blocks[i].spectral.u);
      a.arrays.emplace_back(sn_name(i, 'v'), blocks[i].spectral.v);
    }
  }
  return a;
}

template <class T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw LoadError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw LoadError(where + ": bad field '" + key + "': " + e.what());
  }
}

Tensor gather_rows(const Tensor& table, const std::vector<std::int64_t>& rows) {
  const auto w = table.dim(1);
  Tensor out(Shape{static_cast<std::int64_t>(rows.size()), w});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(table.data() + rows[i] * w, w, out.data() + static_cast<std::int64_t>(i) * w);
  }
  return out;
}

std::int64_t steps_per_epoch(std::int64_t n, std::int64_t batch) { return (n + batch - 1) / batch; }

}  // namespace

TargetClassSet TargetClassSet::resolve(const std::vector<std::string>& names, const std::vector<std::string>& labels) {
  if (names.empty()) throw ArgumentError("target class set is empty");
  TargetClassSet t;
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (n.empty()) throw ArgumentError("target class names must be nonempty");
    if (!seen.insert(n).second) throw ArgumentError("duplicate target class \"" + n + "\"");
    const auto it = std::find(labels.begin(), labels.end(), n);
    if (it == labels.end()) {
      throw ArgumentError("target class \"" + n + "\" is not a surrogate label (available: " + join(labels) + ")");
    }
    t.names.push_back(n);
    t.indices.push_back(it - labels.begin());
  }
  return t;
}

std::int64_t TargetClassSet::find(const std::string& name) const {
  const auto it = std::find(names.begin(), names.end(), name);
  return it == names.end() ? -1 : it - names.begin();
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (!(learning_rate >= 0.0)) throw ConfigError("train.learning_rate must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ConfigError("train.epsilon must be in (0,1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train betas must be in [0,1)");
  if (max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
}

void FinetuneConfig::validate() const {
  if (epochs < 1) throw ConfigError("finetune.epochs must be >= 1");
  if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) throw ConfigError("finetune.mask_ratio must be in [0,1]");
  if (patch_size < 1) throw ConfigError("finetune.patch_size must be >= 1");
  if (!(learning_rate >= 0.0)) throw ConfigError("finetune.learning_rate must be >= 0");
  if (batch_size < 1) throw ConfigError("finetune.batch_size must be >= 1");
  if (max_steps < 0) throw ConfigError("finetune.max_steps must be >= 0");
}

Conditioner Checkpoint::conditioner() const {
  std::shared_ptr<const TextEncoder> enc;
  if (generator.config.condition == ConditionSource::text) {
    enc = make_text_encoder(conditioning.text_encoder, conditioning.encoder_seed);
  }
  return Conditioner(generator.config.condition, targets.names, conditioning.prompt_template, std::move(enc));
}

json to_json(const GeneratorConfig& g) {
  return {{"image_channels", g.image_channels},
          {"base_width", g.base_width},
          {"residual_blocks", g.residual_blocks},
          {"cross_attention_count", g.cross_attention_count},
          {"attention_dim", g.attention_dim},
          {"attention_tokens", g.attention_tokens},
          {"use_purifier", g.use_purifier},
          {"use_fusion", g.use_fusion},
          {"condition", condition_source_name(g.condition)},
          {"epsilon", g.epsilon},
          {"purifier_widths", g.purifier.widths},
          {"purifier_slope", g.purifier.slope},
          {"init_seed", g.init_seed},
          {"variant", to_string(g.variant)}};
}

GeneratorConfig generator_config_from_json(const json& j) {
  const std::string w = "generator config";
  GeneratorConfig g;
  g.image_channels = field<std::int64_t>(j, "image_channels", w);
  g.base_width = field<std::int64_t>(j, "base_width", w);
  g.residual_blocks = field<std::int64_t>(j, "residual_blocks", w);
  g.cross_attention_count = field<std::int64_t>(j, "cross_attention_count", w);
  g.attention_dim = field<std::int64_t>(j, "attention_dim", w);
  g.attention_tokens = field<std::int64_t>(j, "attention_tokens", w);
  g.use_purifier = field<bool>(j, "use_purifier", w);
  g.use_fusion = field<bool>(j, "use_fusion", w);
  g.condition = parse_condition_source(field<std::string>(j, "condition", w));
  g.epsilon = field<double>(j, "epsilon", w);
  g.purifier.widths = field<std::vector<std::int64_t>>(j, "purifier_widths", w);
  g.purifier.slope = field<double>(j, "purifier_slope", w);
  g.init_seed = field<std::uint64_t>(j, "init_seed", w);
  g.variant = parse_variant(field<std::string>(j, "variant", w));
  return g;
}

json to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"epsilon", t.epsilon},
          {"target_classes", t.target_classes},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"seed", t.seed},
          {"use_augmented_branch", t.use_augmented_branch},
          {"max_steps", t.max_steps}};
}

TrainConfig train_config_from_json(const json& j) {
  const std::string w = "train config";
  TrainConfig t;
  t.epochs = field<std::int64_t>(j, "epochs", w);
  t.learning_rate = field<double>(j, "learning_rate", w);
  t.batch_size = field<std::int64_t>(j, "batch_size", w);
  t.epsilon = field<double>(j, "epsilon", w);
  t.target_classes = field<std::vector<std::string>>(j, "target_classes", w);
  t.beta1 = field<double>(j, "beta1", w);
  t.beta2 = field<double>(j, "beta2", w);
  t.seed = field<std::uint64_t>(j, "seed", w);
  t.use_augmented_branch = field<bool>(j, "use_augmented_branch", w);
  t.max_steps = field<std::int64_t>(j, "max_steps", w);
  return t;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) { save_archive(path, to_archive(ckpt)); }

std::string checkpoint_hash(const Checkpoint& ckpt) {
  const auto bytes = serialize_archive(to_archive(ckpt));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()))));
  return buf;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const Archive a = load_archive(path, kCheckpointVersion);
  const std::string where = path.string();
  const json& m = a.meta;
  if (field<std::string>(m, "kind", where) != "generator") throw LoadError(where + ": not a generator checkpoint");
  Checkpoint c;
  c.format_version = a.version;
  try {
    c.generator = GeneratorState::init(generator_config_from_json(m.at("generator")));
  } catch (const ConfigError& e) {
    throw LoadError(where + ": invalid generator config: " + e.what());
  }
  c.train = train_config_from_json(m.at("train"));
  const json& t = m.at("targets");
  c.targets.names = field<std::vector<std::string>>(t, "names", where + " targets");
  c.targets.indices = field<std::vector<std::int64_t>>(t, "indices", where + " targets");
  if (c.targets.names.size() != c.targets.indices.size()) throw LoadError(where + ": targets names/indices length differ");
  const json& cond = m.at("conditioning");
  c.conditioning.prompt_template = field<std::string>(cond, "prompt_template", where);
  c.conditioning.text_encoder = field<std::string>(cond, "text_encoder", where);
  c.conditioning.encoder_seed = field<std::uint64_t>(cond, "encoder_seed", where);
  c.surrogate_name = field<std::string>(m, "surrogate", where);
  c.seed = field<std::uint64_t>(m, "seed", where);
  c.steps = field<std::int64_t>(m, "steps", where);
  if (m.contains("finetune") && !m.at("finetune").is_null()) {
    const json& f = m.at("finetune");
    FinetuneRecord r;
    r.target_class = field<std::string>(f, "target_class", where);
    r.mask_ratio = field<double>(f, "mask_ratio", where);
    r.patch_size = field<std::int64_t>(f, "patch_size", where);
    r.epochs = field<std::int64_t>(f, "epochs", where);
    r.learning_rate = field<double>(f, "learning_rate", where);
    r.seed = field<std::uint64_t>(f, "seed", where);
    r.steps = field<std::int64_t>(f, "steps", where);
    c.finetune = r;
  }
  for (auto* p : c.generator.parameters()) {
    const Tensor& v = a.array(p->name);
    if (v.shape() != p->value.shape()) {
      throw LoadError(where + ": array '" + p->name + "' has shape " + shape_str(v.shape()) + ", expected " +
                      shape_str(p->value.shape()));
    }
    p->value = v;
    p->zero_grad();
  }
  if (c.generator.config.use_purifier) {
    auto& blocks = c.generator.purifier.blocks();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const Tensor& u = a.array(sn_name(i, 'u'));
      const Tensor& v = a.array(sn_name(i, 'v'));
      if (u.shape() != blocks[i].spectral.u.shape() || v.shape() != blocks[i].spectral.v.shape()) {
        throw LoadError(where + ": spectral state shape mismatch in purifier block " + std::to_string(i));
      }
      blocks[i].spectral = {u, v};
    }
  }
  return c;
}

double targeted_loss(const Tensor& logits, const std::vector<std::int64_t>& targets) {
  return ag::cross_entropy(ag::constant(logits), targets)->value[0];
}

Trainer::Trainer(GeneratorState& generator, const Classifier& surrogate, TargetClassSet targets,
                 Conditioner conditioner, nn::AdamOptions adam, StepOptions options)
    : gen_(generator),
      surrogate_(surrogate),
      targets_(std::move(targets)),
      conditioner_(std::move(conditioner)),
      class_embeddings_(conditioner_.embeddings(targets_.names)),
      adam_(generator.parameters(), adam),
      opts_(options) {
  for (auto idx : targets_.indices) {
    if (idx < 0 || idx >= surrogate_.num_labels()) throw ArgumentError("target index outside the surrogate label space");
  }
}

StepMetrics Trainer::step(const ImageBatch& x_s, const std::vector<std::int64_t>& slots, std::uint64_t seed) {
  const auto B = x_s.batch();
  if (static_cast<std::int64_t>(slots.size()) != B) throw ArgumentError("train_step: one target per image required");
  std::vector<std::int64_t> labels;
  for (auto s : slots) {
    if (s < 0 || s >= targets_.size()) throw ArgumentError("train_step: target slot out of range");
    labels.push_back(targets_.indices[static_cast<std::size_t>(s)]);
  }
  Tensor e = gather_rows(class_embeddings_, slots);
  Tensor x = x_s.pixels;
  if (opts_.use_augmented_branch) {
    // Both branches go through one forward pass; instance norm is per sample,
    // so this equals two separate passes and the mean CE is the equal-weight
    // average of the two branch losses.
    const ImageBatch x_aug = augment(x_s, derive_seed(seed, "augment"));
    x = concat0({x, x_aug.pixels});
    e = concat0({e, e});
    labels.insert(labels.end(), labels.begin(), labels.end());
  }

  gen_.refresh_spectral_state(1);
  adam_.zero_grad();
  auto xv = ag::constant(x);
  auto delta = graph::perturbation(gen_, xv, e, opts_.epsilon, true);
  StepMetrics m;
  m.step = steps_;
  m.max_abs_delta = delta->value.max_abs();
  if (m.max_abs_delta > opts_.epsilon + 1e-7) throw TrainingError("perturbation exceeded the l_inf budget", steps_);
  if (opts_.mask) {
    const auto& d = delta->value;
    delta = ag::mul_const(delta, patch_mask(d.dim(0), d.dim(1), d.dim(2), d.dim(3), opts_.mask->first,
                                            opts_.mask->second, derive_seed(seed, "mask")));
  }
  auto x_adv = ag::clamp(ag::add(xv, delta), 0.0, 1.0);
  auto logits = surrogate_.forward(x_adv, false);
  auto loss = ag::cross_entropy(logits, labels);
  m.loss = loss->value[0];
  if (!std::isfinite(m.loss)) throw TrainingError("non-finite training loss", steps_);
  const auto L = logits->value.dim(1);
  std::int64_t hits = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    if (argmax_row(logits->value.data() + b * L, L) == labels[static_cast<std::size_t>(b)]) ++hits;
  }
  m.hit_rate = static_cast<double>(hits) / static_cast<double>(B);
  ag::backward(loss);
  adam_.step();
  ++steps_;
  return m;
}

Checkpoint train(const Dataset& data, const Classifier& surrogate, const std::string& surrogate_name,
                 const TrainConfig& cfg, const GeneratorConfig& gcfg, const ConditioningConfig& ccfg,
                 const TrainHooks& hooks) {
  cfg.validate();
  if (data.size() < 1) throw ArgumentError("train: dataset is empty");
  Checkpoint ckpt;
  ckpt.train = cfg;
  ckpt.seed = cfg.seed;
  ckpt.conditioning = ccfg;
  ckpt.surrogate_name = surrogate_name;
  const auto names = cfg.target_classes.empty() ? surrogate.label_names() : cfg.target_classes;
  ckpt.targets = TargetClassSet::resolve(names, surrogate.label_names());
  GeneratorConfig g = gcfg;
  g.init_seed = derive_seed(cfg.seed, "generator-init");
  g.epsilon = cfg.epsilon;
  ckpt.generator = GeneratorState::init(g);

  Trainer trainer(ckpt.generator, surrogate, ckpt.targets, ckpt.conditioner(),
                  {cfg.learning_rate, cfg.beta1, cfg.beta2, 1e-8}, {cfg.epsilon, cfg.use_augmented_branch, std::nullopt});
  std::vector<std::int64_t> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  const auto per_epoch = steps_per_epoch(data.size(), cfg.batch_size);
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle(derive_seed(cfg.seed, "epoch", static_cast<std::uint64_t>(epoch)));
    shuffle.shuffle(order);
    for (std::int64_t k = 0; k < per_epoch; ++k) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
      const auto start = k * cfg.batch_size, end = std::min(start + cfg.batch_size, data.size());
      const ImageBatch x = data.batch(std::span<const std::int64_t>(order.data() + start, static_cast<std::size_t>(end - start)));
      Rng pick(derive_seed(cfg.seed, "targets", static_cast<std::uint64_t>(step)));
      std::vector<std::int64_t> slots;
      for (std::int64_t b = 0; b < x.batch(); ++b) slots.push_back(static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(ckpt.targets.size()))));
      StepMetrics m = trainer.step(x, slots, derive_seed(cfg.seed, "step", static_cast<std::uint64_t>(step)));
      m.epoch = epoch;
      ++step;
      if (hooks.on_step) hooks.on_step(m);
    }
    ckpt.steps = step;
    if (hooks.on_epoch) hooks.on_epoch(ckpt, epoch);
    if (cfg.max_steps > 0 && step >= cfg.max_steps) break;
  }
  ckpt.steps = step;
  return ckpt;
}

Checkpoint masked_finetune(const Checkpoint& base, const std::string& target_class, const FinetuneConfig& ft,
                           const Dataset& data, const Classifier& surrogate, const TrainHooks& hooks) {
  ft.validate();
  if (data.size() < 1) throw ArgumentError("masked_finetune: dataset is empty");
  Checkpoint ckpt = base;
  std::int64_t slot = ckpt.targets.find(target_class);
  if (slot < 0) {
    const auto& labels = surrogate.label_names();
    const auto it = std::find(labels.begin(), labels.end(), target_class);
    if (it == labels.end() || ckpt.generator.config.condition != ConditionSource::text) {
      throw ArgumentError("unknown class \"" + target_class + "\" (available: " + join(ckpt.targets.names) + ")");
    }
    ckpt.targets.names.push_back(target_class);
    ckpt.targets.indices.push_back(it - labels.begin());
    slot = ckpt.targets.size() - 1;
  }
  StepOptions opts{ckpt.generator.config.epsilon, ckpt.train.use_augmented_branch, std::nullopt};
  if (ft.mask_ratio > 0.0) opts.mask = std::make_pair(ft.patch_size, ft.mask_ratio);
  Trainer trainer(ckpt.generator, surrogate, ckpt.targets, ckpt.conditioner(),
                  {ft.learning_rate, ckpt.train.beta1, ckpt.train.beta2, 1e-8}, opts);
  std::vector<std::int64_t> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  const auto per_epoch = steps_per_epoch(data.size(), ft.batch_size);
  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < ft.epochs; ++epoch) {
    Rng shuffle(derive_seed(ft.seed, "finetune-epoch", static_cast<std::uint64_t>(epoch)));
    shuffle.shuffle(order);
    for (std::int64_t k = 0; k < per_epoch; ++k) {
      if (ft.max_steps > 0 && step >= ft.max_steps) break;
      const auto start = k * ft.batch_size, end = std::min(start + ft.batch_size, data.size());
      const ImageBatch x = data.batch(std::span<const std::int64_t>(order.data() + start, static_cast<std::size_t>(end - start)));
      StepMetrics m = trainer.step(x, std::vector<std::int64_t>(static_cast<std::size_t>(x.batch()), slot),
                                   derive_seed(ft.seed, "finetune-step", static_cast<std::uint64_t>(step)));
      m.epoch = epoch;
      ++step;
      if (hooks.on_step) hooks.on_step(m);
    }
    if (hooks.on_epoch) hooks.on_epoch(ckpt, epoch);
    if (ft.max_steps > 0 && step >= ft.max_steps) break;
  }
  ckpt.finetune = FinetuneRecord{target_class, ft.mask_ratio, ft.patch_size, ft.epochs, ft.learning_rate, ft.seed, step};
  return ckpt;
}

}  // namespace cgnc
