#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cgnc/classifier.hpp"
#include "cgnc/conditioning.hpp"
#include "cgnc/data.hpp"
#include "cgnc/generator.hpp"
#include "cgnc/nn.hpp"

#include "json.hpp"

namespace cgnc {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Target classes with their label indices in the surrogate's label space.
struct TargetClassSet {
  std::vector<std::string> names;
  std::vector<std::int64_t> indices;

  // Resolves names against `labels`; rejects empty, duplicate, or unknown names.
  static TargetClassSet resolve(const std::vector<std::string>& names, const std::vector<std::string>& labels);
  std::int64_t size() const { return static_cast<std::int64_t>(names.size()); }
  // Position of `name` in the set, or -1.
  std::int64_t find(const std::string& name) const;
};

struct TrainConfig {
  std::int64_t epochs = 10;
  double learning_rate = 2e-4;
  std::int64_t batch_size = 16;
  double epsilon = kDefaultEpsilon;
  std::vector<std::string> target_classes;
  double beta1 = 0.5;
  double beta2 = 0.999;
  std::uint64_t seed = 0;
  bool use_augmented_branch = true;
  // Optional cap on optimizer steps (0 = epochs * ceil(|data| / batch)).
  std::int64_t max_steps = 0;

  void validate() const;
};

struct FinetuneConfig {
  std::int64_t epochs = 5;
  double mask_ratio = 0.2;
  std::int64_t patch_size = 8;
  double learning_rate = 2e-4;
  std::int64_t batch_size = 16;
  std::uint64_t seed = 0;
  std::int64_t max_steps = 0;

  void validate() const;
};

struct ConditioningConfig {
  std::string prompt_template{kDefaultPromptTemplate};
  std::string text_encoder = "stub";
  std::uint64_t encoder_seed = 0;
};

// Recorded on single-target checkpoints produced by masked_finetune.
struct FinetuneRecord {
  std::string target_class;
  double mask_ratio = 0.0;
  std::int64_t patch_size = 0;
  std::int64_t epochs = 0;
  double learning_rate = 0.0;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
};

struct Checkpoint {
  GeneratorState generator;
  TrainConfig train;
  TargetClassSet targets;
  ConditioningConfig conditioning;
  std::string surrogate_name;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  std::optional<FinetuneRecord> finetune;
  std::uint32_t format_version = kCheckpointVersion;

  Conditioner conditioner() const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Digest of the serialized checkpoint bytes.
std::string checkpoint_hash(const Checkpoint& ckpt);

nlohmann::json to_json(const GeneratorConfig& g);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& t);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Mean over the batch of -log softmax(logits)[target].
double targeted_loss(const Tensor& logits, const std::vector<std::int64_t>& targets);

struct StepMetrics {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double loss = 0.0;
  double hit_rate = 0.0;  // white-box targeted hits on the clean branch
  double max_abs_delta = 0.0;
};

struct StepOptions {
  double epsilon = kDefaultEpsilon;
  bool use_augmented_branch = true;
  // When set, each step zeroes a random fraction of delta patches before the
  // perturbation is added to the image.
  std::optional<std::pair<std::int64_t, double>> mask;  // (patch_size, ratio)
};

// One optimizer step of the generator against a frozen surrogate.
class Trainer {
 public:
  Trainer(GeneratorState& generator, const Classifier& surrogate, TargetClassSet targets, Conditioner conditioner,
          nn::AdamOptions adam, StepOptions options);

  // `slots` index into the target set, one per image.
  StepMetrics step(const ImageBatch& x_s, const std::vector<std::int64_t>& slots, std::uint64_t seed);
  std::int64_t steps_taken() const { return steps_; }

 private:
  GeneratorState& gen_;
  const Classifier& surrogate_;
  TargetClassSet targets_;
  Conditioner conditioner_;
  Tensor class_embeddings_;  // [|targets|, 512]
  nn::Adam adam_;
  StepOptions opts_;
  std::int64_t steps_ = 0;
};

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const Checkpoint&, std::int64_t epoch)> on_epoch;
};

Checkpoint train(const Dataset& data, const Classifier& surrogate, const std::string& surrogate_name,
                 const TrainConfig& cfg, const GeneratorConfig& gcfg, const ConditioningConfig& ccfg,
                 const TrainHooks& hooks = {});

// Single-target fine-tuning with a fixed condition and patch-masked perturbations.
Checkpoint masked_finetune(const Checkpoint& base, const std::string& target_class, const FinetuneConfig& ft,
                           const Dataset& data, const Classifier& surrogate, const TrainHooks& hooks = {});

}  // namespace cgnc
