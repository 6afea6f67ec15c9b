#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cgnc/classifier.hpp"
#include "cgnc/data.hpp"
#include "cgnc/evaluation.hpp"
#include "cgnc/generator.hpp"
#include "cgnc/training.hpp"
#include "json.hpp"

namespace cgnc {

struct DataSection {
  DatasetKind kind = DatasetKind::synthetic_shapes;
  std::filesystem::path root;       // directory datasets (training images)
  std::filesystem::path eval_root;  // optional separate evaluation directory
  std::int64_t num_classes = 8;
  std::int64_t samples_per_class = 200;
  std::int64_t eval_samples_per_class = 50;
  std::int64_t image_size = 32;
  std::int64_t channels = 3;
};

// A classifier obtained from `weights` when that file exists, otherwise
// fitted from `fit_seed` on the training split and written to `weights`.
struct ModelSpec {
  std::string name = "small_cnn";
  std::string arch = "small_cnn";
  std::filesystem::path weights;  // empty: <output_dir>/<name>.model
  std::optional<std::uint64_t> fit_seed;
  std::int64_t fit_epochs = 30;
  double fit_learning_rate = 3e-3;
  std::int64_t fit_batch_size = 32;
};

struct EvalSection {
  std::vector<ModelSpec> victims;
  std::vector<DefenseSpec> defenses{DefenseSpec{}};
  double epsilon = kDefaultEpsilon;
  std::int64_t batch_size = 64;
  std::vector<std::string> targets;  // empty: the checkpoint's target set
};

struct FinetuneSection {
  FinetuneConfig config;
  std::filesystem::path base_checkpoint;  // empty: <output_dir>/generator.ckpt
  std::string target_class;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  DataSection data;
  ModelSpec surrogate;
  ConditioningConfig conditioning;
  GeneratorConfig generator;
  TrainConfig train;
  FinetuneSection finetune;
  EvalSection eval;

  // Fills derived seeds and defaults, then validates every section.
  void resolve();
  nlohmann::json to_json() const;
};

// Throws ConfigError naming the offending field (e.g. "train.epochs").
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

DatasetSpec dataset_spec(const RunConfig& cfg, Split split);
Dataset load_split(const RunConfig& cfg, Split split);

std::filesystem::path model_path(const RunConfig& cfg, const ModelSpec& spec);
Classifier obtain_classifier(const RunConfig& cfg, const ModelSpec& spec, const Dataset& train_data,
                             const std::function<void(const std::string&)>& log = {});

}  // namespace cgnc
