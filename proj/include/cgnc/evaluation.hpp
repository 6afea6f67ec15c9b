#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cgnc/classifier.hpp"
#include "cgnc/data.hpp"
#include "cgnc/generator.hpp"
#include "cgnc/image_io.hpp"
#include "cgnc/training.hpp"
#include "json.hpp"

namespace cgnc {

// Black-box classifier: only forward logits are exposed.
class VictimModel {
 public:
  virtual ~VictimModel() = default;
  virtual const std::string& name() const = 0;
  virtual const std::vector<std::string>& label_names() const = 0;
  virtual Tensor logits(const Tensor& pixels) const = 0;  // [B, L]
};

class ClassifierVictim final : public VictimModel {
 public:
  ClassifierVictim(std::string name, std::shared_ptr<const Classifier> model);
  const std::string& name() const override { return name_; }
  const std::vector<std::string>& label_names() const override { return model_->label_names(); }
  Tensor logits(const Tensor& pixels) const override { return model_->logits(pixels); }

 private:
  std::string name_;
  std::shared_ptr<const Classifier> model_;
};

struct AsrResult {
  std::int64_t n = 0;
  std::int64_t successes = 0;
  std::int64_t ties = 0;  // rows whose argmax was decided by the lowest-index rule
  double asr = 0.0;
};

AsrResult attack_success_rate(const ImageBatch& x_adv, const VictimModel& victim, std::int64_t target);
// Same count over precomputed logits [B, L].
AsrResult success_from_logits(const Tensor& logits, std::int64_t target);
// Index of `class_name` in the victim's label space; MappingError if absent.
std::int64_t resolve_victim_label(const VictimModel& victim, const std::string& class_name);

enum class DefenseKind { none, gaussian, median, average, jpeg };

struct DefenseSpec {
  DefenseKind kind = DefenseKind::none;
  std::int64_t kernel = 3;
  double sigma = 1.0;
  int quality = 75;

  void validate() const;
  std::string label() const;   // "none", "gaussian", "jpeg", ...
  std::string params() const;  // "k=3;sigma=1", "q=70", ""
  // "none", "gaussian", "gaussian:k=5,sigma=1.5", "median:k=3", "average", "jpeg:q=90"
  static DefenseSpec parse(const std::string& text);
};

std::string to_string(DefenseKind k);

// Normalized k x k weights, row-major.
std::vector<double> gaussian_kernel(std::int64_t k, double sigma);
ImageBatch gaussian_smooth(const ImageBatch& x, std::int64_t k, double sigma);
ImageBatch median_smooth(const ImageBatch& x, std::int64_t k);
ImageBatch average_smooth(const ImageBatch& x, std::int64_t k);
ImageBatch jpeg_roundtrip(const ImageBatch& x, int quality);
ImageBatch apply_defense(const ImageBatch& x, const DefenseSpec& d);

struct ReportRow {
  std::string surrogate;
  std::string victim;
  std::string target_class;
  std::string defense;
  std::string params;
  std::int64_t n = 0;
  std::int64_t successes = 0;
  double asr = 0.0;
  bool white_box = false;
};

struct VictimFailure {
  std::string victim;
  std::string message;
};

struct VictimMean {
  std::string victim;
  std::string defense;
  std::string params;
  double mean_asr = 0.0;
  std::int64_t targets = 0;
  bool white_box = false;
};

struct AttackReport {
  std::vector<ReportRow> rows;
  std::vector<VictimFailure> failures;
  std::string config_digest;
  std::string timestamp;

  // Arithmetic mean of per-target ASR for each (victim, defense).
  std::vector<VictimMean> means() const;
  nlohmann::json to_json() const;
  static AttackReport from_json(const nlohmann::json& j);
  std::string to_csv() const;
  std::string table() const;
};

struct EvalOptions {
  double epsilon = kDefaultEpsilon;
  std::int64_t batch_size = 64;
  std::function<void(const std::string&)> log;
};

AttackReport evaluate(const Checkpoint& ckpt, const std::vector<std::shared_ptr<const VictimModel>>& victims,
                      const Dataset& eval_set, const TargetClassSet& targets, const std::vector<DefenseSpec>& defenses,
                      const EvalOptions& opts = {});

GeneratorConfig variant_config(VariantKind kind, GeneratorConfig base);
GeneratorState build_variant(VariantKind kind, const GeneratorConfig& base);

// One row per sample: [perturbation mapped by (delta/eps + 1)/2 | adversarial image].
Image8 visualization_grid(const PerturbationBatch& p, const ImageBatch& x);
void visualize(const PerturbationBatch& p, const ImageBatch& x, const std::filesystem::path& path);

std::string utc_timestamp();

}  // namespace cgnc
