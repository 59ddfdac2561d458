#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asac/datasets.hpp"
#include "asac/losses.hpp"
#include "asac/vit_model.hpp"

namespace asac::train {

/// Raised when a loss component turns non-finite during training.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(std::string component, const std::string& message)
      : std::runtime_error(message), component_(std::move(component)) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

enum class Mode { train, eval, attack, transfer, fewshot, efficiency };
std::string to_string(Mode mode);
Mode mode_from_string(const std::string& s);

/// Which synthetic generator feeds a run.
struct DatasetSpec {
  std::string kind = "triangles";  // triangles | multitask_triangles | polygons | triangles_ood | polygons_ood
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::size_t image_size = 64;
  std::uint64_t seed = 7;
  std::vector<std::size_t> vertices{3, 4, 8};  // polygons only
  double noise_frac = 0.05;                    // polygons only
};

struct RunConfig {
  model::ModelConfig model{};
  DatasetSpec dataset{};
  DatasetSpec target{};  // transfer / fewshot fine-tuning data
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  std::size_t eval_batch_size = 64;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double lambda = 0.01;
  std::uint64_t seed = 1;
  Mode mode = Mode::train;
  std::vector<double> epsilons{0.01, 0.03, 0.05, 0.1};
  std::size_t pgd_steps = 10;
  double pgd_alpha_ratio = 0.25;  // alpha = ratio * epsilon
  std::vector<double> fewshot_fractions{0.01, 0.05, 0.10, 0.25};
  std::vector<double> efficiency_fractions{0.10, 0.25, 0.50, 1.0};
  std::size_t pretrain_epochs = 10;
  std::size_t finetune_epochs = 5;
  std::size_t early_stopping_patience = 0;  // 0 disables
  bool record_wall_time = false;            // off keeps metrics.csv bit-reproducible
};

nlohmann::json to_json(const RunConfig& config);
nlohmann::json to_json(const DatasetSpec& spec);
/// Strict parse over `base`; unknown keys throw model::ConfigError with the key path.
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
/// FNV-1a of the canonical JSON, hex encoded.
std::string config_hash(const RunConfig& config);

data::Split build_datasets(const DatasetSpec& spec);
/// Schema-derived model settings (head kind, classes, tasks, image size) for a dataset.
model::ModelConfig adapt_model_to(const model::ModelConfig& base, const data::Dataset& dataset);

/// AdamW with decoupled weight decay (beta1 0.9, beta2 0.999, eps 1e-8).
class AdamW {
 public:
  AdamW(double learning_rate, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(ParameterStore& store);
  std::size_t steps() const { return t_; }

 private:
  double lr_, wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct Metrics {
  loss::LossBreakdown loss{};
  double accuracy = 0.0;
  double precision = 0.0;  // macro
  double recall = 0.0;     // macro
  double f1 = 0.0;         // macro
  std::size_t count = 0;
};

/// Accuracy and macro precision/recall/F1 from raw logits. Binary and
/// multilabel heads threshold sigmoid at 0.5; multiclass takes the argmax.
Metrics classification_metrics(model::HeadKind kind, std::span<const double> logits, std::size_t width,
                               std::span<const int> labels);

/// L_task for a batch, per the model's head kind.
Tensor task_loss(const model::AsacModel& model, const Tensor& logits, std::span<const int> labels);

struct StepLosses {
  Tensor task, recon, vq, total;
  loss::LossBreakdown breakdown;
};
/// Evaluates every loss term of a forward pass and checks them for finiteness.
StepLosses compute_losses(const model::AsacModel& model, const model::ForwardResult& forward,
                          std::span<const int> labels, double lambda);

/// Worker threads used by evaluate (default 1). Results do not depend on it.
void set_eval_threads(std::size_t n);
std::size_t eval_threads();

/// Eval-mode pass over a dataset: no dropout, no codebook updates.
Metrics evaluate(const model::AsacModel& model, const data::Dataset& dataset, std::size_t batch_size, double lambda);

/// x' = clamp(x + eps * sign(dL_task/dx), 0, 1).
Tensor fgsm_attack(const model::AsacModel& model, const data::SampleBatch& batch, double epsilon);
/// `steps` signed-gradient steps of size alpha, each clamped to [0,1] and projected
/// back into the max-norm eps-ball around the clean batch. No random start.
Tensor pgd_attack(const model::AsacModel& model, const data::SampleBatch& batch, double epsilon, std::size_t steps,
                  double alpha);
/// Mean task loss of a batch with replaced images.
double batch_task_loss(const model::AsacModel& model, const data::SampleBatch& batch, const Tensor& images);

enum class AttackKind { fgsm, pgd };
std::string to_string(AttackKind kind);
/// Accuracy/metrics under attack over a whole dataset.
Metrics attack_evaluate(const model::AsacModel& model, const data::Dataset& dataset, AttackKind kind,
                        double epsilon, std::size_t pgd_steps, double pgd_alpha, std::size_t batch_size,
                        double lambda);

struct MetricsRow {
  std::string run_id;
  std::string mode;
  std::string split;
  std::size_t epoch = 0;
  Metrics metrics;
  double epsilon = 0.0;
  double fraction = 1.0;
  double wall_ms = 0.0;
};

struct RunRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::vector<MetricsRow> rows;

  const MetricsRow& last(const std::string& split) const;
};

std::string metrics_csv_header();
std::string to_csv(const std::vector<MetricsRow>& rows, bool header = true);

struct TrainOutcome {
  model::AsacModel model;
  RunRecord record;
};

/// Optimises task + lambda (recon + vq) with AdamW; one EMA codebook update per
/// step for every controller. Deterministic given cfg.seed. When `initial` is
/// given, training continues from its weights. Rows are tagged with `mode`.
TrainOutcome train(const RunConfig& cfg, const data::Dataset& train_set, const data::Dataset& test_set,
                   std::size_t epochs, const model::AsacModel* initial = nullptr, const std::string& mode = "train",
                   double fraction = 1.0);

/// Pretrain on cfg.dataset for pretrain_epochs, then fine-tune all weights on cfg.target.
/// Rows: pretrain epochs (split source_*), a fine-tune epoch-0 evaluation on both
/// source and target test sets, then fine-tune epochs (split target_*).
TrainOutcome protocol_transfer(const RunConfig& cfg);
/// Pretrain once, then fine-tune copies on nested stratified fractions of the target train split.
RunRecord protocol_fewshot(const RunConfig& cfg);
/// Independent from-scratch runs on stratified fractions of the train split.
RunRecord protocol_efficiency(const RunConfig& cfg);

}  // namespace asac::train
