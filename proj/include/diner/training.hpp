#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "diner/causal.hpp"
#include "diner/corpus.hpp"
#include "diner/model.hpp"
#include "diner/numeric.hpp"
#include "json.hpp"

namespace diner::training {

using numeric::Var;

struct TrainingConfig {
  double alpha = 0.8;
  double beta = 1.0;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch = 32;
  std::size_t epochs = 20;
  double dropout = 0.1;
  std::uint64_t seed = 13;
  // Epoch (1-based) after which the confounder dictionary is built.
  std::size_t snapshot_epoch = 1;
  // Rebuild the dictionary every this many epochs after the snapshot; 0 keeps it frozen.
  std::size_t refresh_interval = 0;
  // Finite-difference check of the full loss on a tiny batch before training.
  bool self_check = true;
  std::size_t self_check_coordinates = 48;
  double self_check_tol = 1e-4;

  void validate() const;
};

nlohmann::json to_json(const TrainingConfig& config);
TrainingConfig training_config_from_json(const nlohmann::json& j);

// ---- objective ---------------------------------------------------------------------

struct LossParts {
  Var total;
  Var l_k;  // cross-entropy of the fused scores
  Var l_a;
  Var l_r;
};

// L_K + alpha L_A + beta L_R.
LossParts multi_task_loss(Var zeta_a, Var zeta_r, Var zeta_k, std::size_t label, double alpha,
                          double beta, causal::FusionStrategy strategy);

struct LossValues {
  double total = 0.0;
  double l_k = 0.0;
  double l_a = 0.0;
  double l_r = 0.0;
};

LossValues multi_task_loss(const causal::BranchOutputs& outputs, corpus::Label label, double alpha,
                           double beta, causal::FusionStrategy strategy);

// Per-instance training loss for any model variant. Single-branch variants use
// plain cross-entropy; learned voids add cross-entropy of the all-void fusion.
LossParts instance_loss(const model::DinerModel& model, const model::TapeOutputs& outputs,
                        corpus::Label label, const TrainingConfig& config);

// Mean instance loss over a batch, recorded on one tape.
LossParts batch_loss(const model::DinerModel& model, numeric::Tape& tape,
                     std::span<const corpus::Instance* const> batch, const TrainingConfig& config,
                     const encoder::ForwardOptions& options);

// ---- optimizer ---------------------------------------------------------------------

// Adam with decoupled weight decay; parameters with decay == false skip the decay term.
class AdamW {
 public:
  AdamW(numeric::ParameterStore& params, const TrainingConfig& config);
  void step();
  std::size_t steps() const { return steps_; }

 private:
  std::vector<numeric::Parameter*> params_;
  std::vector<numeric::Tensor> m_;
  std::vector<numeric::Tensor> v_;
  double lr_, wd_, b1_, b2_, eps_;
  std::size_t steps_ = 0;
};

// ---- training loop -----------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double l_k = 0.0;
  double l_a = 0.0;
  double l_r = 0.0;
  std::size_t batches = 0;
  bool tde_active = false;
};

nlohmann::json to_json(const EpochLog& log);
EpochLog epoch_log_from_json(const nlohmann::json& j);

struct TrainResult {
  model::DinerModel model;
  std::vector<EpochLog> log;
  std::optional<numeric::GradientCheckResult> self_check;
};

// Vocabulary comes from `train` alone. Throws NumericError naming the epoch and
// batch when a loss or gradient stops being finite.
TrainResult train(const corpus::Corpus& train, const model::ModelConfig& model_config,
                  const TrainingConfig& config);

// Builds the confounder dictionary from the model's current layer-tap features.
causal::ConfounderDictionary snapshot_dictionary(const model::DinerModel& model,
                                                 const corpus::Corpus& train, std::size_t epoch);

// Finite-difference check of the full training loss on `batch` (dropout off).
numeric::GradientCheckResult check_loss_gradient(model::DinerModel& model,
                                                 std::span<const corpus::Instance* const> batch,
                                                 const TrainingConfig& config,
                                                 const numeric::GradientCheckOptions& options);

// ---- checkpoint --------------------------------------------------------------------

// Parameters and prototypes are held at 32-bit precision, so save/load is exact.
struct Checkpoint {
  model::ModelConfig model_config;
  TrainingConfig training_config;
  encoder::Vocab vocab;
  numeric::ParameterStore params;
  std::optional<causal::ConfounderDictionary> dictionary;
  std::vector<EpochLog> log;
  nlohmann::json provenance = nlohmann::json::object();

  static Checkpoint capture(const model::DinerModel& model, const TrainingConfig& config,
                            std::vector<EpochLog> log);
  model::DinerModel restore() const;

  // Writes <dir>/manifest.json and <dir>/params.bin, each via temp file + rename.
  void save(const std::filesystem::path& dir) const;
  static Checkpoint load(const std::filesystem::path& dir);
};

nlohmann::json to_json(const model::ModelConfig& config);
model::ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace diner::training
