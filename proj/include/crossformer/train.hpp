#pragma once

// Training loop, evaluation driver, ablation runner and gradient check.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossformer/data.hpp"
#include "crossformer/metrics.hpp"
#include "crossformer/model.hpp"

namespace crossformer {

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double lr0 = 1e-4;
  double lr_decay = 0.99;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool flip_augment = true;
  // Data-parallel threads per step. Only workers == 1 is bitwise reproducible.
  std::size_t workers = 1;
  // 0 means no cap; otherwise training stops after this many Adam steps.
  std::size_t max_steps = 0;
  // Slots whose names contain one of these substrings are never updated.
  std::vector<std::string> frozen_slots;
  std::string train_data;
  std::string eval_data;  // empty: hold out the last 20% of train_data by id
  double holdout_fraction = 0.2;

  bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& config);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

double lr_at(std::size_t epoch, const TrainConfig& config);

struct AdamState {
  std::vector<Array> m;
  std::vector<Array> v;
  std::uint64_t t = 0;
};

AdamState make_adam_state(const ModelParams& params);

// One bias-corrected Adam update of every slot not masked out by `frozen`
// (same length as params.slots(), or empty). Gradients are checked for
// finiteness before anything is modified; the error names the slot.
void adam_step(ModelParams& params, const std::vector<Array>& grads, AdamState& state, double lr,
               const TrainConfig& config, const std::vector<bool>& frozen = {});

// Mean over rows of the Euclidean row distance; equals metrics::mpjpe on a
// J x 3 pose, and the per-window mean for stacked windows.
Tensor mpjpe_loss(const Tensor& pred, const Tensor& gt);

// Stacks windows into a {B, F, J, 2} input and a (B*J) x 3 target.
Array stack_inputs(const std::vector<const PoseWindow*>& windows);
Array stack_targets(const std::vector<const PoseWindow*>& windows);

// Mean per-window MPJPE of the model on the windows, no augmentation.
double mean_mpjpe(const ModelParams& params, const ModelConfig& config,
                  const std::vector<PoseWindow>& windows, std::size_t batch_size = 64);

struct TrainResult {
  ModelParams params;
  std::vector<nlohmann::json> log;  // every line emitted, in order
  double initial_train_mpjpe = 0.0;
  double final_train_mpjpe = 0.0;
  std::optional<double> final_eval_mpjpe;
  std::size_t steps = 0;
};

struct TrainSinks {
  // Receives every log record as it is produced.
  std::function<void(const nlohmann::json&)> log;
  // Written before the first step and after every epoch.
  std::optional<std::filesystem::path> checkpoint;
};

// Trains from `initial` on the given windows. Log records:
//   {"event":"init", "train_mpjpe", "eval_mpjpe"?, "params", "trainable_params"}
//   {"event":"epoch", "epoch", "lr", "steps", "train_loss", "eval_mpjpe"?}
//   {"event":"final", "steps", "train_mpjpe", "eval_mpjpe"?}
// A non-finite loss logs {"event":"abort", ...} and throws NumericError;
// the checkpoint on disk is then the last completed epoch.
TrainResult train(const TrainConfig& config, const SkeletonSpec& skeleton, ModelParams initial,
                  const std::vector<PoseWindow>& train_windows,
                  const std::vector<PoseWindow>& eval_windows, const TrainSinks& sinks = {});

// Every centre-frame window of every record.
std::vector<PoseWindow> windows_of(const std::vector<SequenceRecord>& records, std::size_t frames);

struct PreparedData {
  SkeletonSpec skeleton;
  std::vector<PoseWindow> train_windows;
  std::vector<PoseWindow> eval_windows;
};

// Loads train_data and either eval_data or a holdout split of train_data,
// checking that all records share one skeleton matching the model.
PreparedData prepare_data(const TrainConfig& config);

// Trains on prepare_data(config) from init_params(config.model, config.seed).
TrainResult train_from_files(const TrainConfig& config, const TrainSinks& sinks = {});

// ---- evaluation ---------------------------------------------------------------

// Maps inputs {B, F, J, 2} to poses {B, J, 3}.
using Predictor = std::function<Array(const Array& inputs)>;

struct EvalOptions {
  bool flip_ensemble = true;
  bool procrustes_scale = true;
  std::size_t batch_size = 64;
  std::size_t stride = 1;  // evaluate every stride-th centre frame
};

// Averages the prediction with the mirrored prediction of the mirrored input.
Predictor flip_ensemble(Predictor base, SkeletonSpec skeleton);

EvalReport evaluate_predictor(const Predictor& predictor, std::size_t frames,
                              const std::vector<SequenceRecord>& records, const EvalOptions& options);

// Throws ConfigError when the model's joint count differs from a record's.
EvalReport evaluate(const ModelParams& params, const ModelConfig& config,
                    const std::vector<SequenceRecord>& records, const EvalOptions& options);

// ---- ablation -----------------------------------------------------------------

struct AblationVariant {
  std::string name;
  bool cji = true, cfi = true, spatial_embed = true, temporal_embed = true;
  bool spatial_stage = true, temporal_stage = true;
  // CJI and CFI present but zero and frozen: the all-off function with the
  // full architecture.
  bool zeroed_modules = false;

  ModelConfig apply(ModelConfig base) const;
};

// The CJI/CFI/E_s/E_t grid, the all-off baseline, the zero-module control,
// spatial-only and temporal-only.
std::vector<AblationVariant> default_ablation_variants();

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  bool cji = false, cfi = false, spatial_embed = false, temporal_embed = false;
  std::size_t spatial_layers = 0, temporal_layers = 0;
  std::size_t trainable_params = 0;
  double initial_eval_mpjpe = 0.0;
  double final_eval_mpjpe = 0.0;
  double final_train_mpjpe = 0.0;
};

// Trains every variant under every seed with identical budget and data.
std::vector<AblationRow> ablate(const TrainConfig& base, const std::vector<AblationVariant>& variants,
                                const std::vector<std::uint64_t>& seeds, const SkeletonSpec& skeleton,
                                const std::vector<PoseWindow>& train_windows,
                                const std::vector<PoseWindow>& eval_windows,
                                const std::function<void(const AblationRow&)>& on_row = {});

std::string ablation_csv(const std::vector<AblationRow>& rows);

// ---- gradient check -------------------------------------------------------------

struct GradcheckOptions {
  ModelConfig model;  // defaults to tiny_config() with output_scale 1
  std::uint64_t seed = 0;
  std::size_t batch = 2;
  double eps = 1e-4;
  double tolerance = 1e-4;
  std::size_t max_nodes = 100000;
  std::optional<BackwardFault> fault;

  GradcheckOptions();
};

struct GradcheckReport {
  std::vector<std::pair<std::string, double>> per_slot;
  double max_rel_error = 0.0;
  std::size_t graph_nodes = 0;
  bool passed = false;

  nlohmann::json to_json() const;
};

// Finite-difference check of the training loss over every parameter slot.
// Parameters are the seeded init plus uniform noise so that zero-initialized
// slots take part.
GradcheckReport gradcheck(const GradcheckOptions& options);

}  // namespace crossformer
