#pragma once

// CrossFormer 2D-to-3D pose lifter.
//
// Pipeline for one window of F frames with J joints:
//   per-joint embedding (+ spatial positions)       -> (F*J) x D
//   L_s spatial blocks, attention over the J joints of each frame,
//       with the cross-joint interaction (CJI) conv module
//   flatten every frame to one J*D token            -> F x C_t
//   (+ temporal positions), L_t temporal blocks over the F frames,
//       with the cross-frame interaction (CFI) bilinear module
//   weighted frame pooling, LayerNorm, linear       -> J x 3
//
// Batches are stacked along the row axis; attention, CJI and CFI never mix
// rows from different frames (spatial) or windows (temporal).

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "crossformer/tensor.hpp"

namespace crossformer {

enum class AttentionScale { PerHeadDim, TokenCount };

// How CFI builds K, Q and V from a C_t = J*D frame token.
//   PerJoint: one D x D map shared by all joints (block-diagonal C_t x C_t).
//   Full:     dense C_t x C_t maps.
enum class CfiProjection { PerJoint, Full };

struct ModelConfig {
  std::size_t num_joints = 17;
  std::size_t frames = 81;
  std::size_t spatial_dim = 32;
  std::size_t spatial_layers = 4;
  std::size_t temporal_layers = 4;
  std::size_t heads = 8;
  double mlp_ratio = 2.0;
  AttentionScale attention_scale = AttentionScale::PerHeadDim;
  bool cji_enabled = true;
  bool cfi_enabled = true;
  bool spatial_embed_enabled = true;
  bool temporal_embed_enabled = true;
  std::size_t groupnorm_groups = 1;
  std::size_t cji_kernel = 5;
  CfiProjection cfi_projection = CfiProjection::PerJoint;
  // false: linear projection first, LayerNorm over the J*3 outputs after.
  bool head_norm_first = true;
  double norm_eps = 1e-5;
  // Multiplies the head output; 1000 makes the network regress metres
  // while predictions and targets stay in millimetres.
  double output_scale = 1000.0;

  std::size_t temporal_dim() const { return num_joints * spatial_dim; }
  std::size_t spatial_hidden() const;
  std::size_t temporal_hidden() const;

  bool operator==(const ModelConfig&) const = default;
};

// Throws ConfigError on an inconsistent configuration.
void validate(const ModelConfig& config);

// The reduced configuration used for gradient checks and overfit tests.
ModelConfig tiny_config();

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class InitKind { Normal, Zeros, Ones, FrameAverage };

struct SlotSpec {
  std::string name;
  Shape shape;
  InitKind init;
};

// Every learnable slot, in a fixed order, for a configuration.
std::vector<SlotSpec> param_ledger(const ModelConfig& config);
std::size_t param_count(const ModelConfig& config);

struct ParamSlot {
  std::string name;
  Array value;
};

class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(std::vector<ParamSlot> slots);

  const Array& at(std::string_view name) const;
  Array& at(std::string_view name);
  bool contains(std::string_view name) const;

  std::vector<ParamSlot>& slots() { return slots_; }
  const std::vector<ParamSlot>& slots() const { return slots_; }
  std::size_t count() const;

  bool operator==(const ModelParams& o) const;

 private:
  void reindex();

  std::vector<ParamSlot> slots_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr double kInitStd = 0.02;

// Normal(0, 0.02) weights, zero biases and positions, unit norm gains.
// Each slot draws from its own stream keyed by (seed, name), so slots that
// two configurations share start from identical values.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Checks that params hold exactly the ledger of config.
void check_params(const ModelParams& params, const ModelConfig& config);

// Parameters registered as leaves of one graph.
class BoundParams {
 public:
  BoundParams(Graph& graph, const ModelParams& params, bool requires_grad);
  // Wraps existing leaves, e.g. the ones a finite-difference check creates.
  BoundParams(Graph& graph, const std::vector<std::string>& names,
              const std::vector<Tensor>& tensors);

  Graph& graph() const { return *graph_; }
  Tensor operator[](std::string_view name) const;
  const std::vector<std::pair<std::string, Tensor>>& all() const { return tensors_; }

 private:
  Graph* graph_;
  std::vector<std::pair<std::string, Tensor>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---- stages -----------------------------------------------------------------
// Row counts: N frames of J joints enter as (N*J) x 2; windows are F rows.

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor embed_joints(const BoundParams& p, const ModelConfig& c, const Tensor& coords);

// Self-attention within every segment of `tokens` rows. `prefix` names the
// slots prefix.wq, prefix.bq, prefix.wk, prefix.wv, prefix.bv, prefix.wo,
// prefix.bo.
Tensor multi_head_attention(const BoundParams& p, std::string_view prefix, const Tensor& z,
                            std::size_t tokens, std::size_t heads, AttentionScale scale);

Tensor cji(const BoundParams& p, std::string_view prefix, const ModelConfig& c,
           const Tensor& z);
Tensor spatial_block(const BoundParams& p, std::size_t layer, const ModelConfig& c,
                     const Tensor& z);
Tensor spatial_stage(const BoundParams& p, const ModelConfig& c, const Tensor& coords);

Tensor cfi(const BoundParams& p, std::string_view prefix, const ModelConfig& c,
           const Tensor& z);
Tensor temporal_block(const BoundParams& p, std::size_t layer, const ModelConfig& c,
                      const Tensor& z);

// (B*F) x C_t -> (B*J) x 3, before output_scale.
Tensor regression_head(const BoundParams& p, const ModelConfig& c, const Tensor& z);

// (B*F*J) x 2 -> (B*J) x 3 in output units (millimetres by default).
Tensor forward(const BoundParams& p, const ModelConfig& c, const Tensor& coords);

// Inference without gradients: inputs {B, F, J, 2} -> {B, J, 3}.
Array predict(const ModelParams& params, const ModelConfig& config, const Array& inputs);

}  // namespace crossformer
