#include "crossformer/model.hpp"

#include <cmath>
#include <random>
#include <utility>

#include "crossformer/error.hpp"

namespace crossformer {

// ---- config -----------------------------------------------------------------

std::size_t ModelConfig::spatial_hidden() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(spatial_dim)));
}

std::size_t ModelConfig::temporal_hidden() const {
  return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(temporal_dim())));
}

void validate(const ModelConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.num_joints == 0) fail("num_joints must be positive");
  if (c.frames == 0 || c.frames % 2 == 0) {
    fail("frames must be odd so a centre frame exists, got " + std::to_string(c.frames));
  }
  if (c.spatial_dim == 0) fail("spatial_dim must be positive");
  if (c.heads == 0) fail("heads must be positive");
  if (c.spatial_dim % c.heads != 0) {
    fail("spatial_dim " + std::to_string(c.spatial_dim) + " not divisible by " +
         std::to_string(c.heads) + " heads");
  }
  if (c.temporal_dim() % c.heads != 0) {
    fail("temporal_dim " + std::to_string(c.temporal_dim()) + " not divisible by " +
         std::to_string(c.heads) + " heads");
  }
  if (!(c.mlp_ratio > 0.0) || c.spatial_hidden() == 0) fail("mlp_ratio must be positive");
  if (c.cji_kernel == 0 || c.cji_kernel % 2 == 0) fail("cji_kernel must be odd");
  if (c.groupnorm_groups == 0 || c.spatial_dim % c.groupnorm_groups != 0 ||
      c.temporal_dim() % c.groupnorm_groups != 0) {
    fail("groupnorm_groups " + std::to_string(c.groupnorm_groups) +
         " must divide spatial_dim and temporal_dim");
  }
  if (!(c.norm_eps > 0.0)) fail("norm_eps must be positive");
  if (!std::isfinite(c.output_scale) || c.output_scale == 0.0) fail("output_scale must be finite and non-zero");
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.num_joints = 3;
  c.frames = 3;
  c.spatial_dim = 4;
  c.spatial_layers = 1;
  c.temporal_layers = 1;
  c.heads = 2;
  return c;
}

namespace {

const char* to_string(AttentionScale s) {
  return s == AttentionScale::PerHeadDim ? "per_head_dim" : "token_count";
}

const char* to_string(CfiProjection p) {
  return p == CfiProjection::PerJoint ? "per_joint" : "full";
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"num_joints", c.num_joints},
      {"frames", c.frames},
      {"spatial_dim", c.spatial_dim},
      {"temporal_dim", c.temporal_dim()},
      {"spatial_layers", c.spatial_layers},
      {"temporal_layers", c.temporal_layers},
      {"heads", c.heads},
      {"mlp_ratio", c.mlp_ratio},
      {"attention_scale", to_string(c.attention_scale)},
      {"cji_enabled", c.cji_enabled},
      {"cfi_enabled", c.cfi_enabled},
      {"spatial_embed_enabled", c.spatial_embed_enabled},
      {"temporal_embed_enabled", c.temporal_embed_enabled},
      {"groupnorm_groups", c.groupnorm_groups},
      {"cji_kernel", c.cji_kernel},
      {"cfi_projection", to_string(c.cfi_projection)},
      {"head_norm_first", c.head_norm_first},
      {"norm_eps", c.norm_eps},
      {"output_scale", c.output_scale},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "num_joints") c.num_joints = value.get<std::size_t>();
      else if (key == "frames") c.frames = value.get<std::size_t>();
      else if (key == "spatial_dim") c.spatial_dim = value.get<std::size_t>();
      else if (key == "temporal_dim") continue;  // derived, checked below
      else if (key == "spatial_layers") c.spatial_layers = value.get<std::size_t>();
      else if (key == "temporal_layers") c.temporal_layers = value.get<std::size_t>();
      else if (key == "heads") c.heads = value.get<std::size_t>();
      else if (key == "mlp_ratio") c.mlp_ratio = value.get<double>();
      else if (key == "attention_scale") {
        const auto s = value.get<std::string>();
        if (s == "per_head_dim") c.attention_scale = AttentionScale::PerHeadDim;
        else if (s == "token_count") c.attention_scale = AttentionScale::TokenCount;
        else throw ConfigError("unknown attention_scale '" + s + "'");
      } else if (key == "cji_enabled") c.cji_enabled = value.get<bool>();
      else if (key == "cfi_enabled") c.cfi_enabled = value.get<bool>();
      else if (key == "spatial_embed_enabled") c.spatial_embed_enabled = value.get<bool>();
      else if (key == "temporal_embed_enabled") c.temporal_embed_enabled = value.get<bool>();
      else if (key == "groupnorm_groups") c.groupnorm_groups = value.get<std::size_t>();
      else if (key == "cji_kernel") c.cji_kernel = value.get<std::size_t>();
      else if (key == "cfi_projection") {
        const auto s = value.get<std::string>();
        if (s == "per_joint") c.cfi_projection = CfiProjection::PerJoint;
        else if (s == "full") c.cfi_projection = CfiProjection::Full;
        else throw ConfigError("unknown cfi_projection '" + s + "'");
      } else if (key == "head_norm_first") c.head_norm_first = value.get<bool>();
      else if (key == "norm_eps") c.norm_eps = value.get<double>();
      else if (key == "output_scale") c.output_scale = value.get<double>();
      else throw ConfigError("unknown model config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  if (j.contains("temporal_dim") && j["temporal_dim"].get<std::size_t>() != c.temporal_dim()) {
    throw ConfigError("temporal_dim must equal num_joints * spatial_dim = " +
                      std::to_string(c.temporal_dim()));
  }
}

// ---- parameter ledger ---------------------------------------------------------

namespace {

void add_norm(std::vector<SlotSpec>& out, const std::string& prefix, std::size_t d) {
  out.push_back({prefix + ".gamma", {d}, InitKind::Ones});
  out.push_back({prefix + ".beta", {d}, InitKind::Zeros});
}

void add_linear(std::vector<SlotSpec>& out, const std::string& prefix, std::size_t in,
                std::size_t outd) {
  out.push_back({prefix + ".weight", {in, outd}, InitKind::Normal});
  out.push_back({prefix + ".bias", {outd}, InitKind::Zeros});
}

// The key projection has no bias: a per-key offset shifts every score of a
// softmax row by the same amount and cannot change the output.
void add_attention(std::vector<SlotSpec>& out, const std::string& prefix, std::size_t d) {
  out.push_back({prefix + ".wq", {d, d}, InitKind::Normal});
  out.push_back({prefix + ".bq", {d}, InitKind::Zeros});
  out.push_back({prefix + ".wk", {d, d}, InitKind::Normal});
  out.push_back({prefix + ".wv", {d, d}, InitKind::Normal});
  out.push_back({prefix + ".bv", {d}, InitKind::Zeros});
  out.push_back({prefix + ".wo", {d, d}, InitKind::Normal});
  out.push_back({prefix + ".bo", {d}, InitKind::Zeros});
}

void add_mlp(std::vector<SlotSpec>& out, const std::string& prefix, std::size_t d,
             std::size_t hidden) {
  add_linear(out, prefix + ".fc1", d, hidden);
  add_linear(out, prefix + ".fc2", hidden, d);
}

}  // namespace

std::vector<SlotSpec> param_ledger(const ModelConfig& c) {
  validate(c);
  const std::size_t J = c.num_joints, D = c.spatial_dim, Ct = c.temporal_dim(), F = c.frames;
  std::vector<SlotSpec> out;
  add_linear(out, "embed", 2, D);
  if (c.spatial_embed_enabled) out.push_back({"spatial_pos", {J, D}, InitKind::Zeros});
  for (std::size_t l = 0; l < c.spatial_layers; ++l) {
    const std::string p = "spatial." + std::to_string(l);
    add_norm(out, p + ".norm1", D);
    add_attention(out, p + ".attn", D);
    if (c.cji_enabled) {
      out.push_back({p + ".cji.conv1.kernel", {D, c.cji_kernel}, InitKind::Normal});
      out.push_back({p + ".cji.conv1.bias", {D}, InitKind::Zeros});
      add_norm(out, p + ".cji.gn", D);
      out.push_back({p + ".cji.conv2.kernel", {D, c.cji_kernel}, InitKind::Normal});
      out.push_back({p + ".cji.conv2.bias", {D}, InitKind::Zeros});
    }
    add_norm(out, p + ".norm2", D);
    add_mlp(out, p + ".mlp", D, c.spatial_hidden());
    add_norm(out, p + ".norm_out", D);
  }
  if (c.temporal_embed_enabled) out.push_back({"temporal_pos", {F, Ct}, InitKind::Zeros});
  const std::size_t cfi_width = c.cfi_projection == CfiProjection::PerJoint ? D : Ct;
  for (std::size_t l = 0; l < c.temporal_layers; ++l) {
    const std::string p = "temporal." + std::to_string(l);
    add_norm(out, p + ".norm1", Ct);
    add_attention(out, p + ".attn", Ct);
    if (c.cfi_enabled) {
      out.push_back({p + ".cfi.wk", {cfi_width, cfi_width}, InitKind::Normal});
      out.push_back({p + ".cfi.wq", {cfi_width, cfi_width}, InitKind::Normal});
      out.push_back({p + ".cfi.wv", {cfi_width, cfi_width}, InitKind::Normal});
      add_linear(out, p + ".cfi.proj", Ct, Ct);
      add_norm(out, p + ".cfi.gn", Ct);
    }
    add_norm(out, p + ".norm2", Ct);
    add_mlp(out, p + ".mlp", Ct, c.temporal_hidden());
    add_norm(out, p + ".norm_out", Ct);
  }
  out.push_back({"head.frame_weights", {F}, InitKind::FrameAverage});
  add_norm(out, "head.norm", c.head_norm_first ? Ct : J * 3);
  add_linear(out, "head.proj", Ct, J * 3);
  return out;
}

std::size_t param_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& s : param_ledger(config)) n += shape_size(s.shape);
  return n;
}

// ---- ModelParams ----------------------------------------------------------

ModelParams::ModelParams(std::vector<ParamSlot> slots) : slots_(std::move(slots)) { reindex(); }

void ModelParams::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (!index_.emplace(slots_[i].name, i).second) {
      throw ValidationError("duplicate parameter slot '" + slots_[i].name + "'");
    }
  }
}

const Array& ModelParams::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("no parameter slot '" + std::string(name) + "'");
  return slots_[it->second].value;
}

Array& ModelParams::at(std::string_view name) {
  return const_cast<Array&>(std::as_const(*this).at(name));
}

bool ModelParams::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const auto& s : slots_) n += s.value.size();
  return n;
}

bool ModelParams::operator==(const ModelParams& o) const {
  if (slots_.size() != o.slots_.size()) return false;
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i].name != o.slots_[i].name || !(slots_[i].value == o.slots_[i].value)) {
      return false;
    }
  }
  return true;
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  std::vector<ParamSlot> slots;
  for (const auto& spec : param_ledger(config)) {
    Array a(spec.shape);
    switch (spec.init) {
      case InitKind::Zeros: break;
      case InitKind::Ones: std::fill(a.data.begin(), a.data.end(), 1.0); break;
      case InitKind::FrameAverage:
        std::fill(a.data.begin(), a.data.end(), 1.0 / static_cast<double>(a.size()));
        break;
      case InitKind::Normal: {
        std::mt19937_64 rng(seed ^ fnv1a(spec.name));
        std::normal_distribution<double> dist(0.0, kInitStd);
        for (double& v : a.data) v = dist(rng);
        break;
      }
    }
    slots.push_back({spec.name, std::move(a)});
  }
  return ModelParams(std::move(slots));
}

void check_params(const ModelParams& params, const ModelConfig& config) {
  const auto ledger = param_ledger(config);
  if (ledger.size() != params.slots().size()) {
    throw ValidationError("parameter set has " + std::to_string(params.slots().size()) +
                          " slots, configuration expects " + std::to_string(ledger.size()));
  }
  for (std::size_t i = 0; i < ledger.size(); ++i) {
    const auto& slot = params.slots()[i];
    if (slot.name != ledger[i].name || slot.value.shape != ledger[i].shape) {
      throw ValidationError("parameter slot " + std::to_string(i) + " is '" + slot.name + "' " +
                            shape_str(slot.value.shape) + ", expected '" + ledger[i].name +
                            "' " + shape_str(ledger[i].shape));
    }
  }
}

// ---- BoundParams ------------------------------------------------------------

BoundParams::BoundParams(Graph& graph, const ModelParams& params, bool requires_grad)
    : graph_(&graph) {
  tensors_.reserve(params.slots().size());
  for (const auto& s : params.slots()) {
    index_.emplace(s.name, tensors_.size());
    tensors_.emplace_back(s.name, graph.leaf(s.value, requires_grad));
  }
}

BoundParams::BoundParams(Graph& graph, const std::vector<std::string>& names,
                         const std::vector<Tensor>& tensors)
    : graph_(&graph) {
  if (names.size() != tensors.size()) throw ShapeError("BoundParams: names and tensors differ in count");
  for (std::size_t i = 0; i < names.size(); ++i) {
    index_.emplace(names[i], tensors_.size());
    tensors_.emplace_back(names[i], tensors[i]);
  }
}

Tensor BoundParams::operator[](std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("no parameter slot '" + std::string(name) + "'");
  return tensors_[it->second].second;
}

// ---- stages -------------------------------------------------------------------

namespace {

std::string cat(std::string_view a, std::string_view b) {
  std::string s(a);
  s += b;
  return s;
}

Tensor norm(const BoundParams& p, std::string_view prefix, const Tensor& z, double eps) {
  return layer_norm(z, p[cat(prefix, ".gamma")], p[cat(prefix, ".beta")], eps);
}

Tensor mlp(const BoundParams& p, std::string_view prefix, const Tensor& z) {
  Tensor h = gelu(linear(z, p[cat(prefix, ".fc1.weight")], p[cat(prefix, ".fc1.bias")]));
  return linear(h, p[cat(prefix, ".fc2.weight")], p[cat(prefix, ".fc2.bias")]);
}

// Channel-mixing group norm for token-major rows: transposes so that the
// segments of `tokens` rows become positions.
Tensor token_group_norm(const BoundParams& p, std::string_view prefix, const ModelConfig& c,
                        const Tensor& z, std::size_t tokens) {
  Tensor t = group_norm(transpose(z), c.groupnorm_groups, p[cat(prefix, ".gamma")],
                        p[cat(prefix, ".beta")], c.norm_eps, tokens);
  return transpose(t);
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_tiled(matmul(x, weight), bias);
}

Tensor embed_joints(const BoundParams& p, const ModelConfig& c, const Tensor& coords) {
  if (coords.cols() != 2 || coords.rows() % c.num_joints != 0) {
    throw ShapeError("embed_joints: input " + shape_str(coords.shape()) + " is not (N*" +
                     std::to_string(c.num_joints) + ")x2");
  }
  Tensor z = linear(coords, p["embed.weight"], p["embed.bias"]);
  if (c.spatial_embed_enabled) z = add_tiled(z, p["spatial_pos"]);
  return z;
}

Tensor multi_head_attention(const BoundParams& p, std::string_view prefix, const Tensor& z,
                            std::size_t tokens, std::size_t heads, AttentionScale scale_mode) {
  const std::size_t dm = z.cols();
  if (heads == 0 || dm % heads != 0) {
    throw ShapeError("multi_head_attention: width " + std::to_string(dm) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = dm / heads;
  const double s = scale_mode == AttentionScale::PerHeadDim
                       ? std::sqrt(static_cast<double>(dh))
                       : std::sqrt(static_cast<double>(tokens));
  Tensor q = linear(z, p[cat(prefix, ".wq")], p[cat(prefix, ".bq")]);
  Tensor k = matmul(z, p[cat(prefix, ".wk")]);
  Tensor v = linear(z, p[cat(prefix, ".wv")], p[cat(prefix, ".bv")]);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? q : col_slice(q, h * dh, dh);
    Tensor kh = heads == 1 ? k : col_slice(k, h * dh, dh);
    Tensor vh = heads == 1 ? v : col_slice(v, h * dh, dh);
    Tensor attn = softmax_rows(scale(block_matmul_nt(qh, kh, tokens), 1.0 / s));
    outs.push_back(block_matmul(attn, vh, tokens));
  }
  Tensor merged = heads == 1 ? outs[0] : concat_cols(outs);
  return linear(merged, p[cat(prefix, ".wo")], p[cat(prefix, ".bo")]);
}

Tensor cji(const BoundParams& p, std::string_view prefix, const ModelConfig& c, const Tensor& z) {
  const std::size_t J = c.num_joints;
  Tensor t = transpose(z);  // D x (N*J), joints run along the positions
  t = depthwise_conv1d(t, p[cat(prefix, ".conv1.kernel")], p[cat(prefix, ".conv1.bias")], J);
  t = gelu(t);
  t = group_norm(t, c.groupnorm_groups, p[cat(prefix, ".gn.gamma")], p[cat(prefix, ".gn.beta")],
                 c.norm_eps, J);
  t = depthwise_conv1d(t, p[cat(prefix, ".conv2.kernel")], p[cat(prefix, ".conv2.bias")], J);
  return add(transpose(t), z);
}

Tensor spatial_block(const BoundParams& p, std::size_t layer, const ModelConfig& c,
                     const Tensor& z) {
  const std::string pre = "spatial." + std::to_string(layer);
  Tensor x = add(multi_head_attention(p, pre + ".attn", norm(p, pre + ".norm1", z, c.norm_eps),
                                      c.num_joints, c.heads, c.attention_scale),
                 z);
  if (c.cji_enabled) x = cji(p, pre + ".cji", c, x);
  x = add(mlp(p, pre + ".mlp", norm(p, pre + ".norm2", x, c.norm_eps)), x);
  return norm(p, pre + ".norm_out", x, c.norm_eps);
}

Tensor spatial_stage(const BoundParams& p, const ModelConfig& c, const Tensor& coords) {
  Tensor z = embed_joints(p, c, coords);
  for (std::size_t l = 0; l < c.spatial_layers; ++l) z = spatial_block(p, l, c, z);
  return z;
}

namespace {

Tensor cfi_project(const Tensor& z, const Tensor& w, const ModelConfig& c) {
  if (c.cfi_projection == CfiProjection::Full) return matmul(z, w);
  const std::size_t rows = z.rows();
  Tensor per_joint = reshape(z, {rows * c.num_joints, c.spatial_dim});
  return reshape(matmul(per_joint, w), {rows, c.temporal_dim()});
}

}  // namespace

Tensor cfi(const BoundParams& p, std::string_view prefix, const ModelConfig& c, const Tensor& z) {
  const std::size_t F = c.frames;
  Tensor k = cfi_project(z, p[cat(prefix, ".wk")], c);
  Tensor q = cfi_project(z, p[cat(prefix, ".wq")], c);
  Tensor v = cfi_project(z, p[cat(prefix, ".wv")], c);
  // Frame-pair bilinear scores, no softmax.
  Tensor corr = scale(block_matmul_nt(k, q, F), 1.0 / static_cast<double>(c.temporal_dim()));
  Tensor mixed = block_matmul(corr, v, F);
  Tensor y = linear(mixed, p[cat(prefix, ".proj.weight")], p[cat(prefix, ".proj.bias")]);
  return add(token_group_norm(p, cat(prefix, ".gn"), c, y, F), z);
}

Tensor temporal_block(const BoundParams& p, std::size_t layer, const ModelConfig& c,
                      const Tensor& z) {
  const std::string pre = "temporal." + std::to_string(layer);
  Tensor x = add(multi_head_attention(p, pre + ".attn", norm(p, pre + ".norm1", z, c.norm_eps),
                                      c.frames, c.heads, c.attention_scale),
                 z);
  if (c.cfi_enabled) x = cfi(p, pre + ".cfi", c, x);
  x = add(mlp(p, pre + ".mlp", norm(p, pre + ".norm2", x, c.norm_eps)), x);
  return norm(p, pre + ".norm_out", x, c.norm_eps);
}

Tensor regression_head(const BoundParams& p, const ModelConfig& c, const Tensor& z) {
  if (z.cols() != c.temporal_dim() || z.rows() % c.frames != 0) {
    throw ShapeError("regression_head: input " + shape_str(z.shape()) + " is not (B*" +
                     std::to_string(c.frames) + ")x" + std::to_string(c.temporal_dim()));
  }
  Tensor pooled = weighted_pool(z, p["head.frame_weights"]);
  Tensor out;
  if (c.head_norm_first) {
    out = linear(norm(p, "head.norm", pooled, c.norm_eps), p["head.proj.weight"],
                 p["head.proj.bias"]);
  } else {
    out = norm(p, "head.norm", linear(pooled, p["head.proj.weight"], p["head.proj.bias"]),
               c.norm_eps);
  }
  return reshape(out, {out.rows() * c.num_joints, 3});
}

Tensor forward(const BoundParams& p, const ModelConfig& c, const Tensor& coords) {
  const std::size_t window_rows = c.frames * c.num_joints;
  if (coords.shape().size() != 2 || coords.cols() != 2 || coords.rows() == 0 ||
      coords.rows() % window_rows != 0) {
    throw ShapeError("forward: input " + shape_str(coords.shape()) + " is not (B*" +
                     std::to_string(c.frames) + "*" + std::to_string(c.num_joints) + ")x2");
  }
  const std::size_t frames_total = coords.rows() / c.num_joints;
  Tensor z = spatial_stage(p, c, coords);
  z = reshape(z, {frames_total, c.temporal_dim()});
  if (c.temporal_embed_enabled) z = add_tiled(z, p["temporal_pos"]);
  for (std::size_t l = 0; l < c.temporal_layers; ++l) z = temporal_block(p, l, c, z);
  Tensor out = regression_head(p, c, z);
  return c.output_scale == 1.0 ? out : scale(out, c.output_scale);
}

Array predict(const ModelParams& params, const ModelConfig& config, const Array& inputs) {
  if (inputs.shape.size() != 4 || inputs.shape[1] != config.frames ||
      inputs.shape[2] != config.num_joints || inputs.shape[3] != 2) {
    throw ShapeError("predict: inputs " + shape_str(inputs.shape) + " are not {B, " +
                     std::to_string(config.frames) + ", " + std::to_string(config.num_joints) +
                     ", 2}");
  }
  const std::size_t B = inputs.shape[0];
  Graph g;
  g.set_grad_enabled(false);
  BoundParams bound(g, params, false);
  Tensor x = g.constant(Array({B * config.frames * config.num_joints, 2}, inputs.data));
  Tensor y = forward(bound, config, x);
  return Array({B, config.num_joints, 3}, std::vector<double>(y.data().begin(), y.data().end()));
}

}  // namespace crossformer
