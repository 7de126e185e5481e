#include "crossformer/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "crossformer/checkpoint.hpp"
#include "crossformer/error.hpp"

namespace crossformer {

// ---- config -----------------------------------------------------------------

void validate(const TrainConfig& c) {
  validate(c.model);
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.batch_size == 0) fail("batch_size must be at least 1");
  if (!(c.lr_decay > 0.0 && c.lr_decay <= 1.0)) fail("lr_decay must be in (0, 1]");
  if (!(c.lr0 >= 0.0) || !std::isfinite(c.lr0)) fail("lr0 must be finite and non-negative");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0)) fail("adam_beta1 must be in [0, 1)");
  if (!(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0)) fail("adam_beta2 must be in [0, 1)");
  if (!(c.adam_eps > 0.0)) fail("adam_eps must be positive");
  if (c.workers == 0) fail("workers must be at least 1");
  if (!(c.holdout_fraction >= 0.0 && c.holdout_fraction < 1.0)) fail("holdout_fraction must be in [0, 1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr0", c.lr0},
                     {"lr_decay", c.lr_decay},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"seed", c.seed},
                     {"flip_augment", c.flip_augment},
                     {"workers", c.workers},
                     {"max_steps", c.max_steps},
                     {"frozen_slots", c.frozen_slots},
                     {"train_data", c.train_data},
                     {"eval_data", c.eval_data},
                     {"holdout_fraction", c.holdout_fraction}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "model") value.get_to(c.model);
      else if (key == "epochs") c.epochs = value.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
      else if (key == "lr0") c.lr0 = value.get<double>();
      else if (key == "lr_decay") c.lr_decay = value.get<double>();
      else if (key == "adam_beta1") c.adam_beta1 = value.get<double>();
      else if (key == "adam_beta2") c.adam_beta2 = value.get<double>();
      else if (key == "adam_eps") c.adam_eps = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "flip_augment") c.flip_augment = value.get<bool>();
      else if (key == "workers") c.workers = value.get<std::size_t>();
      else if (key == "max_steps") c.max_steps = value.get<std::size_t>();
      else if (key == "frozen_slots") c.frozen_slots = value.get<std::vector<std::string>>();
      else if (key == "train_data") c.train_data = value.get<std::string>();
      else if (key == "eval_data") c.eval_data = value.get<std::string>();
      else if (key == "holdout_fraction") c.holdout_fraction = value.get<double>();
      else throw ConfigError("unknown train config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

double lr_at(std::size_t epoch, const TrainConfig& c) {
  return c.lr0 * std::pow(c.lr_decay, static_cast<double>(epoch));
}

// ---- optimizer ------------------------------------------------------------------

AdamState make_adam_state(const ModelParams& params) {
  AdamState s;
  for (const auto& slot : params.slots()) {
    s.m.emplace_back(slot.value.shape);
    s.v.emplace_back(slot.value.shape);
  }
  return s;
}

void adam_step(ModelParams& params, const std::vector<Array>& grads, AdamState& state, double lr,
               const TrainConfig& c, const std::vector<bool>& frozen) {
  auto& slots = params.slots();
  if (grads.size() != slots.size() || state.m.size() != slots.size() || state.v.size() != slots.size() ||
      (!frozen.empty() && frozen.size() != slots.size())) {
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  auto is_frozen = [&](std::size_t i) { return !frozen.empty() && frozen[i]; };
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (is_frozen(i)) continue;
    if (grads[i].shape != slots[i].value.shape || state.m[i].shape != slots[i].value.shape) {
      throw ShapeError("adam_step: slot '" + slots[i].name + "' has mismatched gradient or state");
    }
    for (double g : grads[i].data)
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in slot '" + slots[i].name + "'");
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(c.adam_beta1, t), c2 = 1.0 - std::pow(c.adam_beta2, t);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (is_frozen(i)) continue;
    auto& p = slots[i].value.data;
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    const auto& g = grads[i].data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = c.adam_beta1 * m[k] + (1.0 - c.adam_beta1) * g[k];
      v[k] = c.adam_beta2 * v[k] + (1.0 - c.adam_beta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + c.adam_eps);
    }
  }
}

Tensor mpjpe_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape() || pred.cols() != 3) {
    throw ShapeError("mpjpe_loss: " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  }
  return mean(row_norms(sub(pred, gt)));
}

// ---- batching -------------------------------------------------------------------

Array stack_inputs(const std::vector<const PoseWindow*>& windows) {
  if (windows.empty()) throw ShapeError("stack_inputs: no windows");
  const Shape& s = windows[0]->frames_2d.shape;
  Array out({windows.size(), s[0], s[1], s[2]});
  std::size_t at = 0;
  for (const auto* w : windows) {
    if (w->frames_2d.shape != s) throw ShapeError("stack_inputs: windows differ in shape");
    std::copy(w->frames_2d.data.begin(), w->frames_2d.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(at));
    at += w->frames_2d.size();
  }
  return out;
}

Array stack_targets(const std::vector<const PoseWindow*>& windows) {
  if (windows.empty()) throw ShapeError("stack_targets: no windows");
  const std::size_t J = windows[0]->target_3d.shape[0];
  Array out({windows.size() * J, 3});
  std::size_t at = 0;
  for (const auto* w : windows) {
    if (w->target_3d.shape != Shape{J, 3}) throw ShapeError("stack_targets: windows differ in shape");
    std::copy(w->target_3d.data.begin(), w->target_3d.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(at));
    at += w->target_3d.size();
  }
  return out;
}

namespace {

Array pose_of(const Array& poses, std::size_t b) {
  const std::size_t J = poses.shape[1];
  Array out({J, 3});
  std::copy_n(poses.data.begin() + static_cast<std::ptrdiff_t>(b * J * 3), J * 3, out.data.begin());
  return out;
}

void check_windows(const std::vector<PoseWindow>& windows, const ModelConfig& c, const char* what) {
  for (const auto& w : windows) {
    if (w.frames_2d.shape != Shape{c.frames, c.num_joints, 2} || w.target_3d.shape != Shape{c.num_joints, 3}) {
      throw ConfigError(std::string(what) + " window of '" + w.record_id + "' has shape " +
                        shape_str(w.frames_2d.shape) + ", model expects {" + std::to_string(c.frames) +
                        ", " + std::to_string(c.num_joints) + ", 2}");
    }
  }
}

}  // namespace

double mean_mpjpe(const ModelParams& params, const ModelConfig& config,
                  const std::vector<PoseWindow>& windows, std::size_t batch_size) {
  if (windows.empty()) throw ConfigError("mean_mpjpe: no windows");
  double total = 0.0;
  for (std::size_t start = 0; start < windows.size(); start += batch_size) {
    std::vector<const PoseWindow*> batch;
    for (std::size_t i = start; i < std::min(windows.size(), start + batch_size); ++i) batch.push_back(&windows[i]);
    const Array pred = predict(params, config, stack_inputs(batch));
    for (std::size_t b = 0; b < batch.size(); ++b) total += mpjpe(pose_of(pred, b), batch[b]->target_3d);
  }
  return total / static_cast<double>(windows.size());
}

// ---- training -------------------------------------------------------------------

namespace {

struct Partial {
  double loss = 0.0;
  std::vector<Array> grads;
};

// Loss and gradient contribution of `chunk`, normalized by the row count of
// the whole batch so that partials sum to the batch mean.
Partial chunk_gradients(const ModelParams& params, const ModelConfig& config,
                        const std::vector<bool>& frozen, const std::vector<const PoseWindow*>& chunk,
                        std::size_t batch_rows) {
  Graph g;
  std::vector<std::string> names;
  std::vector<Tensor> leaves;
  for (std::size_t i = 0; i < params.slots().size(); ++i) {
    names.push_back(params.slots()[i].name);
    leaves.push_back(g.leaf(params.slots()[i].value, !frozen[i]));
  }
  BoundParams bound(g, names, leaves);
  Array inputs = stack_inputs(chunk);
  inputs.shape = {inputs.size() / 2, 2};
  Tensor pred = forward(bound, config, g.constant(std::move(inputs)));
  Tensor dist = row_norms(sub(pred, g.constant(stack_targets(chunk))));
  Tensor loss = scale(sum(dist), 1.0 / static_cast<double>(batch_rows));
  Partial out;
  out.loss = loss.item();
  if (!std::isfinite(out.loss)) return out;
  g.backward(loss);
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    if (frozen[i]) {
      out.grads.emplace_back(params.slots()[i].value.shape);
    } else {
      out.grads.emplace_back(params.slots()[i].value.shape,
                             std::vector<double>(leaves[i].grad().begin(), leaves[i].grad().end()));
    }
  }
  return out;
}

Partial batch_gradients(const ModelParams& params, const TrainConfig& c, const std::vector<bool>& frozen,
                        const std::vector<const PoseWindow*>& batch) {
  const std::size_t rows = batch.size() * c.model.num_joints;
  const std::size_t workers = std::min(c.workers, batch.size());
  if (workers <= 1) return chunk_gradients(params, c.model, frozen, batch, rows);

  std::vector<Partial> partials(workers);
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  const std::size_t per = (batch.size() + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * per, hi = std::min(batch.size(), lo + per);
    if (lo >= hi) continue;
    threads.emplace_back([&, w, lo, hi] {
      try {
        std::vector<const PoseWindow*> chunk(batch.begin() + static_cast<std::ptrdiff_t>(lo),
                                             batch.begin() + static_cast<std::ptrdiff_t>(hi));
        partials[w] = chunk_gradients(params, c.model, frozen, chunk, rows);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  Partial total;
  for (auto& p : partials) {
    if (p.grads.empty() && std::isfinite(p.loss)) continue;  // idle worker
    total.loss += p.loss;
    if (!std::isfinite(p.loss)) return total;
    if (total.grads.empty()) {
      total.grads = std::move(p.grads);
      continue;
    }
    for (std::size_t i = 0; i < total.grads.size(); ++i)
      for (std::size_t k = 0; k < total.grads[i].size(); ++k) total.grads[i].data[k] += p.grads[i].data[k];
  }
  return total;
}

std::vector<bool> frozen_mask(const ModelParams& params, const std::vector<std::string>& patterns) {
  std::vector<bool> mask;
  for (const auto& slot : params.slots()) {
    bool hit = false;
    for (const auto& p : patterns) hit = hit || (!p.empty() && slot.name.find(p) != std::string::npos);
    mask.push_back(hit);
  }
  return mask;
}

}  // namespace

TrainResult train(const TrainConfig& c, const SkeletonSpec& skeleton, ModelParams initial,
                  const std::vector<PoseWindow>& train_windows, const std::vector<PoseWindow>& eval_windows,
                  const TrainSinks& sinks) {
  validate(c);
  check_params(initial, c.model);
  if (train_windows.empty()) throw ConfigError("train: the training set is empty");
  if (skeleton.num_joints != c.model.num_joints) {
    throw ConfigError("train: skeleton has " + std::to_string(skeleton.num_joints) + " joints, model expects " +
                      std::to_string(c.model.num_joints));
  }
  check_windows(train_windows, c.model, "training");
  check_windows(eval_windows, c.model, "evaluation");

  TrainResult result;
  result.params = std::move(initial);
  auto emit = [&](nlohmann::json record) {
    if (sinks.log) sinks.log(record);
    result.log.push_back(std::move(record));
  };
  auto save = [&](std::size_t epoch) {
    if (sinks.checkpoint) {
      save_checkpoint(*sinks.checkpoint, {c.model, result.params, {{"epoch", epoch}, {"steps", result.steps}}});
    }
  };

  const std::vector<bool> frozen = frozen_mask(result.params, c.frozen_slots);
  std::size_t trainable = 0;
  for (std::size_t i = 0; i < frozen.size(); ++i)
    if (!frozen[i]) trainable += result.params.slots()[i].value.size();

  result.initial_train_mpjpe = mean_mpjpe(result.params, c.model, train_windows);
  nlohmann::json init = {{"event", "init"},
                         {"train_mpjpe", result.initial_train_mpjpe},
                         {"params", result.params.count()},
                         {"trainable_params", trainable},
                         {"train_windows", train_windows.size()},
                         {"eval_windows", eval_windows.size()}};
  if (!eval_windows.empty()) init["eval_mpjpe"] = mean_mpjpe(result.params, c.model, eval_windows);
  emit(init);
  save(0);

  std::mt19937_64 rng(c.seed);
  std::bernoulli_distribution coin(0.5);
  AdamState adam = make_adam_state(result.params);
  std::vector<std::size_t> order(train_windows.size());
  bool budget_spent = c.max_steps != 0 && result.steps >= c.max_steps;

  for (std::size_t epoch = 0; epoch < c.epochs && !budget_spent; ++epoch) {
    const double lr = lr_at(epoch, c);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> flip(order.size(), false);
    if (c.flip_augment)
      for (std::size_t i = 0; i < flip.size(); ++i) flip[i] = coin(rng);

    double loss_sum = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += c.batch_size) {
      if (c.max_steps != 0 && result.steps >= c.max_steps) {
        budget_spent = true;
        break;
      }
      const std::size_t end = std::min(order.size(), start + c.batch_size);
      std::vector<PoseWindow> flipped;
      flipped.reserve(end - start);
      std::vector<const PoseWindow*> batch;
      for (std::size_t i = start; i < end; ++i) {
        const PoseWindow& w = train_windows[order[i]];
        if (flip[i]) {
          flipped.push_back(hflip(w, skeleton));
          batch.push_back(&flipped.back());
        } else {
          batch.push_back(&w);
        }
      }
      auto abort = [&](const std::string& reason) {
        emit({{"event", "abort"}, {"epoch", epoch + 1}, {"step", result.steps + 1}, {"reason", reason}});
        throw NumericError(reason + " at step " + std::to_string(result.steps + 1) +
                           "; last good checkpoint retained");
      };
      Partial step;
      try {
        step = batch_gradients(result.params, c, frozen, batch);
        if (std::isfinite(step.loss)) adam_step(result.params, step.grads, adam, lr, c, frozen);
      } catch (const NumericError& e) {
        abort(e.what());
      }
      if (!std::isfinite(step.loss)) abort("non-finite training loss");
      loss_sum += step.loss;
      ++epoch_steps;
      ++result.steps;
    }
    if (epoch_steps == 0) break;
    nlohmann::json record = {{"event", "epoch"},
                             {"epoch", epoch + 1},
                             {"lr", lr},
                             {"steps", result.steps},
                             {"train_loss", loss_sum / static_cast<double>(epoch_steps)}};
    if (!eval_windows.empty()) record["eval_mpjpe"] = mean_mpjpe(result.params, c.model, eval_windows);
    emit(record);
    save(epoch + 1);
  }

  result.final_train_mpjpe = mean_mpjpe(result.params, c.model, train_windows);
  nlohmann::json final_record = {{"event", "final"}, {"steps", result.steps}, {"train_mpjpe", result.final_train_mpjpe}};
  if (!eval_windows.empty()) {
    result.final_eval_mpjpe = mean_mpjpe(result.params, c.model, eval_windows);
    final_record["eval_mpjpe"] = *result.final_eval_mpjpe;
  }
  emit(final_record);
  return result;
}

namespace {

const SkeletonSpec& common_skeleton(const std::vector<SequenceRecord>& records, std::size_t joints) {
  if (records.empty()) throw ConfigError("dataset is empty");
  for (const auto& r : records) {
    if (r.skeleton.num_joints != joints) {
      throw ConfigError("record '" + r.id + "' has " + std::to_string(r.skeleton.num_joints) +
                        " joints, model expects " + std::to_string(joints));
    }
    if (!(r.skeleton == records[0].skeleton)) throw ConfigError("records use different skeletons");
  }
  return records[0].skeleton;
}

}  // namespace

std::vector<PoseWindow> windows_of(const std::vector<SequenceRecord>& records, std::size_t frames) {
  std::vector<PoseWindow> out;
  for (const auto& r : records) {
    auto w = all_windows(r, frames);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

PreparedData prepare_data(const TrainConfig& c) {
  validate(c);
  if (c.train_data.empty()) throw ConfigError("train_data is not set");
  std::vector<SequenceRecord> train_records = load_records(c.train_data), eval_records;
  if (c.eval_data.empty()) {
    std::tie(train_records, eval_records) = split_holdout(std::move(train_records), c.holdout_fraction);
  } else {
    eval_records = load_records(c.eval_data);
  }
  PreparedData out;
  out.skeleton = common_skeleton(train_records, c.model.num_joints);
  if (!eval_records.empty()) common_skeleton(eval_records, c.model.num_joints);
  out.train_windows = windows_of(train_records, c.model.frames);
  out.eval_windows = windows_of(eval_records, c.model.frames);
  return out;
}

TrainResult train_from_files(const TrainConfig& c, const TrainSinks& sinks) {
  const PreparedData data = prepare_data(c);
  return train(c, data.skeleton, init_params(c.model, c.seed), data.train_windows, data.eval_windows, sinks);
}

// ---- evaluation -------------------------------------------------------------------

Predictor flip_ensemble(Predictor base, SkeletonSpec skeleton) {
  return [base = std::move(base), skeleton = std::move(skeleton)](const Array& inputs) {
    Array plain = base(inputs);
    Array mirrored_in = inputs;
    mirror_joints(mirrored_in, skeleton);
    Array back = base(mirrored_in);
    mirror_joints(back, skeleton);
    for (std::size_t i = 0; i < plain.size(); ++i) plain.data[i] = 0.5 * (plain.data[i] + back.data[i]);
    return plain;
  };
}

EvalReport evaluate_predictor(const Predictor& predictor, std::size_t frames,
                              const std::vector<SequenceRecord>& records, const EvalOptions& options) {
  if (options.batch_size == 0 || options.stride == 0) throw ConfigError("evaluate: batch_size and stride must be positive");
  ReportBuilder builder(options.procrustes_scale);
  for (const auto& record : records) {
    validate_record(record);
    std::vector<PoseWindow> windows;
    for (std::size_t centre = 0; centre < record.num_frames(); centre += options.stride)
      windows.push_back(window(record, frames, centre));
    for (std::size_t start = 0; start < windows.size(); start += options.batch_size) {
      std::vector<const PoseWindow*> batch;
      for (std::size_t i = start; i < std::min(windows.size(), start + options.batch_size); ++i)
        batch.push_back(&windows[i]);
      const Array pred = predictor(stack_inputs(batch));
      if (pred.shape != Shape{batch.size(), record.skeleton.num_joints, 3}) {
        throw ShapeError("evaluate: predictor returned " + shape_str(pred.shape));
      }
      for (std::size_t b = 0; b < batch.size(); ++b) builder.add(record.action, pose_of(pred, b), batch[b]->target_3d);
    }
  }
  return builder.finish();
}

EvalReport evaluate(const ModelParams& params, const ModelConfig& config,
                    const std::vector<SequenceRecord>& records, const EvalOptions& options) {
  check_params(params, config);
  const SkeletonSpec& skeleton = common_skeleton(records, config.num_joints);
  Predictor base = [&](const Array& inputs) { return predict(params, config, inputs); };
  return evaluate_predictor(options.flip_ensemble ? flip_ensemble(base, skeleton) : base, config.frames,
                            records, options);
}

// ---- ablation -----------------------------------------------------------------------

ModelConfig AblationVariant::apply(ModelConfig base) const {
  base.cji_enabled = cji;
  base.cfi_enabled = cfi;
  base.spatial_embed_enabled = spatial_embed;
  base.temporal_embed_enabled = temporal_embed;
  if (!spatial_stage) base.spatial_layers = 0;
  if (!temporal_stage) base.temporal_layers = 0;
  return base;
}

std::vector<AblationVariant> default_ablation_variants() {
  auto grid = [](bool cji, bool cfi, bool es, bool et) {
    AblationVariant v;
    v.cji = cji;
    v.cfi = cfi;
    v.spatial_embed = es;
    v.temporal_embed = et;
    std::string name;
    for (auto [on, tag] : {std::pair{cji, "CJI"}, {cfi, "CFI"}, {es, "Es"}, {et, "Et"}})
      if (on) name += (name.empty() ? "" : "+") + std::string(tag);
    v.name = name.empty() ? "none" : name;
    return v;
  };
  std::vector<AblationVariant> out = {
      grid(false, false, false, false), grid(false, false, true, true), grid(true, false, false, false),
      grid(true, false, true, false),   grid(true, false, true, true),  grid(true, true, false, true),
      grid(false, true, false, false),  grid(false, true, false, true), grid(false, true, true, true),
      grid(true, true, true, true)};
  AblationVariant zeroed = grid(true, true, false, false);
  zeroed.name = "CJI0+CFI0";
  zeroed.zeroed_modules = true;
  out.push_back(zeroed);
  AblationVariant s_only = grid(true, false, true, true);
  s_only.name = "spatial-only";
  s_only.temporal_stage = false;
  out.push_back(s_only);
  AblationVariant t_only = grid(false, true, true, true);
  t_only.name = "temporal-only";
  t_only.spatial_stage = false;
  out.push_back(t_only);
  return out;
}

std::vector<AblationRow> ablate(const TrainConfig& base, const std::vector<AblationVariant>& variants,
                                const std::vector<std::uint64_t>& seeds, const SkeletonSpec& skeleton,
                                const std::vector<PoseWindow>& train_windows,
                                const std::vector<PoseWindow>& eval_windows,
                                const std::function<void(const AblationRow&)>& on_row) {
  for (std::size_t i = 0; i < variants.size(); ++i)
    for (std::size_t k = 0; k < i; ++k)
      if (variants[i].name == variants[k].name) throw ConfigError("duplicate ablation variant '" + variants[i].name + "'");
  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds) {
    for (const auto& v : variants) {
      TrainConfig c = base;
      c.model = v.apply(base.model);
      c.seed = seed;
      ModelParams params = init_params(c.model, seed);
      if (v.zeroed_modules) {
        for (auto& slot : params.slots())
          if (slot.name.find(".cji.") != std::string::npos || slot.name.find(".cfi.") != std::string::npos)
            std::fill(slot.value.data.begin(), slot.value.data.end(), 0.0);
        c.frozen_slots.push_back(".cji.");
        c.frozen_slots.push_back(".cfi.");
      }
      const TrainResult r = train(c, skeleton, std::move(params), train_windows, eval_windows);
      AblationRow row;
      row.variant = v.name;
      row.seed = seed;
      row.cji = c.model.cji_enabled && !v.zeroed_modules;
      row.cfi = c.model.cfi_enabled && !v.zeroed_modules;
      row.spatial_embed = c.model.spatial_embed_enabled;
      row.temporal_embed = c.model.temporal_embed_enabled;
      row.spatial_layers = c.model.spatial_layers;
      row.temporal_layers = c.model.temporal_layers;
      row.trainable_params = r.log.front().at("trainable_params").get<std::size_t>();
      const bool has_eval = !eval_windows.empty();
      row.initial_eval_mpjpe = has_eval ? r.log.front().at("eval_mpjpe").get<double>() : r.initial_train_mpjpe;
      row.final_eval_mpjpe = has_eval ? *r.final_eval_mpjpe : r.final_train_mpjpe;
      row.final_train_mpjpe = r.final_train_mpjpe;
      if (on_row) on_row(row);
      rows.push_back(row);
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "variant,seed,cji,cfi,spatial_embed,temporal_embed,spatial_layers,temporal_layers,"
        "trainable_params,initial_eval_mpjpe,final_eval_mpjpe,final_train_mpjpe\n";
  for (const auto& r : rows) {
    os << r.variant << ',' << r.seed << ',' << r.cji << ',' << r.cfi << ',' << r.spatial_embed << ','
       << r.temporal_embed << ',' << r.spatial_layers << ',' << r.temporal_layers << ',' << r.trainable_params
       << ',' << r.initial_eval_mpjpe << ',' << r.final_eval_mpjpe << ',' << r.final_train_mpjpe << '\n';
  }
  return os.str();
}

// ---- gradient check -------------------------------------------------------------------

GradcheckOptions::GradcheckOptions() : model(tiny_config()) { model.output_scale = 1.0; }

nlohmann::json GradcheckReport::to_json() const {
  nlohmann::json slots = nlohmann::json::array();
  for (const auto& [name, err] : per_slot) slots.push_back({{"slot", name}, {"max_rel_error", err}});
  return {{"slots", slots}, {"max_rel_error", max_rel_error}, {"graph_nodes", graph_nodes}, {"passed", passed}};
}

GradcheckReport gradcheck(const GradcheckOptions& o) {
  validate(o.model);
  if (o.batch == 0) throw ConfigError("gradcheck: batch must be positive");
  ModelParams params = init_params(o.model, o.seed);
  std::mt19937_64 rng(o.seed + 0x9e3779b97f4a7c15ull);
  std::uniform_real_distribution<double> noise(-0.3, 0.3), unit(-1.0, 1.0);
  for (auto& slot : params.slots())
    for (double& v : slot.value.data) v += noise(rng);
  Array inputs({o.batch * o.model.frames * o.model.num_joints, 2});
  for (double& v : inputs.data) v = unit(rng);
  Array targets({o.batch * o.model.num_joints, 3});
  for (double& v : targets.data) v = unit(rng);

  std::vector<std::string> names;
  std::vector<Array> values;
  for (const auto& slot : params.slots()) {
    names.push_back(slot.name);
    values.push_back(slot.value);
  }
  auto loss = [&](Graph& g, const std::vector<Tensor>& leaves) {
    BoundParams bound(g, names, leaves);
    return mpjpe_loss(forward(bound, o.model, g.constant(inputs)), g.constant(targets));
  };

  GradcheckReport report;
  {
    Graph g;
    std::vector<Tensor> leaves;
    for (const auto& v : values) leaves.push_back(g.leaf(v, true));
    loss(g, leaves);
    report.graph_nodes = g.size();
  }
  if (report.graph_nodes > o.max_nodes) {
    throw ConfigError("gradcheck: graph has " + std::to_string(report.graph_nodes) + " nodes, limit " +
                      std::to_string(o.max_nodes) + "; use a smaller configuration");
  }
  const FiniteDiffReport fd = finite_diff_check(loss, values, o.eps, o.fault);
  for (std::size_t i = 0; i < names.size(); ++i) report.per_slot.emplace_back(names[i], fd.per_param[i]);
  report.max_rel_error = fd.max_rel_error;
  report.passed = fd.max_rel_error < o.tolerance;
  return report;
}

}  // namespace crossformer
