// crossformer: train, evaluate, ablate, gradient-check, synthesize data and
// inspect configurations. Logs and reports go to stdout as JSON lines;
// failures print one JSON error record on stderr and exit nonzero.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "crossformer/checkpoint.hpp"
#include "crossformer/error.hpp"
#include "crossformer/train.hpp"

using namespace crossformer;
using nlohmann::json;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

void print_line(std::ostream& out, const json& j) { out << j.dump() << '\n' << std::flush; }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path + "'");
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("'" + path + "': " + e.what());
  }
}

// key.path=value with value parsed as JSON, or taken as a string otherwise.
void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  std::string pointer = "/" + key;
  for (char& ch : pointer)
    if (ch == '.') ch = '/';
  config[json::json_pointer(pointer)] = value;
}

struct ConfigArgs {
  std::string file;
  std::vector<std::string> overrides;
  std::optional<std::string> train_data, eval_data;
  std::optional<std::size_t> epochs, batch_size, workers, max_steps;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  bool no_flip = false;

  void add_to(CLI::App* app) {
    app->add_option("-c,--config", file, "Train config JSON file");
    app->add_option("--set", overrides, "Override a config key, e.g. model.frames=27")->take_all();
    app->add_option("--train-data", train_data, "Training records (JSON lines)");
    app->add_option("--eval-data", eval_data, "Evaluation records; default holds out part of train data");
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size);
    app->add_option("--lr", lr, "Initial learning rate");
    app->add_option("--seed", seed);
    app->add_option("--workers", workers);
    app->add_option("--max-steps", max_steps);
    app->add_flag("--no-flip", no_flip, "Disable flip augmentation");
  }

  TrainConfig resolve() const {
    json j = file.empty() ? json(TrainConfig{}) : read_json_file(file);
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    // Derived from num_joints and spatial_dim; only checked when given explicitly.
    if (file.empty()) j["model"].erase("temporal_dim");
    for (const auto& o : overrides) apply_override(j, o);
    TrainConfig c = j.get<TrainConfig>();
    if (train_data) c.train_data = *train_data;
    if (eval_data) c.eval_data = *eval_data;
    if (epochs) c.epochs = *epochs;
    if (batch_size) c.batch_size = *batch_size;
    if (lr) c.lr0 = *lr;
    if (seed) c.seed = *seed;
    if (workers) c.workers = *workers;
    if (max_steps) c.max_steps = *max_steps;
    if (no_flip) c.flip_augment = false;
    validate(c);
    return c;
  }
};

SkeletonSpec parse_skeleton(const std::string& name) {
  if (name == "h36m") return SkeletonSpec::h36m();
  if (name == "tiny") return SkeletonSpec::tiny();
  try {
    std::size_t used = 0;
    const std::size_t j = std::stoul(name, &used);
    if (used == name.size()) return SkeletonSpec::generic(j);
  } catch (const std::exception&) {
  }
  throw ConfigError("unknown skeleton '" + name + "'; use h36m, tiny or a joint count");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

int run_train(const ConfigArgs& args, const std::string& checkpoint, const std::string& log_path) {
  const TrainConfig c = args.resolve();
  std::ofstream log_file;
  if (!log_path.empty()) {
    log_file.open(log_path, std::ios::trunc);
    if (!log_file) throw IoError("cannot write '" + log_path + "'");
  }
  TrainSinks sinks;
  sinks.log = [&](const json& j) {
    print_line(std::cout, j);
    if (log_file.is_open()) print_line(log_file, j);
  };
  if (!checkpoint.empty()) sinks.checkpoint = checkpoint;
  print_line(std::cout, {{"event", "config"}, {"config", c}});
  train_from_files(c, sinks);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, csv, json_out;
  bool no_flip = false, rigid = false;
  std::size_t stride = 1, batch = 64;
};

int run_eval(const EvalArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  EvalOptions o;
  o.flip_ensemble = !a.no_flip;
  o.procrustes_scale = !a.rigid;
  o.stride = a.stride;
  o.batch_size = a.batch;
  const EvalReport report = evaluate(ckpt.params, ckpt.config, load_records(a.data), o);
  if (!a.csv.empty()) write_text(a.csv, report.to_csv());
  if (!a.json_out.empty()) write_text(a.json_out, report.to_json().dump(2) + "\n");
  print_line(std::cout, {{"event", "eval"}, {"report", report.to_json()}});
  return 0;
}

struct AblateArgs {
  std::string seeds = "0,1,2";
  std::string variants;
  std::string out;
};

int run_ablate(const ConfigArgs& config_args, const AblateArgs& a) {
  const TrainConfig c = config_args.resolve();
  const PreparedData data = prepare_data(c);
  std::vector<AblationVariant> chosen;
  const auto all = default_ablation_variants();
  if (a.variants.empty()) {
    chosen = all;
  } else {
    for (const auto& name : split_list(a.variants)) {
      auto it = std::find_if(all.begin(), all.end(), [&](const AblationVariant& v) { return v.name == name; });
      if (it == all.end()) throw ConfigError("unknown ablation variant '" + name + "'");
      chosen.push_back(*it);
    }
  }
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(a.seeds)) {
    try {
      seeds.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("seed '" + s + "' is not an integer");
    }
  }
  if (seeds.empty()) throw ConfigError("no seeds given");
  const auto rows = ablate(c, chosen, seeds, data.skeleton, data.train_windows, data.eval_windows,
                           [](const AblationRow& r) {
                             print_line(std::cout, {{"event", "ablation_row"},
                                                    {"variant", r.variant},
                                                    {"seed", r.seed},
                                                    {"trainable_params", r.trainable_params},
                                                    {"final_eval_mpjpe", r.final_eval_mpjpe},
                                                    {"final_train_mpjpe", r.final_train_mpjpe}});
                           });
  const std::string csv = ablation_csv(rows);
  if (a.out.empty()) std::cout << csv;
  else write_text(a.out, csv);
  return 0;
}

struct GradcheckArgs {
  std::string model_file;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  std::size_t batch = 2;
  double tolerance = 1e-4;
};

ModelConfig resolve_model(const std::string& file, const std::vector<std::string>& overrides, ModelConfig base) {
  json j = base;
  j.erase("temporal_dim");
  if (!file.empty()) {
    const json loaded = read_json_file(file);
    j.update(loaded.contains("model") ? loaded.at("model") : loaded);
  }
  for (const auto& o : overrides) apply_override(j, o);
  ModelConfig c = j.get<ModelConfig>();
  validate(c);
  return c;
}

int run_gradcheck(const GradcheckArgs& a) {
  GradcheckOptions o;
  o.model = resolve_model(a.model_file, a.overrides, o.model);
  o.seed = a.seed;
  o.batch = a.batch;
  o.tolerance = a.tolerance;
  const GradcheckReport report = gradcheck(o);
  for (const auto& [slot, err] : report.per_slot)
    print_line(std::cout, {{"event", "gradcheck_slot"}, {"slot", slot}, {"max_rel_error", err}});
  print_line(std::cout, {{"event", "gradcheck"},
                         {"max_rel_error", report.max_rel_error},
                         {"graph_nodes", report.graph_nodes},
                         {"tolerance", a.tolerance},
                         {"passed", report.passed}});
  return report.passed ? 0 : kExitFailure;
}

struct SynthArgs {
  std::string out, skeleton = "h36m", actions = "synthetic";
  std::size_t records = 10, frames = 243;
  std::uint64_t seed = 0;
  double amplitude = 200.0;
};

int run_synth(const SynthArgs& a) {
  if (a.out.empty()) throw ConfigError("synth needs --out");
  if (a.records == 0 || a.frames == 0) throw ConfigError("synth needs at least one record and one frame");
  SynthOptions o;
  o.max_amplitude_mm = a.amplitude;
  const auto actions = split_list(a.actions);
  if (actions.empty()) throw ConfigError("synth needs at least one action");
  const auto records = synth_dataset(parse_skeleton(a.skeleton), a.records, a.frames, a.seed, actions, o);
  save_records(a.out, records);
  print_line(std::cout, {{"event", "synth"}, {"path", a.out}, {"records", records.size()}, {"frames", a.frames}});
  return 0;
}

struct InspectArgs {
  std::string model_file, checkpoint;
  std::vector<std::string> overrides;
  bool ledger = true;
};

int run_inspect(const InspectArgs& a) {
  ModelConfig c;
  std::optional<std::size_t> stored;
  if (!a.checkpoint.empty()) {
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    c = ckpt.config;
    stored = ckpt.params.count();
  }
  c = resolve_model(a.model_file, a.overrides, c);
  const auto ledger = param_ledger(c);
  if (a.ledger) {
    for (const auto& slot : ledger)
      print_line(std::cout, {{"event", "slot"}, {"name", slot.name}, {"shape", slot.shape}, {"size", shape_size(slot.shape)}});
  }
  json summary = {{"event", "inspect"}, {"config", c}, {"slots", ledger.size()}, {"param_count", param_count(c)}};
  if (stored) summary["checkpoint_params"] = *stored;
  print_line(std::cout, summary);
  return 0;
}

int report_error(const std::string& kind, const std::string& message, int code) {
  print_line(std::cerr, {{"event", "error"}, {"kind", kind}, {"message", message}, {"exit_code", code}});
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CrossFormer 2D-to-3D pose lifter"};
  app.require_subcommand(1);

  ConfigArgs train_cfg, ablate_cfg;
  std::string checkpoint, log_path;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config");
  train_cfg.add_to(train_cmd);
  train_cmd->add_option("--checkpoint", checkpoint, "Checkpoint path, rewritten every epoch");
  train_cmd->add_option("--log", log_path, "Also write the JSON-lines log here");

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint)->required();
  eval_cmd->add_option("--data", eval_args.data, "Records (JSON lines)")->required();
  eval_cmd->add_flag("--no-flip", eval_args.no_flip, "Disable the flip ensemble");
  eval_cmd->add_flag("--rigid", eval_args.rigid, "Procrustes without scale");
  eval_cmd->add_option("--stride", eval_args.stride, "Evaluate every n-th frame");
  eval_cmd->add_option("--batch", eval_args.batch);
  eval_cmd->add_option("--csv", eval_args.csv, "Write the per-action table as CSV");
  eval_cmd->add_option("--json", eval_args.json_out, "Write the report as JSON");

  AblateArgs ablate_args;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train every module combination under matched budgets");
  ablate_cfg.add_to(ablate_cmd);
  ablate_cmd->add_option("--seeds", ablate_args.seeds, "Comma-separated seeds");
  ablate_cmd->add_option("--variants", ablate_args.variants, "Comma-separated variant names; default all");
  ablate_cmd->add_option("--out", ablate_args.out, "CSV path; default stdout");

  GradcheckArgs grad_args;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every parameter slot");
  grad_cmd->add_option("-c,--config", grad_args.model_file, "Model or train config JSON");
  grad_cmd->add_option("--set", grad_args.overrides, "Override a model key, e.g. cji_enabled=false")->take_all();
  grad_cmd->add_option("--seed", grad_args.seed);
  grad_cmd->add_option("--batch", grad_args.batch);
  grad_cmd->add_option("--tolerance", grad_args.tolerance);

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset");
  synth_cmd->add_option("--out", synth_args.out)->required();
  synth_cmd->add_option("--skeleton", synth_args.skeleton, "h36m, tiny or a joint count");
  synth_cmd->add_option("--records", synth_args.records);
  synth_cmd->add_option("--frames", synth_args.frames);
  synth_cmd->add_option("--seed", synth_args.seed);
  synth_cmd->add_option("--amplitude", synth_args.amplitude, "Largest sinusoid amplitude in mm");
  synth_cmd->add_option("--actions", synth_args.actions, "Comma-separated action labels");

  InspectArgs inspect_args;
  bool summary_only = false;
  auto* inspect_cmd = app.add_subcommand("inspect", "Print the parameter ledger and count");
  inspect_cmd->add_option("-c,--config", inspect_args.model_file, "Model or train config JSON");
  inspect_cmd->add_option("--checkpoint", inspect_args.checkpoint);
  inspect_cmd->add_option("--set", inspect_args.overrides, "Override a model key, e.g. frames=27")->take_all();
  inspect_cmd->add_flag("--summary", summary_only, "Omit the per-slot ledger");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), kExitUsage);
  }

  try {
    if (*train_cmd) return run_train(train_cfg, checkpoint, log_path);
    if (*eval_cmd) return run_eval(eval_args);
    if (*ablate_cmd) return run_ablate(ablate_cfg, ablate_args);
    if (*grad_cmd) return run_gradcheck(grad_args);
    if (*synth_cmd) return run_synth(synth_args);
    if (*inspect_cmd) {
      inspect_args.ledger = !summary_only;
      return run_inspect(inspect_args);
    }
  } catch (const Error& e) {
    return report_error(e.kind(), e.what(), kExitFailure);
  } catch (const json::exception& e) {
    return report_error("config", e.what(), kExitFailure);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), kExitFailure);
  }
  return report_error("usage", "no command given", kExitUsage);
}
