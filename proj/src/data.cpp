#include "crossformer/data.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "crossformer/error.hpp"

namespace crossformer {

// ---- skeletons ----------------------------------------------------------------

void SkeletonSpec::validate() const {
  if (num_joints == 0) throw ValidationError("skeleton has no joints");
  if (!joint_names.empty() && joint_names.size() != num_joints) {
    throw ValidationError("skeleton names " + std::to_string(joint_names.size()) +
                          " joints, expected " + std::to_string(num_joints));
  }
  if (root_index >= num_joints) throw ValidationError("skeleton root index out of range");
  std::set<std::size_t> seen;
  for (auto [l, r] : left_right_pairs) {
    if (l >= num_joints || r >= num_joints) throw ValidationError("skeleton pair index out of range");
    if (l == root_index || r == root_index) throw ValidationError("skeleton root is paired");
    if (!seen.insert(l).second || !seen.insert(r).second) {
      throw ValidationError("skeleton pairs are not disjoint");
    }
  }
}

SkeletonSpec SkeletonSpec::h36m() {
  SkeletonSpec s;
  s.num_joints = 17;
  s.joint_names = {"hip",     "r_hip",      "r_knee",  "r_foot",  "l_hip",   "l_knee",
                   "l_foot",  "spine",      "thorax",  "neck",    "head",    "l_shoulder",
                   "l_elbow", "l_wrist",    "r_shoulder", "r_elbow", "r_wrist"};
  s.left_right_pairs = {{4, 1}, {5, 2}, {6, 3}, {11, 14}, {12, 15}, {13, 16}};
  s.root_index = 0;
  return s;
}

SkeletonSpec SkeletonSpec::tiny() {
  SkeletonSpec s;
  s.num_joints = 3;
  s.joint_names = {"root", "left", "right"};
  s.left_right_pairs = {{1, 2}};
  return s;
}

SkeletonSpec SkeletonSpec::generic(std::size_t num_joints) {
  SkeletonSpec s;
  s.num_joints = num_joints;
  s.joint_names.push_back("root");
  std::size_t next = 1;
  for (std::size_t k = 0; next + 1 < num_joints; ++k, next += 2) {
    s.joint_names.push_back("left_" + std::to_string(k));
    s.joint_names.push_back("right_" + std::to_string(k));
    s.left_right_pairs.emplace_back(next, next + 1);
  }
  if (next < num_joints) s.joint_names.push_back("centre");
  return s;
}

// ---- camera & rest pose ---------------------------------------------------

std::pair<double, double> project_normalized(const Camera& camera, double x, double y, double z) {
  const double depth = z + camera.distance_mm;
  const double half = camera.image_width / 2.0;
  return {camera.focal_px * x / depth / half, camera.focal_px * y / depth / half};
}

Array rest_pose(const SkeletonSpec& skeleton) {
  skeleton.validate();
  const std::size_t J = skeleton.num_joints;
  Array pose({J, 3});
  if (skeleton == SkeletonSpec::h36m()) {
    // y grows downwards, as in image coordinates.
    const double table[17][3] = {
        {0, 0, 0},       {-130, 0, 0},     {-130, 450, 20},  {-130, 880, 60},  {130, 0, 0},
        {130, 450, 20},  {130, 880, 60},   {0, -230, 10},    {0, -480, 0},     {0, -590, -20},
        {0, -700, 0},    {170, -450, 0},   {190, -190, 30},  {200, 60, 60},    {-170, -450, 0},
        {-190, -190, 30}, {-200, 60, 60}};
    for (std::size_t j = 0; j < 17; ++j)
      for (std::size_t a = 0; a < 3; ++a) pose.at(j, a) = table[j][a];
    return pose;
  }
  std::vector<bool> paired(J, false);
  for (std::size_t k = 0; k < skeleton.left_right_pairs.size(); ++k) {
    auto [l, r] = skeleton.left_right_pairs[k];
    const double kk = static_cast<double>(k);
    const double x = 120.0 + 40.0 * kk, y = -200.0 * (kk + 1.0) + 300.0 * (k % 2), z = 30.0 * kk;
    pose.at(l, 0) = x;
    pose.at(l, 1) = y;
    pose.at(l, 2) = z;
    pose.at(r, 0) = -x;
    pose.at(r, 1) = y;
    pose.at(r, 2) = z;
    paired[l] = paired[r] = true;
  }
  double offset = 250.0;
  for (std::size_t j = 0; j < J; ++j) {
    if (paired[j] || j == skeleton.root_index) continue;
    pose.at(j, 1) = offset;
    offset += 150.0;
  }
  return pose;
}

// ---- records ------------------------------------------------------------------

void validate_record(const SequenceRecord& r) {
  auto fail = [&](const std::string& m) { throw ValidationError("record '" + r.id + "': " + m); };
  try {
    r.skeleton.validate();
  } catch (const ValidationError& e) {
    fail(e.what());
  }
  const std::size_t J = r.skeleton.num_joints;
  const std::size_t T = r.num_frames();
  if (T == 0) fail("no frames");
  if (r.joints_3d.shape != Shape{T, J, 3}) fail("joints_3d shape " + shape_str(r.joints_3d.shape));
  if (r.joints_2d.shape != Shape{T, J, 2}) fail("joints_2d shape " + shape_str(r.joints_2d.shape));
  for (double v : r.joints_2d.data)
    if (!std::isfinite(v)) fail("non-finite 2D coordinate");
  for (double v : r.joints_3d.data)
    if (!std::isfinite(v)) fail("non-finite 3D coordinate");
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t a = 0; a < 3; ++a) {
      const double v = r.joints_3d.data[(t * J + r.skeleton.root_index) * 3 + a];
      if (std::abs(v) > 1e-9) {
        fail("root joint is not at the origin in frame " + std::to_string(t));
      }
    }
}

namespace {

nlohmann::json nested(const Array& a) {
  const std::size_t T = a.shape[0], J = a.shape[1], c = a.shape[2];
  nlohmann::json frames = nlohmann::json::array();
  for (std::size_t t = 0; t < T; ++t) {
    nlohmann::json joints = nlohmann::json::array();
    for (std::size_t j = 0; j < J; ++j) {
      nlohmann::json v = nlohmann::json::array();
      for (std::size_t k = 0; k < c; ++k) v.push_back(a.data[(t * J + j) * c + k]);
      joints.push_back(std::move(v));
    }
    frames.push_back(std::move(joints));
  }
  return frames;
}

Array flat(const nlohmann::json& frames, std::size_t J, std::size_t c, const char* what) {
  if (!frames.is_array()) throw ParseError(std::string(what) + " is not an array");
  Array a({frames.size(), J, c});
  std::size_t i = 0;
  for (const auto& joints : frames) {
    if (!joints.is_array() || joints.size() != J) {
      throw ParseError(std::string(what) + ": expected " + std::to_string(J) + " joints per frame");
    }
    for (const auto& v : joints) {
      if (!v.is_array() || v.size() != c) {
        throw ParseError(std::string(what) + ": expected " + std::to_string(c) + " coordinates");
      }
      for (const auto& x : v) a.data[i++] = x.get<double>();
    }
  }
  return a;
}

}  // namespace

nlohmann::json record_to_json(const SequenceRecord& r) {
  nlohmann::json pairs = nlohmann::json::array();
  for (auto [l, rr] : r.skeleton.left_right_pairs) pairs.push_back({l, rr});
  nlohmann::json j = {
      {"schema_version", kRecordSchemaVersion},
      {"id", r.id},
      {"action", r.action},
      {"skeleton",
       {{"num_joints", r.skeleton.num_joints},
        {"joint_names", r.skeleton.joint_names},
        {"left_right_pairs", pairs},
        {"root_index", r.skeleton.root_index}}},
      {"joints_2d", nested(r.joints_2d)},
      {"joints_3d", nested(r.joints_3d)},
  };
  if (r.camera) {
    j["camera"] = {{"focal_px", r.camera->focal_px},
                   {"image_width", r.camera->image_width},
                   {"image_height", r.camera->image_height},
                   {"distance_mm", r.camera->distance_mm}};
  }
  return j;
}

SequenceRecord record_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw ParseError("record is not a JSON object");
    if (!j.contains("schema_version")) throw ParseError("missing schema_version");
    const int version = j.at("schema_version").get<int>();
    if (version != kRecordSchemaVersion) {
      throw ParseError("unsupported schema_version " + std::to_string(version));
    }
    SequenceRecord r;
    r.id = j.at("id").get<std::string>();
    r.action = j.at("action").get<std::string>();
    const auto& s = j.at("skeleton");
    r.skeleton.num_joints = s.at("num_joints").get<std::size_t>();
    r.skeleton.joint_names = s.value("joint_names", std::vector<std::string>{});
    for (const auto& p : s.at("left_right_pairs")) {
      r.skeleton.left_right_pairs.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>());
    }
    r.skeleton.root_index = s.at("root_index").get<std::size_t>();
    const std::size_t J = r.skeleton.num_joints;
    r.joints_2d = flat(j.at("joints_2d"), J, 2, "joints_2d");
    r.joints_3d = flat(j.at("joints_3d"), J, 3, "joints_3d");
    if (j.contains("camera")) {
      const auto& c = j["camera"];
      r.camera = Camera{c.at("focal_px").get<double>(), c.at("image_width").get<double>(),
                        c.at("image_height").get<double>(), c.at("distance_mm").get<double>()};
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(e.what());
  }
}

std::vector<SequenceRecord> load_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
  std::vector<SequenceRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    SequenceRecord r;
    try {
      r = record_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    validate_record(r);
    records.push_back(std::move(r));
  }
  return records;
}

void save_records(const std::filesystem::path& path, const std::vector<SequenceRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset '" + path.string() + "'");
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw IoError("failed writing dataset '" + path.string() + "'");
}

// ---- synthesis ----------------------------------------------------------------

SequenceRecord synth_sequence(const SkeletonSpec& skeleton, std::uint64_t seed, std::size_t frames,
                              const SynthOptions& options) {
  if (frames == 0) throw ConfigError("synth_sequence: at least one frame required");
  const Array rest = rest_pose(skeleton);
  const std::size_t J = skeleton.num_joints;

  struct Wave {
    double amp[3];
    double omega;
    double phase;
  };
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::array<Wave, 3>> waves(J);
  for (std::size_t j = 0; j < J; ++j) {
    for (auto& w : waves[j]) {
      double dir[3] = {normal(rng), normal(rng), normal(rng)};
      const double n = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
      const double magnitude = options.max_amplitude_mm * unit(rng);
      for (int a = 0; a < 3; ++a) w.amp[a] = n > 0.0 ? magnitude * dir[a] / n : 0.0;
      const double freq =
          options.min_frequency + (options.max_frequency - options.min_frequency) * unit(rng);
      w.omega = 2.0 * std::numbers::pi * freq;
      w.phase = 2.0 * std::numbers::pi * unit(rng);
    }
  }

  SequenceRecord r;
  r.id = "synth_" + std::to_string(seed);
  r.action = options.action;
  r.skeleton = skeleton;
  r.camera = options.camera;
  r.joints_3d = Array({frames, J, 3});
  r.joints_2d = Array({frames, J, 2});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t j = 0; j < J; ++j) {
      double p[3] = {0.0, 0.0, 0.0};
      if (j != skeleton.root_index) {
        for (int a = 0; a < 3; ++a) p[a] = rest.at(j, a);
        for (const auto& w : waves[j]) {
          const double s = std::sin(w.omega * static_cast<double>(t) + w.phase);
          for (int a = 0; a < 3; ++a) p[a] += w.amp[a] * s;
        }
      }
      for (int a = 0; a < 3; ++a) r.joints_3d.data[(t * J + j) * 3 + a] = p[a];
      auto [u, v] = project_normalized(options.camera, p[0], p[1], p[2]);
      r.joints_2d.data[(t * J + j) * 2] = u;
      r.joints_2d.data[(t * J + j) * 2 + 1] = v;
    }
  }
  return r;
}

std::vector<SequenceRecord> synth_dataset(const SkeletonSpec& skeleton, std::size_t records,
                                          std::size_t frames, std::uint64_t seed,
                                          const std::vector<std::string>& actions,
                                          const SynthOptions& options) {
  if (actions.empty()) throw ConfigError("synth_dataset: at least one action required");
  std::vector<SequenceRecord> out;
  out.reserve(records);
  for (std::size_t i = 0; i < records; ++i) {
    SynthOptions o = options;
    o.action = actions[i % actions.size()];
    SequenceRecord r = synth_sequence(skeleton, seed * 1000003ull + i, frames, o);
    char id[32];
    std::snprintf(id, sizeof id, "seq_%05zu", i);
    r.id = id;
    out.push_back(std::move(r));
  }
  return out;
}

// ---- windows & flips ----------------------------------------------------------

PoseWindow window(const SequenceRecord& record, std::size_t frames, std::size_t center) {
  if (frames == 0 || frames % 2 == 0) {
    throw ConfigError("window: receptive field must be odd, got " + std::to_string(frames));
  }
  const std::size_t T = record.num_frames();
  if (center >= T) {
    throw ConfigError("window: centre " + std::to_string(center) + " outside " +
                      std::to_string(T) + " frames of '" + record.id + "'");
  }
  const std::size_t J = record.skeleton.num_joints;
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(frames / 2);
  PoseWindow w;
  w.frames_2d = Array({frames, J, 2});
  for (std::size_t i = 0; i < frames; ++i) {
    const std::ptrdiff_t src = std::clamp<std::ptrdiff_t>(
        static_cast<std::ptrdiff_t>(center) - half + static_cast<std::ptrdiff_t>(i), 0,
        static_cast<std::ptrdiff_t>(T) - 1);
    std::copy_n(record.joints_2d.data.begin() + src * static_cast<std::ptrdiff_t>(J * 2), J * 2,
                w.frames_2d.data.begin() + static_cast<std::ptrdiff_t>(i * J * 2));
  }
  w.target_3d = Array({J, 3});
  std::copy_n(record.joints_3d.data.begin() + static_cast<std::ptrdiff_t>(center * J * 3), J * 3,
              w.target_3d.data.begin());
  w.record_id = record.id;
  w.center = center;
  return w;
}

std::vector<PoseWindow> all_windows(const SequenceRecord& record, std::size_t frames) {
  std::vector<PoseWindow> out;
  out.reserve(record.num_frames());
  for (std::size_t c = 0; c < record.num_frames(); ++c) out.push_back(window(record, frames, c));
  return out;
}

void mirror_joints(Array& joints, const SkeletonSpec& skeleton) {
  const std::size_t rank = joints.shape.size();
  if (rank < 2 || joints.shape[rank - 2] != skeleton.num_joints) {
    throw ShapeError("mirror_joints: shape " + shape_str(joints.shape) + " does not end in " +
                     std::to_string(skeleton.num_joints) + " joints");
  }
  const std::size_t c = joints.shape[rank - 1], J = skeleton.num_joints;
  const std::size_t poses = joints.size() / (J * c);
  for (std::size_t p = 0; p < poses; ++p) {
    double* base = joints.data.data() + p * J * c;
    for (std::size_t j = 0; j < J; ++j) base[j * c] = -base[j * c];
    for (auto [l, r] : skeleton.left_right_pairs)
      std::swap_ranges(base + l * c, base + (l + 1) * c, base + r * c);
  }
}

PoseWindow hflip(const PoseWindow& w, const SkeletonSpec& skeleton) {
  PoseWindow out = w;
  mirror_joints(out.frames_2d, skeleton);
  mirror_joints(out.target_3d, skeleton);
  return out;
}

std::pair<std::vector<SequenceRecord>, std::vector<SequenceRecord>> split_holdout(
    std::vector<SequenceRecord> records, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("split_holdout: fraction must be in [0, 1)");
  std::stable_sort(records.begin(), records.end(),
                   [](const auto& a, const auto& b) { return a.id < b.id; });
  const auto held = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(records.size())));
  std::vector<SequenceRecord> eval(std::make_move_iterator(records.end() - static_cast<std::ptrdiff_t>(held)),
                                   std::make_move_iterator(records.end()));
  records.resize(records.size() - held);
  return {std::move(records), std::move(eval)};
}

}  // namespace crossformer
