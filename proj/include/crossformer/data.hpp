#pragma once

// Pose sequences, synthetic motion, receptive-field windows and
// left/right flip augmentation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "crossformer/tensor.hpp"

namespace crossformer {

struct SkeletonSpec {
  std::size_t num_joints = 0;
  std::vector<std::string> joint_names;
  std::vector<std::pair<std::size_t, std::size_t>> left_right_pairs;  // (left, right)
  std::size_t root_index = 0;

  // Throws ValidationError: pairs disjoint and in range, root unpaired.
  void validate() const;

  // 17-joint Human3.6M ordering.
  static SkeletonSpec h36m();
  // Root plus one left/right pair.
  static SkeletonSpec tiny();
  // Root, then left/right pairs, then one centre joint if J is even.
  static SkeletonSpec generic(std::size_t num_joints);

  bool operator==(const SkeletonSpec&) const = default;
};

// Synthesizer pinhole camera looking down +z.
struct Camera {
  double focal_px = 1000.0;
  double image_width = 1000.0;
  double image_height = 1000.0;
  double distance_mm = 4000.0;

  bool operator==(const Camera&) const = default;
};

// Pixel offset from the principal point divided by the image half-width.
std::pair<double, double> project_normalized(const Camera& camera, double x, double y, double z);

inline constexpr int kRecordSchemaVersion = 1;

struct SequenceRecord {
  std::string id;
  std::string action;
  SkeletonSpec skeleton;
  Array joints_2d;  // {T, J, 2}, normalized image coordinates
  Array joints_3d;  // {T, J, 3}, millimetres, root-relative
  std::optional<Camera> camera;

  std::size_t num_frames() const { return joints_3d.shape.empty() ? 0 : joints_3d.shape[0]; }
  bool operator==(const SequenceRecord&) const = default;
};

// Throws ValidationError naming the record id.
void validate_record(const SequenceRecord& record);

nlohmann::json record_to_json(const SequenceRecord& record);
SequenceRecord record_from_json(const nlohmann::json& j);

// JSON-lines, one record per line. Blank lines are skipped.
std::vector<SequenceRecord> load_records(const std::filesystem::path& path);
void save_records(const std::filesystem::path& path, const std::vector<SequenceRecord>& records);

struct SynthOptions {
  double max_amplitude_mm = 200.0;
  double min_frequency = 0.005;  // cycles per frame
  double max_frequency = 0.05;
  Camera camera;
  std::string action = "synthetic";
};

// Rest pose {J, 3} whose mirror image equals itself after swapping pairs.
Array rest_pose(const SkeletonSpec& skeleton);

// Every non-root joint follows rest + a sum of three seeded 3D sinusoids;
// the root stays at the origin. Deterministic in (skeleton, seed, T, options).
SequenceRecord synth_sequence(const SkeletonSpec& skeleton, std::uint64_t seed, std::size_t frames,
                              const SynthOptions& options = {});

// `records` sequences with ids seq_00000, seq_00001, ... and actions
// assigned round-robin.
std::vector<SequenceRecord> synth_dataset(const SkeletonSpec& skeleton, std::size_t records,
                                          std::size_t frames, std::uint64_t seed,
                                          const std::vector<std::string>& actions = {"synthetic"},
                                          const SynthOptions& options = {});

struct PoseWindow {
  Array frames_2d;  // {F, J, 2}
  Array target_3d;  // {J, 3}, centre frame
  std::string record_id;
  std::size_t center = 0;

  bool operator==(const PoseWindow&) const = default;
};

// Frames [center - (F-1)/2, center + (F-1)/2], edge frames repeated past
// either end of the sequence.
PoseWindow window(const SequenceRecord& record, std::size_t frames, std::size_t center);
std::vector<PoseWindow> all_windows(const SequenceRecord& record, std::size_t frames);

// Negates x and swaps left/right joints in place. `joints` has shape
// {..., J, c} with c >= 1.
void mirror_joints(Array& joints, const SkeletonSpec& skeleton);

PoseWindow hflip(const PoseWindow& w, const SkeletonSpec& skeleton);

// Splits records sorted by id: the last `fraction` (rounded down) held out.
std::pair<std::vector<SequenceRecord>, std::vector<SequenceRecord>> split_holdout(
    std::vector<SequenceRecord> records, double fraction = 0.2);

}  // namespace crossformer
