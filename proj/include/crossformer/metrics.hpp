#pragma once

// Pose evaluation protocols. Poses are {J, 3} arrays in millimetres.

#include <array>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossformer/tensor.hpp"

namespace crossformer {

// Protocol 1: mean Euclidean joint error.
double mpjpe(const Array& pred, const Array& gt);

using Mat3 = std::array<double, 9>;  // row-major

struct Svd3 {
  Mat3 u;
  std::array<double, 3> s;  // descending, non-negative
  Mat3 v;
};

// One-sided Jacobi SVD, m = u * diag(s) * v^T with orthonormal u and v.
Svd3 svd3(const Mat3& m);

// Similarity (or, without scale, rigid) transform of pred that best matches
// gt in the least-squares sense, applied to pred. Rotation has det +1.
// Throws AlignmentError when the cross-covariance vanishes.
Array procrustes_align(const Array& pred, const Array& gt, bool with_scale = true);

// Protocol 2.
double p_mpjpe(const Array& pred, const Array& gt, bool with_scale = true);

// Fraction of joints within threshold_mm, boundary inclusive.
double pck(const Array& pred, const Array& gt, double threshold_mm = 150.0);

// 0, 5, ..., 150 mm.
std::vector<double> default_auc_thresholds();

// Mean PCK over the thresholds.
double auc(const Array& pred, const Array& gt,
           const std::vector<double>& thresholds = default_auc_thresholds());

struct MetricRow {
  std::size_t count = 0;
  double mpjpe = 0.0;
  double p_mpjpe = 0.0;
  double pck = 0.0;
  double auc = 0.0;
};

struct EvalReport {
  std::map<std::string, MetricRow> per_action;
  MetricRow aggregate;

  // Columns: action,count,mpjpe,p_mpjpe,pck150,auc; aggregate row last.
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

// Accumulates per-window metrics by action.
class ReportBuilder {
 public:
  explicit ReportBuilder(bool procrustes_scale = true,
                         std::vector<double> auc_thresholds = default_auc_thresholds())
      : procrustes_scale_(procrustes_scale), thresholds_(std::move(auc_thresholds)) {}

  void add(const std::string& action, const Array& pred, const Array& gt);
  EvalReport finish() const;

 private:
  struct Sums {
    std::size_t count = 0;
    double mpjpe = 0.0, p_mpjpe = 0.0, pck = 0.0, auc = 0.0;
  };
  bool procrustes_scale_;
  std::vector<double> thresholds_;
  std::map<std::string, Sums> sums_;
};

}  // namespace crossformer
