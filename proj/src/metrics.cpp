#include "crossformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "crossformer/error.hpp"

namespace crossformer {

namespace {

void require_poses(const Array& pred, const Array& gt, const char* op) {
  if (pred.shape != gt.shape || pred.shape.size() != 2 || pred.shape[1] != 3 || pred.shape[0] == 0) {
    throw ShapeError(std::string(op) + ": poses " + shape_str(pred.shape) + " and " +
                     shape_str(gt.shape) + " must both be Jx3");
  }
}

double joint_distance(const Array& a, const Array& b, std::size_t j) {
  const double dx = a.at(j, 0) - b.at(j, 0), dy = a.at(j, 1) - b.at(j, 1), dz = a.at(j, 2) - b.at(j, 2);
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

}  // namespace

double mpjpe(const Array& pred, const Array& gt) {
  require_poses(pred, gt, "mpjpe");
  const std::size_t J = pred.shape[0];
  double acc = 0.0;
  for (std::size_t j = 0; j < J; ++j) acc += joint_distance(pred, gt, j);
  return acc / static_cast<double>(J);
}

// ---- 3x3 SVD ----------------------------------------------------------------

namespace {

double& el(Mat3& m, int r, int c) { return m[r * 3 + c]; }
double el(const Mat3& m, int r, int c) { return m[r * 3 + c]; }

std::array<double, 3> column(const Mat3& m, int c) { return {el(m, 0, c), el(m, 1, c), el(m, 2, c)}; }

void set_column(Mat3& m, int c, const std::array<double, 3>& v) {
  for (int r = 0; r < 3; ++r) el(m, r, c) = v[r];
}

std::array<double, 3> cross(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double dot(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

std::array<double, 3> normalized(std::array<double, 3> v) {
  const double n = std::sqrt(dot(v, v));
  for (double& x : v) x /= n;
  return v;
}

// Any unit vector orthogonal to a unit vector a.
std::array<double, 3> orthogonal_to(const std::array<double, 3>& a) {
  const int smallest = static_cast<int>(std::min_element(a.begin(), a.end(), [](double x, double y) {
                                          return std::abs(x) < std::abs(y);
                                        }) - a.begin());
  std::array<double, 3> e{0.0, 0.0, 0.0};
  e[smallest] = 1.0;
  return normalized(cross(a, e));
}

double det3(const Mat3& m) {
  return el(m, 0, 0) * (el(m, 1, 1) * el(m, 2, 2) - el(m, 1, 2) * el(m, 2, 1)) -
         el(m, 0, 1) * (el(m, 1, 0) * el(m, 2, 2) - el(m, 1, 2) * el(m, 2, 0)) +
         el(m, 0, 2) * (el(m, 1, 0) * el(m, 2, 1) - el(m, 1, 1) * el(m, 2, 0));
}

}  // namespace

Svd3 svd3(const Mat3& m) {
  Mat3 a = m;
  Mat3 v{1, 0, 0, 0, 1, 0, 0, 0, 1};
  for (int sweep = 0; sweep < 64; ++sweep) {
    bool rotated = false;
    for (int i = 0; i < 2; ++i) {
      for (int j = i + 1; j < 3; ++j) {
        const auto ai = column(a, i), aj = column(a, j);
        const double alpha = dot(ai, ai), beta = dot(aj, aj), gamma = dot(ai, aj);
        if (gamma == 0.0 || std::abs(gamma) <= 1e-15 * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (int r = 0; r < 3; ++r) {
          const double x = el(a, r, i), y = el(a, r, j);
          el(a, r, i) = c * x - s * y;
          el(a, r, j) = s * x + c * y;
          const double vx = el(v, r, i), vy = el(v, r, j);
          el(v, r, i) = c * vx - s * vy;
          el(v, r, j) = s * vx + c * vy;
        }
      }
    }
    if (!rotated) break;
  }
  std::array<double, 3> sigma;
  for (int k = 0; k < 3; ++k) {
    const auto col = column(a, k);
    sigma[k] = std::sqrt(dot(col, col));
  }
  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int x, int y) { return sigma[x] > sigma[y]; });

  Svd3 out;
  for (int k = 0; k < 3; ++k) {
    out.s[k] = sigma[order[k]];
    set_column(out.v, k, column(v, order[k]));
  }
  const double tiny = 1e-13 * out.s[0];
  std::array<std::array<double, 3>, 3> u;
  for (int k = 0; k < 3; ++k) {
    if (out.s[k] > tiny && out.s[k] > 0.0) {
      auto col = column(a, order[k]);
      for (double& x : col) x /= out.s[k];
      u[k] = col;
    } else if (k == 0) {
      u[0] = {1.0, 0.0, 0.0};
    } else if (k == 1) {
      u[1] = orthogonal_to(u[0]);
    } else {
      u[2] = cross(u[0], u[1]);
    }
  }
  for (int k = 0; k < 3; ++k) set_column(out.u, k, u[k]);
  return out;
}

// ---- alignment ----------------------------------------------------------------

Array procrustes_align(const Array& pred, const Array& gt, bool with_scale) {
  require_poses(pred, gt, "procrustes_align");
  const std::size_t J = pred.shape[0];
  std::array<double, 3> mu_p{0, 0, 0}, mu_g{0, 0, 0};
  for (std::size_t j = 0; j < J; ++j)
    for (int k = 0; k < 3; ++k) {
      mu_p[k] += pred.at(j, k) / static_cast<double>(J);
      mu_g[k] += gt.at(j, k) / static_cast<double>(J);
    }
  Mat3 h{};
  double norm_p = 0.0, norm_g = 0.0;
  for (std::size_t j = 0; j < J; ++j)
    for (int r = 0; r < 3; ++r) {
      const double x = pred.at(j, r) - mu_p[r];
      norm_p += x * x;
      norm_g += (gt.at(j, r) - mu_g[r]) * (gt.at(j, r) - mu_g[r]);
      for (int c = 0; c < 3; ++c) el(h, r, c) += x * (gt.at(j, c) - mu_g[c]);
    }
  const Svd3 svd = svd3(h);
  if (norm_p == 0.0 || svd.s[0] <= 1e-15 * std::sqrt(norm_p * norm_g)) {
    throw AlignmentError("procrustes_align: degenerate cross-covariance");
  }
  // R = V * D * U^T, D flips the weakest axis if V * U^T is a reflection.
  Mat3 vut{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 3; ++k) el(vut, r, c) += el(svd.v, r, k) * el(svd.u, c, k);
  const double d = det3(vut) < 0.0 ? -1.0 : 1.0;
  Mat3 rot{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 3; ++k)
        el(rot, r, c) += el(svd.v, r, k) * (k == 2 ? d : 1.0) * el(svd.u, c, k);
  const double s = with_scale ? (svd.s[0] + svd.s[1] + d * svd.s[2]) / norm_p : 1.0;

  Array out({J, 3});
  for (std::size_t j = 0; j < J; ++j) {
    std::array<double, 3> x{pred.at(j, 0) - mu_p[0], pred.at(j, 1) - mu_p[1], pred.at(j, 2) - mu_p[2]};
    for (int r = 0; r < 3; ++r) {
      double acc = 0.0;
      for (int c = 0; c < 3; ++c) acc += el(rot, r, c) * x[c];
      out.at(j, r) = s * acc + mu_g[r];
    }
  }
  return out;
}

double p_mpjpe(const Array& pred, const Array& gt, bool with_scale) {
  return mpjpe(procrustes_align(pred, gt, with_scale), gt);
}

double pck(const Array& pred, const Array& gt, double threshold_mm) {
  require_poses(pred, gt, "pck");
  if (threshold_mm < 0.0) throw ConfigError("pck: negative threshold");
  const std::size_t J = pred.shape[0];
  std::size_t hits = 0;
  for (std::size_t j = 0; j < J; ++j)
    if (joint_distance(pred, gt, j) <= threshold_mm) ++hits;
  return static_cast<double>(hits) / static_cast<double>(J);
}

std::vector<double> default_auc_thresholds() {
  std::vector<double> t;
  for (int i = 0; i <= 30; ++i) t.push_back(5.0 * i);
  return t;
}

double auc(const Array& pred, const Array& gt, const std::vector<double>& thresholds) {
  if (thresholds.empty()) throw ConfigError("auc: empty threshold grid");
  double acc = 0.0;
  for (double t : thresholds) acc += pck(pred, gt, t);
  return acc / static_cast<double>(thresholds.size());
}

// ---- reports ------------------------------------------------------------------

void ReportBuilder::add(const std::string& action, const Array& pred, const Array& gt) {
  Sums& s = sums_[action];
  s.count += 1;
  s.mpjpe += mpjpe(pred, gt);
  s.p_mpjpe += p_mpjpe(pred, gt, procrustes_scale_);
  s.pck += pck(pred, gt, 150.0);
  s.auc += auc(pred, gt, thresholds_);
}

EvalReport ReportBuilder::finish() const {
  EvalReport report;
  Sums total;
  for (const auto& [action, s] : sums_) {
    const double n = static_cast<double>(s.count);
    report.per_action[action] = {s.count, s.mpjpe / n, s.p_mpjpe / n, s.pck / n, s.auc / n};
    total.count += s.count;
  }
  // Aggregate as the count-weighted mean of the per-action rows.
  for (const auto& [action, row] : report.per_action) {
    const double w = static_cast<double>(row.count) / static_cast<double>(total.count);
    report.aggregate.mpjpe += w * row.mpjpe;
    report.aggregate.p_mpjpe += w * row.p_mpjpe;
    report.aggregate.pck += w * row.pck;
    report.aggregate.auc += w * row.auc;
  }
  report.aggregate.count = total.count;
  return report;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "action,count,mpjpe,p_mpjpe,pck150,auc\n";
  auto row = [&](const std::string& name, const MetricRow& r) {
    os << name << ',' << r.count << ',' << r.mpjpe << ',' << r.p_mpjpe << ',' << r.pck << ','
       << r.auc << '\n';
  };
  for (const auto& [action, r] : per_action) row(action, r);
  row("aggregate", aggregate);
  return os.str();
}

nlohmann::json EvalReport::to_json() const {
  auto row = [](const MetricRow& r) {
    return nlohmann::json{{"count", r.count}, {"mpjpe", r.mpjpe}, {"p_mpjpe", r.p_mpjpe},
                          {"pck150", r.pck},  {"auc", r.auc}};
  };
  nlohmann::json j;
  j["per_action"] = nlohmann::json::object();
  for (const auto& [action, r] : per_action) j["per_action"][action] = row(r);
  j["aggregate"] = row(aggregate);
  return j;
}

}  // namespace crossformer
