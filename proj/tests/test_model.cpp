#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "crossformer/error.hpp"
#include "crossformer/model.hpp"
#include "test_util.hpp"

using namespace crossformer;
using namespace crossformer::testing;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Array& a) {
  Mat m(a.rows(), std::vector<double>(a.cols()));
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) m[r][c] = a.at(r, c);
  return m;
}

Mat mat_mul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

Mat add_bias(Mat m, const Array& bias) {
  for (auto& row : m)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias.data[j];
  return m;
}

std::vector<double> flatten(const Mat& m) {
  std::vector<double> out;
  for (const auto& row : m) out.insert(out.end(), row.begin(), row.end());
  return out;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Straight-from-the-definition multi-head attention over segments of rows.
Mat attention_oracle(const ModelParams& p, const std::string& pre, const Mat& z,
                     std::size_t tokens, std::size_t heads, double scale) {
  const Mat q = add_bias(mat_mul(z, to_mat(p.at(pre + ".wq"))), p.at(pre + ".bq"));
  const Mat k = mat_mul(z, to_mat(p.at(pre + ".wk")));
  const Mat v = add_bias(mat_mul(z, to_mat(p.at(pre + ".wv"))), p.at(pre + ".bv"));
  const std::size_t d = z[0].size(), dh = d / heads;
  Mat merged(z.size(), std::vector<double>(d, 0.0));
  for (std::size_t s = 0; s < z.size(); s += tokens)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < tokens; ++i) {
        std::vector<double> score(tokens);
        for (std::size_t j = 0; j < tokens; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += q[s + i][h * dh + c] * k[s + j][h * dh + c];
          score[j] = acc / scale;
        }
        const double top = *std::max_element(score.begin(), score.end());
        double total = 0.0;
        for (double& x : score) total += (x = std::exp(x - top));
        for (std::size_t j = 0; j < tokens; ++j)
          for (std::size_t c = 0; c < dh; ++c)
            merged[s + i][h * dh + c] += score[j] / total * v[s + j][h * dh + c];
      }
  return add_bias(mat_mul(merged, to_mat(p.at(pre + ".wo"))), p.at(pre + ".bo"));
}

// conv over the token axis of one segment, channel by channel
Mat conv_tokens(const Mat& z, std::size_t tokens, const Array& kernel, const Array& bias) {
  const std::size_t k = kernel.cols(), half = k / 2;
  Mat out = z;
  for (std::size_t s = 0; s < z.size(); s += tokens)
    for (std::size_t ch = 0; ch < z[0].size(); ++ch)
      for (std::size_t i = 0; i < tokens; ++i) {
        double acc = bias.data[ch];
        for (std::size_t t = 0; t < k; ++t) {
          const long src = static_cast<long>(i) + static_cast<long>(t) - static_cast<long>(half);
          if (src >= 0 && src < static_cast<long>(tokens)) acc += kernel.at(ch, t) * z[s + src][ch];
        }
        out[s + i][ch] = acc;
      }
  return out;
}

// group norm over (channels of a group) x (tokens of a segment)
Mat group_norm_tokens(const Mat& z, std::size_t tokens, std::size_t groups, const Array& gamma,
                      const Array& beta, double eps) {
  const std::size_t C = z[0].size(), per = C / groups;
  Mat out = z;
  for (std::size_t s = 0; s < z.size(); s += tokens)
    for (std::size_t g = 0; g < groups; ++g) {
      double mean = 0.0, var = 0.0;
      for (std::size_t i = 0; i < tokens; ++i)
        for (std::size_t c = g * per; c < (g + 1) * per; ++c) mean += z[s + i][c];
      mean /= static_cast<double>(tokens * per);
      for (std::size_t i = 0; i < tokens; ++i)
        for (std::size_t c = g * per; c < (g + 1) * per; ++c) var += std::pow(z[s + i][c] - mean, 2);
      var /= static_cast<double>(tokens * per);
      for (std::size_t i = 0; i < tokens; ++i)
        for (std::size_t c = g * per; c < (g + 1) * per; ++c)
          out[s + i][c] = (z[s + i][c] - mean) / std::sqrt(var + eps) * gamma.data[c] + beta.data[c];
    }
  return out;
}

Mat cji_oracle(const ModelParams& p, const std::string& pre, const ModelConfig& c, const Mat& z) {
  Mat t = conv_tokens(z, c.num_joints, p.at(pre + ".conv1.kernel"), p.at(pre + ".conv1.bias"));
  for (auto& row : t)
    for (double& x : row) x = gelu_ref(x);
  t = group_norm_tokens(t, c.num_joints, c.groupnorm_groups, p.at(pre + ".gn.gamma"),
                        p.at(pre + ".gn.beta"), c.norm_eps);
  t = conv_tokens(t, c.num_joints, p.at(pre + ".conv2.kernel"), p.at(pre + ".conv2.bias"));
  for (std::size_t r = 0; r < z.size(); ++r)
    for (std::size_t k = 0; k < z[0].size(); ++k) t[r][k] += z[r][k];
  return t;
}

Mat per_joint_project(const Mat& z, const Array& w, std::size_t J, std::size_t D) {
  Mat out(z.size(), std::vector<double>(J * D, 0.0));
  for (std::size_t r = 0; r < z.size(); ++r)
    for (std::size_t j = 0; j < J; ++j)
      for (std::size_t o = 0; o < D; ++o)
        for (std::size_t i = 0; i < D; ++i) out[r][j * D + o] += z[r][j * D + i] * w.at(i, o);
  return out;
}

Mat cfi_oracle(const ModelParams& p, const std::string& pre, const ModelConfig& c, const Mat& z) {
  const std::size_t J = c.num_joints, D = c.spatial_dim, Ct = J * D, F = c.frames;
  auto project = [&](const std::string& slot) {
    return c.cfi_projection == CfiProjection::PerJoint ? per_joint_project(z, p.at(pre + slot), J, D)
                                                       : mat_mul(z, to_mat(p.at(pre + slot)));
  };
  const Mat k = project(".wk"), q = project(".wq"), v = project(".wv");
  Mat mixed(z.size(), std::vector<double>(Ct, 0.0));
  for (std::size_t s = 0; s < z.size(); s += F)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t g = 0; g < F; ++g) {
        double corr = 0.0;
        for (std::size_t i = 0; i < Ct; ++i) corr += k[s + f][i] * q[s + g][i];
        corr /= static_cast<double>(Ct);
        for (std::size_t i = 0; i < Ct; ++i) mixed[s + f][i] += corr * v[s + g][i];
      }
  Mat y = add_bias(mat_mul(mixed, to_mat(p.at(pre + ".proj.weight"))), p.at(pre + ".proj.bias"));
  y = group_norm_tokens(y, F, c.groupnorm_groups, p.at(pre + ".gn.gamma"), p.at(pre + ".gn.beta"),
                        c.norm_eps);
  for (std::size_t r = 0; r < z.size(); ++r)
    for (std::size_t i = 0; i < Ct; ++i) y[r][i] += z[r][i];
  return y;
}

// Random values in every slot so zero-initialized biases and positions
// also take part.
ModelParams randomized(const ModelConfig& c, std::uint64_t seed, double scale = 0.3) {
  ModelParams p = init_params(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& slot : p.slots())
    for (double& v : slot.value.data) v += u(rng);
  return p;
}

ModelConfig small_config() {
  ModelConfig c = tiny_config();
  c.num_joints = 5;
  c.frames = 5;
  c.spatial_dim = 4;
  c.groupnorm_groups = 2;
  c.cji_kernel = 3;
  c.output_scale = 1.0;
  return c;
}


}  // namespace

TEST_CASE("config JSON round trip and validation") {
  ModelConfig c = small_config();
  c.attention_scale = AttentionScale::TokenCount;
  c.cfi_projection = CfiProjection::Full;
  c.head_norm_first = false;
  nlohmann::json j = c;
  CHECK(j["temporal_dim"] == 20);
  CHECK(j.get<ModelConfig>() == c);

  j["bogus"] = 1;
  CHECK_THROWS_AS(j.get<ModelConfig>(), ConfigError);
  j.erase("bogus");
  j["temporal_dim"] = 21;
  CHECK_THROWS_AS(j.get<ModelConfig>(), ConfigError);
  j["temporal_dim"] = 20;
  j["attention_scale"] = "sideways";
  CHECK_THROWS_AS(j.get<ModelConfig>(), ConfigError);

  ModelConfig bad = small_config();
  bad.frames = 4;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = small_config();
  bad.heads = 3;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = small_config();
  bad.cji_kernel = 2;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = small_config();
  bad.groupnorm_groups = 3;
  CHECK_THROWS_AS(validate(bad), ConfigError);
}

TEST_CASE("tiny ledger matches a hand enumeration") {
  ModelConfig c = tiny_config();  // J=3 F=3 D=4 C_t=12 H=2 ratio 2 k=5
  const std::size_t spatial_layer = 2 * 4                  // norm1
                                    + 4 * 16 + 3 * 4       // attention
                                    + 2 * (4 * 5 + 4) + 8  // cji convs + gn
                                    + 2 * 4                // norm2
                                    + (4 * 8 + 8) + (8 * 4 + 4) + 2 * 4;
  const std::size_t temporal_layer = 2 * 12 + 4 * 144 + 3 * 12  // norm1 + attention
                                     + 3 * 16 + (144 + 12) + 24  // cfi per-joint
                                     + 2 * 12 + (12 * 24 + 24) + (24 * 12 + 12) + 2 * 12;
  const std::size_t expected = (2 * 4 + 4) + 3 * 4 + spatial_layer + 3 * 12 + temporal_layer + 3 +
                               2 * 12 + (12 * 9 + 9);
  CHECK(param_count(c) == expected);

  // additivity: every toggle removes exactly its own slots
  ModelConfig off = c;
  off.cji_enabled = false;
  CHECK(param_count(c) - param_count(off) == 2 * (4 * 5 + 4) + 8);
  off = c;
  off.cfi_enabled = false;
  CHECK(param_count(c) - param_count(off) == 3 * 16 + 144 + 12 + 24);
  off.cfi_projection = CfiProjection::Full;
  c.cfi_projection = CfiProjection::Full;
  CHECK(param_count(c) - param_count(off) == 3 * 144 + 144 + 12 + 24);
  off = tiny_config();
  off.spatial_embed_enabled = false;
  off.temporal_embed_enabled = false;
  CHECK(param_count(tiny_config()) - param_count(off) == 12 + 36);

  std::size_t sum = 0;
  for (const auto& s : param_ledger(tiny_config())) sum += shape_size(s.shape);
  CHECK(sum == param_count(tiny_config()));
  CHECK(init_params(tiny_config(), 1).count() == param_count(tiny_config()));
}

TEST_CASE("full-size parameter count lands in the expected band") {
  ModelConfig c;  // J=17 F=81 D=32 L=4+4 H=8
  const std::size_t n = param_count(c);
  MESSAGE("parameters at F=81: " << n);
  CHECK(n >= 8'000'000);
  CHECK(n <= 12'000'000);
}

TEST_CASE("init is per-slot deterministic and shared across configurations") {
  const ModelConfig c = small_config();
  CHECK(init_params(c, 5) == init_params(c, 5));
  CHECK_FALSE(init_params(c, 5) == init_params(c, 6));
  ModelConfig off = c;
  off.cji_enabled = false;
  off.cfi_enabled = false;
  const ModelParams a = init_params(c, 5), b = init_params(off, 5);
  for (const auto& slot : b.slots()) CHECK(a.at(slot.name) == slot.value);
  CHECK(a.at("head.frame_weights").data[0] == doctest::Approx(1.0 / c.frames));
  CHECK(a.at("spatial.0.norm1.gamma").data[0] == 1.0);
  CHECK(a.at("embed.bias").data[0] == 0.0);

  // empirical spread of a large slot
  const ModelParams big = init_params(ModelConfig{}, 1);
  const Array& w = big.at("temporal.0.mlp.fc1.weight");
  double m2 = 0.0;
  for (double v : w.data) m2 += v * v;
  CHECK(std::sqrt(m2 / w.size()) == doctest::Approx(kInitStd).epsilon(0.01));
}

TEST_CASE("check_params rejects a mismatched set") {
  const ModelConfig c = small_config();
  ModelConfig other = c;
  other.cji_enabled = false;
  CHECK_NOTHROW(check_params(init_params(c, 1), c));
  CHECK_THROWS_AS(check_params(init_params(other, 1), c), ValidationError);
  CHECK_THROWS_AS(init_params(c, 1).at("nope"), ConfigError);
}

TEST_CASE("attention matches the oracle for both scalings") {
  const ModelConfig c = small_config();
  std::mt19937_64 rng(3);
  const ModelParams p = randomized(c, 3, 0.5);
  const Array z = random_array({15, 4}, rng);
  for (auto mode : {AttentionScale::PerHeadDim, AttentionScale::TokenCount}) {
    Graph g;
    BoundParams b(g, p, false);
    Tensor out = multi_head_attention(b, "spatial.0.attn", g.constant(z), 5, 2, mode);
    const double s = mode == AttentionScale::PerHeadDim ? std::sqrt(2.0) : std::sqrt(5.0);
    const Mat ref = attention_oracle(p, "spatial.0.attn", to_mat(z), 5, 2, s);
    CHECK(max_abs_diff(out.data(), flatten(ref)) < 1e-12);
  }
}

TEST_CASE("attention scalings coincide when tokens equal the head width") {
  ModelConfig c = small_config();  // D=4, H=2 -> head width 2
  const ModelParams p = randomized(c, 4, 0.5);
  std::mt19937_64 rng(4);
  const Array z = random_array({6, 4}, rng);
  Graph g;
  BoundParams b(g, p, false);
  Tensor x = g.constant(z);
  Tensor a = multi_head_attention(b, "spatial.0.attn", x, 2, 2, AttentionScale::PerHeadDim);
  Tensor t = multi_head_attention(b, "spatial.0.attn", x, 2, 2, AttentionScale::TokenCount);
  CHECK(max_abs_diff(a.data(), t.data()) == 0.0);
  Tensor other = multi_head_attention(b, "spatial.0.attn", x, 3, 2, AttentionScale::TokenCount);
  Tensor base = multi_head_attention(b, "spatial.0.attn", x, 3, 2, AttentionScale::PerHeadDim);
  CHECK(max_abs_diff(other.data(), base.data()) > 1e-6);
}

TEST_CASE("CJI matches the oracle") {
  const ModelConfig c = small_config();
  std::mt19937_64 rng(5);
  const ModelParams p = randomized(c, 5, 0.5);
  const Array z = random_array({20, 4}, rng);  // 4 frames of 5 joints
  Graph g;
  BoundParams b(g, p, false);
  Tensor out = cji(b, "spatial.0.cji", c, g.constant(z));
  CHECK(max_abs_diff(out.data(), flatten(cji_oracle(p, "spatial.0.cji", c, to_mat(z)))) < 1e-12);
}

TEST_CASE("CFI matches the oracle for both projections") {
  for (auto proj : {CfiProjection::PerJoint, CfiProjection::Full}) {
    ModelConfig c = small_config();
    c.cfi_projection = proj;
    std::mt19937_64 rng(6);
    const ModelParams p = randomized(c, 6, 0.5);
    const Array z = random_array({10, 20}, rng);  // 2 windows of 5 frames
    Graph g;
    BoundParams b(g, p, false);
    Tensor out = cfi(b, "temporal.0.cfi", c, g.constant(z));
    CHECK(max_abs_diff(out.data(), flatten(cfi_oracle(p, "temporal.0.cfi", c, to_mat(z)))) < 1e-12);
  }
}

TEST_CASE("per-joint CFI equals full CFI with a block-diagonal map") {
  ModelConfig c = small_config();
  const ModelParams pj = randomized(c, 7, 0.5);
  c.cfi_projection = CfiProjection::Full;
  ModelParams full = init_params(c, 7);
  for (auto& slot : full.slots()) {
    if (slot.name.find(".cfi.w") != std::string::npos) {
      const Array& small = pj.at(slot.name);
      std::fill(slot.value.data.begin(), slot.value.data.end(), 0.0);
      for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t r = 0; r < 4; ++r)
          for (std::size_t k = 0; k < 4; ++k) slot.value.at(j * 4 + r, j * 4 + k) = small.at(r, k);
    } else {
      slot.value = pj.at(slot.name);
    }
  }
  std::mt19937_64 rng(7);
  const Array inputs = random_array({2, 5, 5, 2}, rng);
  ModelConfig cj = c;
  cj.cfi_projection = CfiProjection::PerJoint;
  CHECK(max_abs_diff(predict(pj, cj, inputs).data, predict(full, c, inputs).data) < 1e-12);
}

TEST_CASE("regression head pools, normalizes and projects") {
  for (bool norm_first : {true, false}) {
    ModelConfig c = small_config();
    c.head_norm_first = norm_first;
    const ModelParams p = randomized(c, 8, 0.5);
    std::mt19937_64 rng(8);
    const Array z = random_array({10, 20}, rng);
    Graph g;
    BoundParams b(g, p, false);
    Tensor out = regression_head(b, c, g.constant(z));
    REQUIRE(out.shape() == Shape{10, 3});

    auto ln = [&](std::vector<double> v) {
      double m = 0.0, var = 0.0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      for (double x : v) var += (x - m) * (x - m);
      var /= static_cast<double>(v.size());
      for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = (v[i] - m) / std::sqrt(var + c.norm_eps) * p.at("head.norm.gamma").data[i] +
               p.at("head.norm.beta").data[i];
      return v;
    };
    auto proj = [&](const std::vector<double>& v) {
      Mat r = add_bias(mat_mul(Mat{v}, to_mat(p.at("head.proj.weight"))), p.at("head.proj.bias"));
      return r[0];
    };
    std::vector<double> expected;
    for (std::size_t w = 0; w < 2; ++w) {
      std::vector<double> pooled(20, 0.0);
      for (std::size_t f = 0; f < 5; ++f)
        for (std::size_t i = 0; i < 20; ++i)
          pooled[i] += p.at("head.frame_weights").data[f] * z.at(w * 5 + f, i);
      const auto y = norm_first ? proj(ln(pooled)) : ln(proj(pooled));
      expected.insert(expected.end(), y.begin(), y.end());
    }
    CHECK(max_abs_diff(out.data(), expected) < 1e-12);
  }
}

TEST_CASE("embedding with zero weights returns the spatial positions") {
  const ModelConfig c = small_config();
  ModelParams p = randomized(c, 20);
  std::fill(p.at("embed.weight").data.begin(), p.at("embed.weight").data.end(), 0.0);
  std::fill(p.at("embed.bias").data.begin(), p.at("embed.bias").data.end(), 0.0);
  std::mt19937_64 rng(20);
  Graph g;
  BoundParams b(g, p, false);
  Tensor out = embed_joints(b, c, g.constant(random_array({15, 2}, rng)));
  const Array& pos = p.at("spatial_pos");
  for (std::size_t r = 0; r < 15; ++r)
    for (std::size_t d = 0; d < 4; ++d) CHECK(out.data()[r * 4 + d] == pos.at(r % 5, d));
}

TEST_CASE("attention with a zero value map returns the propagated bias") {
  const ModelConfig c = small_config();
  ModelParams p = randomized(c, 21, 0.5);
  std::fill(p.at("spatial.0.attn.wv").data.begin(), p.at("spatial.0.attn.wv").data.end(), 0.0);
  std::mt19937_64 rng(21);
  Graph g;
  BoundParams b(g, p, false);
  Tensor out = multi_head_attention(b, "spatial.0.attn", g.constant(random_array({10, 4}, rng)), 5, 2,
                                    AttentionScale::PerHeadDim);
  const Mat row = add_bias(mat_mul(Mat{std::vector<double>(p.at("spatial.0.attn.bv").data)},
                                   to_mat(p.at("spatial.0.attn.wo"))),
                           p.at("spatial.0.attn.bo"));
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t d = 0; d < 4; ++d) CHECK(std::abs(out.data()[r * 4 + d] - row[0][d]) < 1e-14);
}

TEST_CASE("attention over single tokens is the value path") {
  const ModelConfig c = small_config();
  const ModelParams p = randomized(c, 22, 0.5);
  std::mt19937_64 rng(22);
  const Array z = random_array({6, 4}, rng);
  Graph g;
  BoundParams b(g, p, false);
  Tensor out = multi_head_attention(b, "spatial.0.attn", g.constant(z), 1, 2, AttentionScale::PerHeadDim);
  const Mat v = add_bias(mat_mul(to_mat(z), to_mat(p.at("spatial.0.attn.wv"))), p.at("spatial.0.attn.bv"));
  const Mat ref = add_bias(mat_mul(v, to_mat(p.at("spatial.0.attn.wo"))), p.at("spatial.0.attn.bo"));
  CHECK(max_abs_diff(out.data(), flatten(ref)) < 1e-14);
}

TEST_CASE("single-head attention follows the straight-line formula") {
  const ModelConfig c = small_config();
  const ModelParams p = randomized(c, 23, 0.5);
  std::mt19937_64 rng(23);
  const Array z = random_array({8, 4}, rng);
  const Mat zm = to_mat(z);
  const std::string pre = "spatial.0.attn";
  const Mat q = add_bias(mat_mul(zm, to_mat(p.at(pre + ".wq"))), p.at(pre + ".bq"));
  const Mat k = mat_mul(zm, to_mat(p.at(pre + ".wk")));
  const Mat v = add_bias(mat_mul(zm, to_mat(p.at(pre + ".wv"))), p.at(pre + ".bv"));
  Mat mixed(8, std::vector<double>(4, 0.0));
  for (std::size_t seg = 0; seg < 2; ++seg)
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<double> w(4);
      double total = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < 4; ++d) s += q[seg * 4 + i][d] * k[seg * 4 + j][d];
        w[j] = std::exp(s / 2.0);
        total += w[j];
      }
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t d = 0; d < 4; ++d) mixed[seg * 4 + i][d] += w[j] / total * v[seg * 4 + j][d];
    }
  const Mat ref = add_bias(mat_mul(mixed, to_mat(p.at(pre + ".wo"))), p.at(pre + ".bo"));
  Graph g;
  BoundParams b(g, p, false);
  Tensor x = g.constant(z);
  // One head of width 4 over 4 tokens: both scalings divide by 2.
  Tensor a = multi_head_attention(b, pre, x, 4, 1, AttentionScale::PerHeadDim);
  Tensor t = multi_head_attention(b, pre, x, 4, 1, AttentionScale::TokenCount);
  CHECK(max_abs_diff(a.data(), flatten(ref)) < 1e-12);
  CHECK(max_abs_diff(a.data(), t.data()) == 0.0);
}

TEST_CASE("CJI with a silenced group norm is the identity") {
  const ModelConfig c = small_config();
  ModelParams p = randomized(c, 24, 0.5);
  const std::string pre = "spatial.0.cji";
  for (const char* name : {".gn.gamma", ".gn.beta", ".conv2.bias"})
    std::fill(p.at(pre + name).data.begin(), p.at(pre + name).data.end(), 0.0);
  for (const char* name : {".conv1.kernel", ".conv2.kernel"}) {
    Array& k = p.at(pre + name);
    std::fill(k.data.begin(), k.data.end(), 0.0);
    for (std::size_t d = 0; d < 4; ++d) k.at(d, 1) = 1.0;
  }
  std::mt19937_64 rng(24);
  const Array z = random_array({10, 4}, rng);
  Graph g;
  BoundParams b(g, p, false);
  CHECK(max_abs_diff(cji(b, pre, c, g.constant(z)).data(), z.data) == 0.0);
}

TEST_CASE("spatial stage commutes with frame permutation") {
  const ModelConfig c = small_config();
  const ModelParams p = randomized(c, 25);
  std::mt19937_64 rng(25);
  const Array x = random_array({20, 2}, rng);  // 4 frames of 5 joints
  const std::size_t perm[4] = {2, 0, 3, 1};
  Array shuffled = x;
  for (std::size_t f = 0; f < 4; ++f) std::copy_n(x.data.begin() + perm[f] * 10, 10, shuffled.data.begin() + f * 10);
  Graph g;
  BoundParams b(g, p, false);
  Tensor plain = spatial_stage(b, c, g.constant(x));
  Tensor moved = spatial_stage(b, c, g.constant(shuffled));
  const std::size_t row = plain.size() / 4;
  for (std::size_t f = 0; f < 4; ++f)
    CHECK(max_abs_diff(moved.data().subspan(f * row, row), plain.data().subspan(perm[f] * row, row)) == 0.0);
}

TEST_CASE("CFI over a single frame reduces to a scalar gate") {
  ModelConfig c = small_config();
  c.frames = 1;
  const ModelParams p = randomized(c, 26, 0.5);
  std::mt19937_64 rng(26);
  const Array z = random_array({3, 20}, rng);
  Graph g;
  BoundParams b(g, p, false);
  Tensor out = cfi(b, "temporal.0.cfi", c, g.constant(z));
  CHECK(max_abs_diff(out.data(), flatten(cfi_oracle(p, "temporal.0.cfi", c, to_mat(z)))) < 1e-12);
}

TEST_CASE("CFI with zero values and a silenced group norm is the identity") {
  const ModelConfig c = small_config();
  ModelParams p = randomized(c, 27, 0.5);
  for (const char* name : {".wv", ".gn.gamma", ".gn.beta"})
    std::fill(p.at(std::string("temporal.0.cfi") + name).data.begin(),
              p.at(std::string("temporal.0.cfi") + name).data.end(), 0.0);
  std::mt19937_64 rng(27);
  const Array z = random_array({10, 20}, rng);
  Graph g;
  BoundParams b(g, p, false);
  CHECK(max_abs_diff(cfi(b, "temporal.0.cfi", c, g.constant(z)).data(), z.data) == 0.0);
}

TEST_CASE("head with one-hot or zero frame weights") {
  const ModelConfig c = small_config();
  ModelParams p = randomized(c, 28, 0.5);
  std::mt19937_64 rng(28);
  const Array z = random_array({5, 20}, rng);
  auto run = [&](const ModelParams& q, const Array& in) {
    Graph g;
    BoundParams b(g, q, false);
    const Tensor out = regression_head(b, c, g.constant(in));
    return std::vector<double>(out.data().begin(), out.data().end());
  };
  auto& w = p.at("head.frame_weights").data;
  for (std::size_t f = 0; f < 5; ++f) {
    std::fill(w.begin(), w.end(), 0.0);
    w[f] = 1.0;
    const auto one_hot = run(p, z);
    // Uniform weights over copies of frame f pool to the same vector.
    Array repeated({5, 20});
    for (std::size_t r = 0; r < 5; ++r) std::copy_n(z.data.begin() + f * 20, 20, repeated.data.begin() + r * 20);
    std::fill(w.begin(), w.end(), 0.2);
    CHECK(max_abs_diff(one_hot, run(p, repeated)) < 1e-12);
  }
  std::fill(p.at("head.frame_weights").data.begin(), p.at("head.frame_weights").data.end(), 0.0);
  std::fill(p.at("head.norm.beta").data.begin(), p.at("head.norm.beta").data.end(), 0.0);
  CHECK(max_abs_diff(run(p, z), p.at("head.proj.bias").data) < 1e-12);
}

TEST_CASE("parameter count grows additively with temporal depth") {
  ModelConfig c;
  std::vector<std::size_t> counts;
  for (std::size_t L : {1, 2, 4, 8}) {
    c.temporal_layers = L;
    counts.push_back(param_count(c));
  }
  const std::size_t per_layer = counts[1] - counts[0];
  CHECK(counts[2] - counts[1] == 2 * per_layer);
  CHECK(counts[3] - counts[2] == 4 * per_layer);
  std::size_t layer_slots = 0;
  for (const auto& s : param_ledger(c))
    if (s.name.rfind("temporal.0.", 0) == 0) layer_slots += shape_size(s.shape);
  CHECK(layer_slots == per_layer);
}

TEST_CASE("forward output shapes for every receptive field") {
  for (std::size_t F : {1, 3, 9}) {
    ModelConfig c = small_config();
    c.frames = F;
    const ModelParams p = init_params(c, 1);
    std::mt19937_64 rng(F);
    const Array out = predict(p, c, random_array({3, F, 5, 2}, rng));
    CHECK(out.shape == Shape{3, 5, 3});
    for (double v : out.data) CHECK(std::isfinite(v));
  }
  const ModelConfig c = small_config();
  CHECK_THROWS_AS(predict(init_params(c, 1), c, Array({1, 4, 5, 2})), ShapeError);
  Graph g;
  BoundParams b(g, init_params(c, 1), false);
  CHECK_THROWS_AS(forward(b, c, g.constant(Array({24, 2}))), ShapeError);
}

TEST_CASE("batched forward equals per-window forward") {
  const ModelConfig c = small_config();
  const ModelParams p = randomized(c, 9);
  std::mt19937_64 rng(9);
  const Array batch = random_array({4, 5, 5, 2}, rng);
  const Array all = predict(p, c, batch);
  for (std::size_t b = 0; b < 4; ++b) {
    Array one({1, 5, 5, 2});
    std::copy_n(batch.data.begin() + b * 50, 50, one.data.begin());
    const Array single = predict(p, c, one);
    CHECK(max_abs_diff(single.data, std::span<const double>(all.data).subspan(b * 15, 15)) < 1e-12);
  }
}

TEST_CASE("zero-parameterized CJI and CFI are neutral") {
  const ModelConfig on = small_config();
  ModelConfig off = on;
  off.cji_enabled = false;
  off.cfi_enabled = false;
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    ModelParams p = randomized(on, 100 + trial);
    for (auto& slot : p.slots())
      if (slot.name.find(".cji.") != std::string::npos || slot.name.find(".cfi.") != std::string::npos)
        std::fill(slot.value.data.begin(), slot.value.data.end(), 0.0);
    std::vector<ParamSlot> kept;
    for (const auto& s : param_ledger(off)) kept.push_back({s.name, p.at(s.name)});
    const Array inputs = random_array({2, 5, 5, 2}, rng);
    CHECK(max_abs_diff(predict(p, on, inputs).data, predict(ModelParams(kept), off, inputs).data) < 1e-10);
  }
}

TEST_CASE("without temporal positions the model ignores frame order") {
  ModelConfig c = small_config();
  c.temporal_embed_enabled = false;
  ModelParams p = randomized(c, 11);
  std::fill(p.at("head.frame_weights").data.begin(), p.at("head.frame_weights").data.end(), 0.2);
  std::mt19937_64 rng(11);
  const Array x = random_array({1, 5, 5, 2}, rng);
  Array shuffled = x;
  const std::size_t perm[5] = {3, 0, 4, 1, 2};
  for (std::size_t f = 0; f < 5; ++f)
    std::copy_n(x.data.begin() + perm[f] * 10, 10, shuffled.data.begin() + f * 10);
  CHECK(max_abs_diff(predict(p, c, x).data, predict(p, c, shuffled).data) < 1e-12);
  // with positions the order matters
  c.temporal_embed_enabled = true;
  const ModelParams q = randomized(c, 11);
  CHECK(max_abs_diff(predict(q, c, x).data, predict(q, c, shuffled).data) > 1e-8);
}

TEST_CASE("forward is deterministic") {
  const ModelConfig c = small_config();
  std::mt19937_64 rng(12);
  const Array x = random_array({2, 5, 5, 2}, rng);
  CHECK(predict(init_params(c, 3), c, x) == predict(init_params(c, 3), c, x));
}

TEST_CASE("output scale multiplies the prediction") {
  ModelConfig c = small_config();
  const ModelParams p = randomized(c, 13);
  std::mt19937_64 rng(13);
  const Array x = random_array({1, 5, 5, 2}, rng);
  const Array unit = predict(p, c, x);
  c.output_scale = 1000.0;
  const Array mm = predict(p, c, x);
  for (std::size_t i = 0; i < unit.size(); ++i) CHECK(mm.data[i] == doctest::Approx(1000.0 * unit.data[i]));
}

TEST_CASE("finite differences agree with backprop through the whole model") {
  for (bool norm_first : {true, false}) {
    ModelConfig c = small_config();
    c.head_norm_first = norm_first;
    const ModelParams p = randomized(c, 14);
    std::mt19937_64 rng(14);
    const Array x = random_array({10 * 5, 2}, rng);
    const Array target = random_array({10, 3}, rng);
    std::vector<std::string> names;
    std::vector<Array> values;
    for (const auto& s : p.slots()) {
      names.push_back(s.name);
      values.push_back(s.value);
    }
    auto loss = [&](Graph& g, const std::vector<Tensor>& ts) {
      BoundParams b(g, names, ts);
      Tensor y = forward(b, c, g.constant(x));
      return mean(row_norms(sub(y, g.constant(target))));
    };
    const FiniteDiffReport r = finite_diff_check(loss, values, 1e-4);
    for (std::size_t i = 0; i < names.size(); ++i) {
      INFO(names[i]);
      CHECK(r.per_param[i] < 1e-5);
    }
  }
}
