#include <catch2/catch_amalgamated.hpp>

#include "bevflow/core/attention.hpp"
#include "bevflow/core/grad_check.hpp"

using bevflow::AttentionConfig;
using bevflow::DeformableConfig;
using bevflow::grad_check;
using bevflow::ParamStore;
using bevflow::Rng;
using bevflow::Shape;
using Tensor = bevflow::Tensor<double>;
using Mha = bevflow::MultiHeadAttention<double>;
using Deform = bevflow::DeformableAttention<double>;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

void make_identity_mha(Mha& mha) {
  bevflow::testing::set_identity(mha.q_proj().weight());
  bevflow::testing::set_identity(mha.k_proj().weight());
  bevflow::testing::set_identity(mha.v_proj().weight());
  bevflow::testing::set_identity(mha.out_proj().weight());
  bevflow::testing::set_zero(mha.q_proj().bias());
  bevflow::testing::set_zero(mha.k_proj().bias());
  bevflow::testing::set_zero(mha.v_proj().bias());
  bevflow::testing::set_zero(mha.out_proj().bias());
}

// plain double-loop attention, independent of the tensor ops
std::vector<double> loop_attention(const Tensor& q, const Tensor& k, const Tensor& v, const ParamStore<double>& ps,
                                   const std::string& prefix, const AttentionConfig& cfg) {
  const int M = q.dim(0), N = k.dim(0), D = cfg.embed_dim(), hd = cfg.head_dim;
  auto project = [&](const Tensor& x, const std::string& name) {
    const auto& w = ps.get(prefix + name + ".w");
    const auto& b = ps.get(prefix + name + ".b");
    std::vector<double> out(static_cast<size_t>(x.dim(0)) * D, 0.0);
    for (int r = 0; r < x.dim(0); ++r)
      for (int c = 0; c < D; ++c) {
        double s = b[c];
        for (int i = 0; i < D; ++i) s += x[r * D + i] * w[i * D + c];
        out[static_cast<size_t>(r) * D + c] = s;
      }
    return out;
  };
  auto qp = project(q, ".q"), kp = project(k, ".k"), vp = project(v, ".v");
  std::vector<double> mix(static_cast<size_t>(M) * D, 0.0);
  for (int h = 0; h < cfg.heads; ++h)
    for (int m = 0; m < M; ++m) {
      std::vector<double> scores(static_cast<size_t>(N));
      double mx = -1e300;
      for (int n = 0; n < N; ++n) {
        double s = 0;
        for (int i = 0; i < hd; ++i) s += qp[static_cast<size_t>(m) * D + h * hd + i] * kp[static_cast<size_t>(n) * D + h * hd + i];
        s /= std::sqrt(static_cast<double>(hd));
        scores[static_cast<size_t>(n)] = s;
        mx = std::max(mx, s);
      }
      double z = 0;
      for (double& s : scores) { s = std::exp(s - mx); z += s; }
      for (int n = 0; n < N; ++n)
        for (int i = 0; i < hd; ++i)
          mix[static_cast<size_t>(m) * D + h * hd + i] += scores[static_cast<size_t>(n)] / z * vp[static_cast<size_t>(n) * D + h * hd + i];
    }
  const auto& wo = ps.get(prefix + ".o.w");
  const auto& bo = ps.get(prefix + ".o.b");
  std::vector<double> out(static_cast<size_t>(M) * D, 0.0);
  for (int m = 0; m < M; ++m)
    for (int c = 0; c < D; ++c) {
      double s = bo[c];
      for (int i = 0; i < D; ++i) s += mix[static_cast<size_t>(m) * D + i] * wo[i * D + c];
      out[static_cast<size_t>(m) * D + c] = s;
    }
  return out;
}

}  // namespace

TEST_CASE("attention with one key returns that value row") {
  ParamStore<double> ps;
  Rng rng(1);
  AttentionConfig cfg{1, 4, 16, 1};
  Mha mha(ps, "a", cfg, rng);
  make_identity_mha(mha);
  Tensor q = random_tensor({1, 4}, rng);
  Tensor k = random_tensor({1, 4}, rng);
  Tensor v = random_tensor({1, 4}, rng);
  Tensor out = mha(q, k, v);
  for (int i = 0; i < 4; ++i) CHECK_THAT(out[i], Catch::Matchers::WithinAbs(v[i], 1e-12));
}

TEST_CASE("attention over identical keys averages the value rows") {
  ParamStore<double> ps;
  Rng rng(2);
  AttentionConfig cfg{2, 3, 16, 1};
  Mha mha(ps, "a", cfg, rng);
  make_identity_mha(mha);
  const int N = 5, D = 6;
  Tensor q = random_tensor({2, D}, rng);
  Tensor k = Tensor::zeros({N, D});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < D; ++c) k[n * D + c] = 0.37 * c;
  Tensor v = random_tensor({N, D}, rng);
  Tensor out = mha(q, k, v);
  for (int m = 0; m < 2; ++m)
    for (int c = 0; c < D; ++c) {
      double mean = 0;
      for (int n = 0; n < N; ++n) mean += v[n * D + c];
      mean /= N;
      CHECK_THAT(out[m * D + c], Catch::Matchers::WithinAbs(mean, 1e-9));
    }
}

TEST_CASE("attention matches the double-loop reference on random inputs") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    ParamStore<double> ps;
    Rng rng(40 + seed);
    AttentionConfig cfg{2, 2, 16, 1};
    Mha mha(ps, "a", cfg, rng);
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k = random_tensor({5, 4}, rng);
    Tensor v = random_tensor({5, 4}, rng);
    Tensor out = mha(q, k, v);
    auto ref = loop_attention(q, k, v, ps, "a", cfg);
    for (int64_t i = 0; i < out.numel(); ++i)
      CHECK_THAT(out[i], Catch::Matchers::WithinAbs(ref[static_cast<size_t>(i)], 1e-9));
  }
}

TEST_CASE("attention outputs stay in the convex hull of values under identity projections") {
  ParamStore<double> ps;
  Rng rng(17);
  AttentionConfig cfg{1, 5, 16, 1};
  Mha mha(ps, "a", cfg, rng);
  make_identity_mha(mha);
  Tensor q = random_tensor({4, 5}, rng, -2, 2);
  Tensor k = random_tensor({6, 5}, rng, -2, 2);
  Tensor v = random_tensor({6, 5}, rng, -2, 2);
  Tensor out = mha(q, k, v);
  for (int c = 0; c < 5; ++c) {
    double lo = 1e300, hi = -1e300;
    for (int n = 0; n < 6; ++n) {
      lo = std::min(lo, v[n * 5 + c]);
      hi = std::max(hi, v[n * 5 + c]);
    }
    for (int m = 0; m < 4; ++m) {
      CHECK(out[m * 5 + c] >= lo - 1e-9);
      CHECK(out[m * 5 + c] <= hi + 1e-9);
    }
  }
}

TEST_CASE("attention config rejects a non-divisible embed dim") {
  CHECK_THROWS_WITH(bevflow::make_attention_config(10, 4), Catch::Matchers::ContainsSubstring("divisible"));
}

TEST_CASE("attention is differentiable end to end") {
  ParamStore<double> ps;
  Rng rng(23);
  AttentionConfig cfg{2, 2, 16, 1};
  Mha mha(ps, "a", cfg, rng);
  Tensor q = random_tensor({3, 4}, rng);
  Tensor k = random_tensor({4, 4}, rng);
  Tensor v = random_tensor({4, 4}, rng);
  auto f = [&](const Tensor& x) {
    Tensor out = mha(x, k, v);
    return bevflow::sum(bevflow::mul(out, out));
  };
  CHECK(grad_check<double>(f, q).passed);
}

// ---------------------------------------------------------------------------
// deformable attention

namespace {

struct DeformSetup {
  ParamStore<double> ps;
  std::unique_ptr<Deform> attn;
  DeformSetup(int heads, int hd, DeformableConfig cfg, uint64_t seed) {
    Rng rng(seed);
    attn = std::make_unique<Deform>(ps, "d", heads, hd, cfg, rng);
  }
};

// explicit per-point sampling-loop implementation
std::vector<double> loop_deform(const Tensor& queries, const Tensor& ref, const Tensor& value,
                                const ParamStore<double>& ps, int heads, int hd, const DeformableConfig& cfg) {
  const int R = queries.dim(0), H = value.dim(0), W = value.dim(1), D = heads * hd, K = cfg.n_points;
  auto matvec = [&](const std::string& name, const double* x, int out_dim, std::vector<double>& out) {
    const auto& w = ps.get("d." + name + ".w");
    const auto& b = ps.get("d." + name + ".b");
    for (int c = 0; c < out_dim; ++c) {
      double s = b[c];
      for (int i = 0; i < D; ++i) s += x[i] * w[i * out_dim + c];
      out[static_cast<size_t>(c)] = s;
    }
  };
  // project the whole value grid once
  std::vector<double> vproj(static_cast<size_t>(H) * W * D);
  for (int p = 0; p < H * W; ++p) {
    std::vector<double> row(static_cast<size_t>(D));
    matvec("val", value.data() + static_cast<int64_t>(p) * D, D, row);
    std::copy(row.begin(), row.end(), vproj.begin() + static_cast<size_t>(p) * D);
  }
  auto sample = [&](double r, double c, int ch) {
    const int r0 = static_cast<int>(std::floor(r)), c0 = static_cast<int>(std::floor(c));
    const double fr = r - r0, fc = c - c0;
    double acc = 0;
    const int rr[4] = {r0, r0, r0 + 1, r0 + 1}, cc[4] = {c0, c0 + 1, c0, c0 + 1};
    const double ww[4] = {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
    for (int k = 0; k < 4; ++k)
      if (rr[k] >= 0 && rr[k] < H && cc[k] >= 0 && cc[k] < W)
        acc += ww[k] * vproj[(static_cast<size_t>(rr[k]) * W + cc[k]) * D + ch];
    return acc;
  };
  std::vector<double> out(static_cast<size_t>(R) * D);
  for (int q = 0; q < R; ++q) {
    std::vector<double> offs(static_cast<size_t>(heads) * K * 2), logits(static_cast<size_t>(heads) * K);
    matvec("off", queries.data() + static_cast<int64_t>(q) * D, heads * K * 2, offs);
    matvec("wgt", queries.data() + static_cast<int64_t>(q) * D, heads * K, logits);
    std::vector<double> mix(static_cast<size_t>(D), 0.0);
    for (int h = 0; h < heads; ++h) {
      double mx = -1e300;
      for (int k = 0; k < K; ++k) mx = std::max(mx, logits[static_cast<size_t>(h) * K + k]);
      double z = 0;
      std::vector<double> w(static_cast<size_t>(K));
      for (int k = 0; k < K; ++k) {
        w[static_cast<size_t>(k)] = std::exp(logits[static_cast<size_t>(h) * K + k] - mx);
        z += w[static_cast<size_t>(k)];
      }
      for (int k = 0; k < K; ++k) {
        const double wr = std::tanh(offs[(static_cast<size_t>(h) * K + k) * 2 + 0]) * cfg.offset_scale;
        const double wc = std::tanh(offs[(static_cast<size_t>(h) * K + k) * 2 + 1]) * cfg.offset_scale;
        const double pr = ref[q * 2] + wr, pc = ref[q * 2 + 1] + wc;
        for (int ch = 0; ch < hd; ++ch)
          mix[static_cast<size_t>(h) * hd + ch] += w[static_cast<size_t>(k)] / z * sample(pr, pc, h * hd + ch);
      }
    }
    std::vector<double> o(static_cast<size_t>(D));
    matvec("out", mix.data(), D, o);
    std::copy(o.begin(), o.end(), out.begin() + static_cast<size_t>(q) * D);
  }
  return out;
}

}  // namespace

TEST_CASE("deformable attention with zero offset and one point reads the value at p") {
  DeformSetup s(1, 4, DeformableConfig{1, 2.0}, 5);
  bevflow::testing::set_zero(s.attn->offset_proj().weight());
  bevflow::testing::set_zero(s.attn->offset_proj().bias());
  bevflow::testing::set_identity(s.attn->value_proj().weight());
  bevflow::testing::set_zero(s.attn->value_proj().bias());
  bevflow::testing::set_identity(s.attn->out_proj().weight());
  bevflow::testing::set_zero(s.attn->out_proj().bias());
  Rng rng(77);
  Tensor value = random_tensor({4, 5, 4}, rng);
  Tensor q = random_tensor({4}, rng);
  Tensor out = bevflow::deformable_attention(*s.attn, q, 2.0, 3.0, value);
  for (int c = 0; c < 4; ++c) CHECK_THAT(out[c], Catch::Matchers::WithinAbs(value[(2 * 5 + 3) * 4 + c], 1e-12));
}

TEST_CASE("deformable attention reads zero when every sample lands outside the grid") {
  DeformSetup s(2, 2, DeformableConfig{2, 1000.0}, 6);
  bevflow::testing::set_zero(s.attn->offset_proj().weight());
  auto& ob = s.attn->offset_proj().bias();
  for (int64_t i = 0; i < ob.numel(); ++i) ob[i] = 10.0;  // tanh ~ 1 -> offset ~ 1000 cells
  bevflow::testing::set_zero(s.attn->out_proj().bias());
  Rng rng(78);
  Tensor value = random_tensor({4, 4, 4}, rng);
  Tensor q = random_tensor({4}, rng);
  Tensor out = bevflow::deformable_attention(*s.attn, q, 1.0, 1.0, value);
  for (int c = 0; c < 4; ++c) CHECK_THAT(out[c], Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("deformable attention matches the explicit sampling loop") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    DeformSetup s(2, 3, DeformableConfig{4, 2.0}, 100 + seed);
    Rng rng(200 + seed);
    Tensor value = random_tensor({6, 7, 6}, rng);
    Tensor queries = random_tensor({5, 6}, rng);
    Tensor ref = Tensor::zeros({5, 2});
    for (int i = 0; i < 5; ++i) {
      ref[i * 2] = rng.uniform(0, 5);
      ref[i * 2 + 1] = rng.uniform(0, 6);
    }
    Tensor out = (*s.attn)(queries, ref, value);
    auto expect = loop_deform(queries, ref, value, s.ps, 2, 3, DeformableConfig{4, 2.0});
    for (int64_t i = 0; i < out.numel(); ++i)
      CHECK_THAT(out[i], Catch::Matchers::WithinAbs(expect[static_cast<size_t>(i)], 1e-9));
  }
}

TEST_CASE("deformable attention weights sum to one per head") {
  DeformSetup s(3, 2, DeformableConfig{4, 2.0}, 9);
  Rng rng(10);
  Tensor queries = random_tensor({7, 6}, rng, -3, 3);
  Tensor w = s.attn->attention_weights(queries);
  REQUIRE(w.shape() == Shape{7, 12});
  for (int q = 0; q < 7; ++q)
    for (int h = 0; h < 3; ++h) {
      double sum = 0;
      for (int k = 0; k < 4; ++k) sum += w[q * 12 + h * 4 + k];
      CHECK_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
}

TEST_CASE("deformable attention rejects reference points outside the grid") {
  DeformSetup s(1, 4, DeformableConfig{1, 2.0}, 11);
  Tensor value = Tensor::zeros({4, 4, 4});
  Tensor q = Tensor::zeros({4});
  CHECK_THROWS_WITH(bevflow::deformable_attention(*s.attn, q, -0.5, 1.0, value),
                    Catch::Matchers::ContainsSubstring("outside grid"));
  CHECK_THROWS_WITH(bevflow::deformable_attention(*s.attn, q, 1.0, 4.5, value),
                    Catch::Matchers::ContainsSubstring("outside grid"));
}

TEST_CASE("deformable attention is differentiable in queries and value grid") {
  DeformSetup s(2, 2, DeformableConfig{2, 2.0}, 31);
  Rng rng(32);
  Tensor value = random_tensor({4, 4, 4}, rng);
  Tensor queries = random_tensor({3, 4}, rng);
  Tensor ref = Tensor::from_data({3, 2}, {0.5, 1.5, 2.0, 2.0, 3.0, 0.25});
  auto fq = [&](const Tensor& x) {
    Tensor out = (*s.attn)(x, ref, value);
    return bevflow::sum(bevflow::mul(out, out));
  };
  CHECK(grad_check<double>(fq, queries, 1e-5, 1e-4).passed);
  auto fv = [&](const Tensor& x) {
    Tensor out = (*s.attn)(queries, ref, x);
    return bevflow::sum(bevflow::mul(out, out));
  };
  CHECK(grad_check<double>(fv, value, 1e-5, 1e-4).passed);
}
