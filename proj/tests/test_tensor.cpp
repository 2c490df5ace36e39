#include <catch2/catch_amalgamated.hpp>

#include "bevflow/core/grad_check.hpp"
#include "bevflow/core/rng.hpp"
#include "bevflow/core/sampling.hpp"
#include "bevflow/core/tensor.hpp"

using bevflow::backward;
using bevflow::grad_check;
using bevflow::Rng;
using bevflow::Shape;
using Tensor = bevflow::Tensor<double>;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("matmul against identity returns the other operand") {
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from_data({2, 2}, {3.5, -1.25, 0.75, 2.0});
  Tensor out = bevflow::matmul(eye, a);
  for (int64_t i = 0; i < 4; ++i) CHECK(out[i] == a[i]);
}

TEST_CASE("matmul rejects mismatched inner dims") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH(bevflow::matmul(a, b), Catch::Matchers::ContainsSubstring("inner dims"));
}

TEST_CASE("softmax of a constant row is uniform") {
  Tensor x = Tensor::from_data({3}, {0, 0, 0});
  Tensor y = bevflow::softmax_lastdim(x);
  for (int i = 0; i < 3; ++i) CHECK_THAT(y[i], Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({4, 6}, rng, -5, 5);
    Tensor y = bevflow::softmax_lastdim(x);
    Tensor xs = bevflow::add_scalar(x, 13.75);
    Tensor ys = bevflow::softmax_lastdim(xs);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int c = 0; c < 6; ++c) s += y[r * 6 + c];
      CHECK_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
    for (int64_t i = 0; i < y.numel(); ++i) CHECK_THAT(y[i], Catch::Matchers::WithinAbs(ys[i], 1e-6));
  }
}

TEST_CASE("layernorm maps a constant vector to zeros") {
  Tensor x = Tensor::from_data({4}, {2.5, 2.5, 2.5, 2.5});
  Tensor y = bevflow::layernorm_lastdim(x);
  for (int i = 0; i < 4; ++i) CHECK_THAT(y[i], Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("backward of sum gives ones") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor loss = bevflow::sum(x);
  backward(loss);
  for (int64_t i = 0; i < 6; ++i) CHECK(x.grad()[static_cast<size_t>(i)] == 1.0);
}

TEST_CASE("backward of sum of squares gives 2x") {
  Tensor x = Tensor::from_data({3}, {1.5, -2.0, 0.25}, true);
  Tensor loss = bevflow::sum(bevflow::mul(x, x));
  backward(loss);
  for (int64_t i = 0; i < 3; ++i) CHECK_THAT(x.grad()[static_cast<size_t>(i)], Catch::Matchers::WithinAbs(2 * x[i], 1e-12));
}

TEST_CASE("backward requires a scalar loss") {
  Tensor x = Tensor::zeros({2, 2}, true);
  Tensor y = bevflow::mul(x, x);
  CHECK_THROWS_WITH(backward(y), Catch::Matchers::ContainsSubstring("scalar"));
}

TEST_CASE("backward on a detached graph leaves gradients zero") {
  Tensor x = Tensor::from_data({1}, {4.0}, true);
  backward(x);  // no tape
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("grad_check validates composed op chains") {
  Rng rng(11);
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng local(100 + seed);
    Tensor x = random_tensor({3, 4}, local);
    Tensor w = random_tensor({4, 5}, local);
    auto f = [&](const Tensor& v) {
      Tensor h = bevflow::relu(bevflow::matmul(v, w));
      Tensor s = bevflow::softmax_lastdim(bevflow::layernorm_lastdim(h));
      return bevflow::sum(bevflow::mul(s, s));
    };
    auto res = grad_check<double>(f, x);
    INFO("seed " << seed << " max rel err " << res.max_rel_error);
    CHECK(res.passed);
  }
}

TEST_CASE("grad_check flags a wrong backward rule") {
  // a square op whose backward deliberately uses 3x instead of 2x
  auto bad_square = [](const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * a[i];
    if (a.tracked()) {
      out.attach_node({a.node()}, [ga = a.grad_handle(), da = a.data_handle(), n = a.numel()](const std::vector<double>& go) {
        for (int64_t i = 0; i < n; ++i) (*ga)[static_cast<size_t>(i)] += 3.0 * (*da)[static_cast<size_t>(i)] * go[static_cast<size_t>(i)];
      });
    }
    return out;
  };
  Rng rng(3);
  Tensor x = random_tensor({4}, rng, 0.5, 2.0);
  auto f = [&](const Tensor& v) { return bevflow::sum(bad_square(v)); };
  auto res = grad_check<double>(f, x);
  CHECK_FALSE(res.passed);
}

TEST_CASE("grad_check covers shape surgery ops") {
  Rng rng(5);
  Tensor x = random_tensor({4, 6}, rng);
  auto f = [](const Tensor& v) {
    Tensor a = bevflow::slice_lastdim(v, 1, 3);
    Tensor b = bevflow::slice_lastdim(v, 3, 2);
    Tensor c = bevflow::concat_lastdim<double>({a, b});
    Tensor g = bevflow::gather_rows(c, {3, 0, 0, 2});
    return bevflow::sum(bevflow::mul(g, g));
  };
  CHECK(grad_check<double>(f, x).passed);
}

TEST_CASE("grad_check covers row ops") {
  Rng rng(6);
  Tensor x = random_tensor({5, 3}, rng);
  Tensor w = random_tensor({5}, rng, 0.1, 1.0);
  Tensor b = random_tensor({3}, rng);
  auto fx = [&](const Tensor& v) {
    Tensor h = bevflow::scale_rows(bevflow::add_row(v, b), w);
    return bevflow::sum(bevflow::mul(h, h));
  };
  CHECK(grad_check<double>(fx, x).passed);
  auto fw = [&](const Tensor& v) {
    Tensor h = bevflow::scale_rows(x, v);
    Tensor g = bevflow::group_sum_rows(h, 5);
    return bevflow::sum(bevflow::mul(g, g));
  };
  CHECK(grad_check<double>(fw, w).passed);
  auto fmax = [&](const Tensor& v) { return bevflow::sum(bevflow::max_rows(v)); };
  CHECK(grad_check<double>(fmax, x).passed);
}

TEST_CASE("cross entropy matches a hand-computed case and its gradient") {
  Tensor logits = Tensor::from_data({2, 3}, {1.0, 0.0, -1.0, 0.5, 0.5, 0.5}, true);
  std::vector<int> targets{0, 2};
  Tensor loss = bevflow::cross_entropy_rows(logits, targets);
  // row 0: logsumexp([1,0,-1]) - 1; row 1: log(3)
  const double lse = std::log(std::exp(1.0) + 1.0 + std::exp(-1.0));
  CHECK_THAT(loss.item(), Catch::Matchers::WithinAbs(((lse - 1.0) + std::log(3.0)) / 2.0, 1e-12));
  auto f = [&](const Tensor& v) { return bevflow::cross_entropy_rows(v, targets); };
  CHECK(grad_check<double>(f, logits).passed);
}

TEST_CASE("bilinear sample hits lattice points exactly") {
  Tensor grid = Tensor::zeros({3, 4, 2});
  Rng rng(9);
  for (int64_t i = 0; i < grid.numel(); ++i) grid[i] = rng.uniform();
  Tensor pts = Tensor::from_data({2, 2}, {1, 2, 0, 3});
  Tensor out = bevflow::bilinear_sample(grid, pts);
  CHECK(out[0] == grid[(1 * 4 + 2) * 2 + 0]);
  CHECK(out[1] == grid[(1 * 4 + 2) * 2 + 1]);
  CHECK(out[2] == grid[(0 * 4 + 3) * 2 + 0]);
}

TEST_CASE("bilinear sample at a cell midpoint averages the four corners") {
  Tensor grid = Tensor::from_data({2, 2, 1}, {1.0, 2.0, 3.0, 4.0});
  Tensor pts = Tensor::from_data({1, 2}, {0.5, 0.5});
  Tensor out = bevflow::bilinear_sample(grid, pts);
  CHECK_THAT(out[0], Catch::Matchers::WithinAbs(2.5, 1e-12));
}

TEST_CASE("bilinear sample out of range reads zero") {
  Tensor grid = Tensor::ones({2, 2, 1});
  Tensor pts = Tensor::from_data({2, 2}, {-5.0, 0.0, 0.0, 7.5});
  Tensor out = bevflow::bilinear_sample(grid, pts);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 0.0);
}

TEST_CASE("bilinear sample gradients pass grad_check in grid and points") {
  Rng rng(13);
  Tensor grid = random_tensor({4, 5, 3}, rng);
  Tensor pts = Tensor::from_data({3, 2}, {0.3, 1.7, 2.25, 3.1, 1.5, 0.5});
  auto fg = [&](const Tensor& g) {
    Tensor s = bevflow::bilinear_sample(g, pts);
    return bevflow::sum(bevflow::mul(s, s));
  };
  CHECK(grad_check<double>(fg, grid).passed);
  auto fp = [&](const Tensor& p) {
    Tensor s = bevflow::bilinear_sample(grid, p);
    return bevflow::sum(bevflow::mul(s, s));
  };
  CHECK(grad_check<double>(fp, pts).passed);
}

TEST_CASE("scatter add pool sums features per cell and counts drops") {
  Tensor feats = Tensor::from_data({3, 2}, {1, 2, 10, 20, 5, 6});
  auto res = bevflow::scatter_add_pool(feats, {3, 3, -1}, 2, 2);
  CHECK(res.dropped == 1);
  CHECK(res.grid[3 * 2 + 0] == 11.0);
  CHECK(res.grid[3 * 2 + 1] == 22.0);
  double total = 0;
  for (int64_t i = 0; i < res.grid.numel(); ++i) total += res.grid[i];
  CHECK_THAT(total, Catch::Matchers::WithinAbs(33.0, 1e-12));
}

TEST_CASE("scatter add pool matches a naive accumulation loop on 1000 points") {
  Rng rng(21);
  const int H = 6, W = 5, C = 3, P = 1000;
  Tensor feats = random_tensor({P, C}, rng);
  std::vector<int64_t> cells(P);
  for (int i = 0; i < P; ++i) cells[static_cast<size_t>(i)] = rng.uniform_int(-3, H * W - 1);
  auto res = bevflow::scatter_add_pool(feats, cells, H, W);

  std::vector<double> naive(static_cast<size_t>(H) * W * C, 0.0);
  int64_t drops = 0;
  for (int i = 0; i < P; ++i) {
    if (cells[static_cast<size_t>(i)] < 0) { ++drops; continue; }
    for (int c = 0; c < C; ++c) naive[static_cast<size_t>(cells[static_cast<size_t>(i)] * C + c)] += feats[i * C + c];
  }
  CHECK(res.dropped == drops);
  for (int64_t i = 0; i < res.grid.numel(); ++i)
    CHECK_THAT(res.grid[i], Catch::Matchers::WithinAbs(naive[static_cast<size_t>(i)], 1e-12));

  // mass conservation, relative
  double grid_sum = 0, feat_sum = 0;
  for (int64_t i = 0; i < res.grid.numel(); ++i) grid_sum += res.grid[i];
  for (int i = 0; i < P; ++i)
    if (cells[static_cast<size_t>(i)] >= 0)
      for (int c = 0; c < C; ++c) feat_sum += feats[i * C + c];
  CHECK_THAT(grid_sum, Catch::Matchers::WithinRel(feat_sum, 1e-6));
}

TEST_CASE("scatter add pool gradient routes only to pooled points") {
  Tensor feats = Tensor::from_data({2, 1}, {3.0, 4.0}, true);
  auto res = bevflow::scatter_add_pool(feats, {0, -1}, 1, 1);
  Tensor loss = bevflow::sum(res.grid);
  backward(loss);
  CHECK(feats.grad()[0] == 1.0);
  CHECK(feats.grad()[1] == 0.0);
}

TEST_CASE("unfold2d produces the im2col layout with zero padding") {
  // 2x2 single-channel image, 3x3 kernel, stride 1, pad 1
  Tensor img = Tensor::from_data({2, 2, 1}, {1, 2, 3, 4});
  Tensor cols = bevflow::unfold2d(img, 3, 1, 1);
  REQUIRE(cols.shape() == Shape{4, 9});
  // output pixel (0,0): rows above/left padded
  std::vector<double> expect{0, 0, 0, 0, 1, 2, 0, 3, 4};
  for (int i = 0; i < 9; ++i) CHECK(cols[i] == expect[static_cast<size_t>(i)]);
}

TEST_CASE("unfold1d with identity weights reproduces the sequence") {
  Tensor seq = Tensor::from_data({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor cols = bevflow::unfold1d(seq, 3);
  REQUIRE(cols.shape() == Shape{4, 6});
  // middle block of each row is the element itself
  for (int i = 0; i < 4; ++i) {
    CHECK(cols[i * 6 + 2] == seq[i * 2 + 0]);
    CHECK(cols[i * 6 + 3] == seq[i * 2 + 1]);
  }
}

TEST_CASE("reshape shares gradients with the original view") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor y = x.reshaped({3, 2});
  Tensor loss = bevflow::sum(bevflow::mul(y, y));
  backward(loss);
  for (int64_t i = 0; i < 6; ++i) CHECK_THAT(x.grad()[static_cast<size_t>(i)], Catch::Matchers::WithinAbs(2 * x[i], 1e-12));
}
