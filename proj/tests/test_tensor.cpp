#include <doctest.h>

#include <cmath>
#include <vector>

#include "advrf/core/ops.hpp"
#include "advrf/core/param_set.hpp"
#include "advrf/core/tensor.hpp"
#include "test_util.hpp"

using namespace advrf;
using advrf_test::conv2d_oracle;
using advrf_test::fd_max_rel_err;
using advrf_test::to_vec;

TEST_CASE("tensor invariants") {
  auto t = Tensor<float>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor<float>::from_data({2, 2}, {1, 2, 3}), DimensionError);
  t.zero_grad();
  CHECK(t.has_grad());
  for (int i = 0; i < 6; ++i) CHECK(t.grad_ref()[i] == 0.0f);
}

TEST_CASE("conv2d identity kernel") {
  auto x = Tensor<float>::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto k = Tensor<float>::filled({1, 1, 1, 1}, 1.0f);
  auto y = conv2d(x, k, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) CHECK(y.value()[i] == x.value()[i]);
}

TEST_CASE("conv2d output shape arithmetic") {
  auto x = Tensor<float>::zeros({2, 3, 8, 8});
  auto k = Tensor<float>::zeros({5, 3, 4, 4});
  auto y = conv2d(x, k, 2, 1);
  CHECK(y.shape() == Shape{2, 5, 4, 4});
}

TEST_CASE("conv2d matches the quadruple-loop oracle") {
  Pcg32 rng(42);
  auto x = Tensor<float>::randn({1, 1, 3, 3}, rng, 1.0);
  auto k = Tensor<float>::randn({1, 1, 2, 2}, rng, 1.0);
  auto y = conv2d(x, k, 1, 0);
  int oh = 0, ow = 0;
  auto expect = conv2d_oracle(to_vec(x), 1, 1, 3, 3, to_vec(k), 1, 2, 1, 0, oh, ow);
  REQUIRE(y.shape() == Shape{1, 1, oh, ow});
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(y.value()[static_cast<Eigen::Index>(i)] ==
          doctest::Approx(expect[i]).epsilon(1e-5));

  // a beefier case: strides, padding, multiple channels
  auto x2 = Tensor<float>::randn({2, 3, 7, 6}, rng, 1.0);
  auto k2 = Tensor<float>::randn({4, 3, 3, 3}, rng, 1.0);
  auto y2 = conv2d(x2, k2, 2, 1);
  auto expect2 =
      conv2d_oracle(to_vec(x2), 2, 3, 7, 6, to_vec(k2), 4, 3, 2, 1, oh, ow);
  REQUIRE(y2.shape() == Shape{2, 4, oh, ow});
  for (std::size_t i = 0; i < expect2.size(); ++i)
    CHECK(y2.value()[static_cast<Eigen::Index>(i)] ==
          doctest::Approx(expect2[i]).epsilon(1e-4));
}

TEST_CASE("conv2d channel mismatch names the axes") {
  auto x = Tensor<float>::zeros({1, 2, 4, 4});
  auto k = Tensor<float>::zeros({1, 3, 2, 2});
  CHECK_THROWS_AS(conv2d(x, k, 1, 0), DimensionError);
}

TEST_CASE("conv_transpose2d shape arithmetic and zero input") {
  auto x = Tensor<float>::zeros({1, 2, 4, 4});
  auto k = Tensor<float>::zeros({2, 3, 4, 4});
  auto y = conv_transpose2d(x, k, 2, 1);
  CHECK(y.shape() == Shape{1, 3, 8, 8});
  for (Eigen::Index i = 0; i < y.numel(); ++i) CHECK(y.value()[i] == 0.0f);
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  // forward of conv_transpose2d == input-gradient of conv2d, same kernel
  Pcg32 rng(7);
  auto x = Tensor<float>::randn({1, 2, 6, 6}, rng, 1.0, true);
  auto k = Tensor<float>::randn({3, 2, 3, 3}, rng, 0.5);
  auto y = conv2d(x, k, 2, 1);
  auto cot = Tensor<float>::randn(y.shape(), rng, 1.0);
  backward(sum(mul(y, cot)));
  auto via_transpose = conv_transpose2d(cot, k, 2, 1);
  REQUIRE(via_transpose.shape() == x.shape());
  for (Eigen::Index i = 0; i < x.numel(); ++i)
    CHECK(via_transpose.value()[i] ==
          doctest::Approx(x.grad_ref()[i]).epsilon(1e-4));
}

TEST_CASE("adjointness inner products over random shapes") {
  Pcg32 rng(11);
  for (int trial = 0; trial < 8; ++trial) {
    const int ci = 1 + static_cast<int>(rng.below(3));
    const int co = 1 + static_cast<int>(rng.below(3));
    const int hw = 5 + static_cast<int>(rng.below(4));
    const int kk = 2 + static_cast<int>(rng.below(2));
    const int stride = 1 + static_cast<int>(rng.below(2));
    auto x = Tensor<float>::randn({1, ci, hw, hw}, rng, 1.0);
    auto k = Tensor<float>::randn({co, ci, kk, kk}, rng, 1.0);
    auto ax = conv2d(x, k, stride, 1);
    auto y = Tensor<float>::randn(ax.shape(), rng, 1.0);
    auto aty = conv_transpose2d(y, k, stride, 1);
    const double lhs = (ax.value() * y.value()).sum();
    const double rhs = (x.value() * aty.value()).sum();
    CHECK(std::abs(lhs - rhs) <= 1e-4 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("global_average_pool") {
  auto c = Tensor<float>::filled({2, 3, 4, 4}, 3.5f);
  auto y = global_average_pool(c);
  REQUIRE(y.shape() == Shape{2, 3});
  for (Eigen::Index i = 0; i < y.numel(); ++i) CHECK(y.value()[i] == 3.5f);

  auto one = Tensor<float>::from_data({1, 2, 1, 1}, {4.0f, -2.0f});
  auto ys = global_average_pool(one);
  CHECK(ys.value()[0] == 4.0f);
  CHECK(ys.value()[1] == -2.0f);

  Pcg32 rng(3);
  auto r = Tensor<float>::randn({2, 3, 4, 4}, rng, 1.0);
  auto yr = global_average_pool(r);
  for (int n = 0; n < 2; ++n)
    for (int c2 = 0; c2 < 3; ++c2) {
      double acc = 0;
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w) acc += r.at4(n, c2, h, w);
      CHECK(yr.at2(n, c2) == doctest::Approx(acc / 16.0).epsilon(1e-6));
    }
}

TEST_CASE("upsample bilinear") {
  auto c = Tensor<float>::filled({1, 1, 2, 2}, 0.7f);
  auto y = upsample_bilinear(c, 5, 5);
  for (Eigen::Index i = 0; i < y.numel(); ++i)
    CHECK(y.value()[i] == doctest::Approx(0.7f));

  auto single = Tensor<float>::filled({1, 1, 1, 1}, 0.3f);
  auto yf = upsample_bilinear(single, 3, 4);
  for (Eigen::Index i = 0; i < yf.numel(); ++i) CHECK(yf.value()[i] == 0.3f);

  // closed-form weights for 2 -> 4, corner alignment off: 0, 0.25, 0.75, 1
  auto g = Tensor<float>::from_data({1, 1, 2, 2}, {0, 1, 0, 1});
  auto yg = upsample_bilinear(g, 4, 4);
  const float expect[4] = {0.0f, 0.25f, 0.75f, 1.0f};
  for (int h = 0; h < 4; ++h)
    for (int w = 0; w < 4; ++w)
      CHECK(yg.at4(0, 0, h, w) == doctest::Approx(expect[w]).epsilon(1e-6));
  // column-wise monotone, row-constant
  for (int h = 0; h < 4; ++h)
    for (int w = 1; w < 4; ++w)
      CHECK(yg.at4(0, 0, h, w) >= yg.at4(0, 0, h, w - 1));

  CHECK_THROWS_AS(upsample_bilinear(c, 1, 4), InvalidArgument);
}

TEST_CASE("masked_frobenius") {
  auto a = Tensor<float>::filled({1, 1, 2, 2}, 1.0f);
  auto b = Tensor<float>::zeros({1, 1, 2, 2});
  auto m1 = Tensor<float>::filled({1, 1, 2, 2}, 1.0f);
  CHECK(masked_frobenius(a, a, m1).item() == 0.0f);
  auto m0 = Tensor<float>::zeros({1, 1, 2, 2});
  CHECK(masked_frobenius(a, b, m0).item() == 0.0f);
  // ones vs zeros over 4 elements, full mask: sqrt(4)/4 = 0.5
  CHECK(masked_frobenius(a, b, m1).item() == doctest::Approx(0.5f));
  // unnormalized variant returns the plain Frobenius norm
  CHECK(masked_frobenius(a, b, m1, false).item() == doctest::Approx(2.0f));

  auto bad = Tensor<float>::zeros({1, 2, 2, 2});
  CHECK_THROWS_AS(masked_frobenius(a, bad, m1), DimensionError);
}

TEST_CASE("backward basics") {
  auto x = Tensor<float>::from_data({3}, {1, 2, 3}, true);
  backward(sum(x));
  for (int i = 0; i < 3; ++i) CHECK(x.grad_ref()[i] == 1.0f);

  auto z = Tensor<float>::zeros({1}, true);
  backward(sigmoid(z));
  CHECK(z.grad_ref()[0] == doctest::Approx(0.25f));

  auto ns = Tensor<float>::zeros({2}, true);
  CHECK_THROWS_AS(backward(ns), InvalidArgument);
}

TEST_CASE("finite differences agree for a composite graph") {
  Pcg32 rng(19);
  auto x = Tensor<double>::randn({1, 2, 5, 5}, rng, 0.7, true);
  auto k = Tensor<double>::randn({2, 2, 3, 3}, rng, 0.4, true);
  auto mask = Tensor<double>::randn({1, 1, 5, 5}, rng, 0.3, true);
  auto target = Tensor<double>::randn({1, 2, 5, 5}, rng, 0.5);
  auto make_loss = [&]() {
    auto h = sigmoid(conv2d(x, k, 1, 1));
    return masked_frobenius(h, target, sigmoid(mask));
  };
  CHECK(fd_max_rel_err(make_loss, {x, k, mask}) < 1e-3);
}

TEST_CASE("finite differences for pool, upsample, norm, concat, bias") {
  Pcg32 rng(23);
  auto x = Tensor<double>::randn({2, 2, 3, 3}, rng, 0.8, true);
  auto b = Tensor<double>::randn({2}, rng, 0.5, true);
  auto w = Tensor<double>::randn({3, 2}, rng, 0.6, true);
  auto wb = Tensor<double>::randn({3}, rng, 0.2, true);
  auto make_loss = [&]() {
    auto up = upsample_bilinear(channel_norm(bias_add(x, b)), 5, 5);
    auto both = concat_channels(up, scale(up, 0.5));
    auto pooled = global_average_pool(both);
    auto logits = linear(global_average_pool(up), w, wb);
    return add(softmax_cross_entropy(logits, {1, 2}), sum(mul(pooled, pooled)));
  };
  CHECK(fd_max_rel_err(make_loss, {x, b, w, wb}) < 1e-3);
}

TEST_CASE("finite differences through conv_transpose2d and leaky_relu") {
  Pcg32 rng(29);
  auto x = Tensor<double>::randn({1, 2, 3, 3}, rng, 0.9, true);
  auto k = Tensor<double>::randn({2, 3, 4, 4}, rng, 0.3, true);
  auto tgt = Tensor<double>::randn({1, 3, 6, 6}, rng, 0.4);
  auto m = Tensor<double>::filled({1, 1, 6, 6}, 0.8);
  auto make_loss = [&]() {
    auto y = leaky_relu(conv_transpose2d(x, k, 2, 1), 0.2);
    return masked_frobenius(y, tgt, m);
  };
  CHECK(fd_max_rel_err(make_loss, {x, k}) < 1e-3);
}

TEST_CASE("mul_mask broadcasts a single-channel mask") {
  Pcg32 rng(31);
  auto x = Tensor<double>::randn({2, 3, 4, 4}, rng, 1.0, true);
  auto m = Tensor<double>::randn({2, 1, 4, 4}, rng, 1.0, true);
  auto y = mul_mask(x, sigmoid(m));
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 4; ++w) {
          const double mv = 1.0 / (1.0 + std::exp(-m.at4(n, 0, h, w)));
          CHECK(y.at4(n, c, h, w) ==
                doctest::Approx(x.at4(n, c, h, w) * mv).epsilon(1e-9));
        }
  auto make_loss = [&]() {
    return sum(mul(mul_mask(x, sigmoid(m)), mul_mask(x, sigmoid(m))));
  };
  CHECK(fd_max_rel_err(make_loss, {x, m}) < 1e-3);
}

TEST_CASE("softmax cross entropy oracle") {
  // zero logits -> uniform prediction, loss = ln(K)
  auto z = Tensor<float>::zeros({2, 5});
  CHECK(softmax_cross_entropy(z, {0, 3}).item() ==
        doctest::Approx(std::log(5.0f)));

  // confident correct prediction
  auto conf = Tensor<float>::zeros({1, 4});
  conf.value()[2] = 30.0f;
  CHECK(softmax_cross_entropy(conf, {2}).item() < 0.01f);

  // random logits vs a scalar log-sum-exp oracle
  Pcg32 rng(5);
  auto l = Tensor<float>::randn({3, 6}, rng, 2.0);
  std::vector<int> labels{4, 0, 5};
  double expect = 0;
  for (int n = 0; n < 3; ++n) {
    double lse = 0;
    for (int k = 0; k < 6; ++k) lse += std::exp(static_cast<double>(l.at2(n, k)));
    expect += std::log(lse) - l.at2(n, labels[static_cast<std::size_t>(n)]);
  }
  expect /= 3.0;
  CHECK(softmax_cross_entropy(l, labels).item() ==
        doctest::Approx(expect).epsilon(1e-6));

  CHECK_THROWS_AS(softmax_cross_entropy(z, {0, 7}), InvalidArgument);
}

TEST_CASE("sgd with momentum") {
  ParamSet<float> ps;
  ps.add("w", Tensor<float>::filled({1}, 1.0f));
  ps.get("w").zero_grad();
  ps.get("w").grad()[0] = 2.0f;
  sgd_momentum_step(ps, 0.1f, 0.0f, 0.0f);
  CHECK(ps.get("w").value()[0] == doctest::Approx(1.0f - 0.1f * 2.0f));

  ParamSet<float> ps2;
  ps2.add("w", Tensor<float>::filled({1}, 1.0f));
  ps2.get("w").zero_grad();
  sgd_momentum_step(ps2, 0.1f, 0.0f, 0.0f);
  CHECK(ps2.get("w").value()[0] == 1.0f);

  // two steps, momentum 0.9, constant grad 1, lr 0.1: deltas -0.1, -0.19
  ParamSet<float> ps3;
  ps3.add("w", Tensor<float>::filled({1}, 0.0f));
  ps3.get("w").zero_grad();
  ps3.get("w").grad()[0] = 1.0f;
  sgd_momentum_step(ps3, 0.1f, 0.9f, 0.0f);
  CHECK(ps3.get("w").value()[0] == doctest::Approx(-0.1f));
  ps3.get("w").zero_grad();
  ps3.get("w").grad()[0] = 1.0f;
  sgd_momentum_step(ps3, 0.1f, 0.9f, 0.0f);
  CHECK(ps3.get("w").value()[0] == doctest::Approx(-0.29f));

  ps3.set_frozen(true);
  CHECK_THROWS_AS(sgd_momentum_step(ps3, 0.1f, 0.9f, 0.0f), ContractViolation);
}

TEST_CASE("frozen ParamSet receives exactly zero gradient") {
  Pcg32 rng(13);
  ParamSet<float> frozen;
  frozen.add("k", Tensor<float>::randn({2, 2, 3, 3}, rng, 0.5));
  frozen.set_frozen(true);
  auto x = Tensor<float>::randn({1, 2, 5, 5}, rng, 1.0, true);
  auto y = conv2d(x, frozen.get("k"), 1, 1);
  backward(sum(mul(y, y)));
  CHECK(frozen.grad_max_abs() == 0.0f);
  CHECK(!frozen.get("k").has_grad());
  CHECK(x.has_grad());  // gradient still flows through the frozen kernel
  CHECK(x.grad_ref().abs().maxCoeff() > 0.0f);
}

TEST_CASE("duplicate ParamSet names are rejected") {
  ParamSet<float> ps;
  ps.add("w", Tensor<float>::zeros({1}));
  CHECK_THROWS_AS(ps.add("w", Tensor<float>::zeros({1})), InvalidArgument);
}

TEST_CASE("param_hash is order and value sensitive") {
  ParamSet<float> a, b;
  a.add("w", Tensor<float>::filled({2}, 1.0f));
  b.add("w", Tensor<float>::filled({2}, 1.0f));
  CHECK(param_hash(a) == param_hash(b));
  b.get("w").value()[0] = 1.00001f;
  CHECK(param_hash(a) != param_hash(b));
}

TEST_CASE("clamp01 passes gradient only strictly inside the box") {
  auto x = Tensor<float>::from_data({4}, {-0.5f, 0.25f, 0.75f, 1.5f}, true);
  auto y = clamp01(x);
  CHECK(y.value()[0] == 0.0f);
  CHECK(y.value()[3] == 1.0f);
  backward(sum(y));
  CHECK(x.grad_ref()[0] == 0.0f);
  CHECK(x.grad_ref()[1] == 1.0f);
  CHECK(x.grad_ref()[2] == 1.0f);
  CHECK(x.grad_ref()[3] == 0.0f);
}

TEST_CASE("detach blocks gradient flow but keeps values") {
  auto x = Tensor<float>::from_data({2}, {3.0f, 4.0f}, true);
  auto d = detach(x);
  CHECK(d.value()[0] == 3.0f);
  CHECK(!d.requires_grad());
  auto loss = sum(mul(d, d));
  backward(loss);  // fully detached: no-op
  CHECK(!x.has_grad());
}
