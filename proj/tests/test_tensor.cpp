#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "hstmixer/gradcheck.hpp"
#include "hstmixer/nn.hpp"
#include "hstmixer/ops.hpp"
#include "hstmixer/tensor.hpp"

using namespace hstmixer;

namespace {

Tensor<double> rand_tensor(Shape shape, Rng& rng, double lo = -2.0,
                           double hi = 2.0) {
  return Tensor<double>::randu(std::move(shape), rng, lo, hi);
}

Tensor<double> rand_leaf(Shape shape, Rng& rng) {
  return rand_tensor(std::move(shape), rng).set_requires_grad();
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  auto I = Tensor<double>::from_vector({2, 2}, {1, 0, 0, 1});
  auto B = Tensor<double>::from_vector({2, 2}, {3, 4, 5, 6});
  auto C = matmul(I, B);
  for (Index i = 0; i < 4; ++i) CHECK(C.data()[i] == doctest::Approx(B.data()[i]));

  auto a = Tensor<double>::from_vector({1, 2}, {1, 2});
  auto b = Tensor<double>::from_vector({2, 1}, {3, 4});
  CHECK(matmul(a, b).value() == doctest::Approx(11.0));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       doctest::Contains("[2, 3]") && doctest::Contains("[4, 2]"),
                       ShapeError);
}

TEST_CASE("matmul gradients vs central finite differences") {
  Rng rng(42);
  auto a = rand_leaf({3, 4}, rng);
  auto b = rand_leaf({4, 2}, rng);
  auto report = gradcheck([&] { return sum(matmul(a, b)); },
                          {{"a", a}, {"b", b}});
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("matmul broadcast over leading batch axes") {
  Rng rng(7);
  auto a = rand_leaf({2, 3, 4, 5}, rng);
  auto w = rand_leaf({5, 2}, rng);
  auto out = matmul(a, w);
  CHECK(out.shape() == Shape{2, 3, 4, 2});
  // Spot-check one batch element against a flat 2D product.
  auto a11 = Tensor<double>::from_vector({4, 5}, std::vector<double>(
      a.data() + (1 * 3 + 2) * 20, a.data() + (1 * 3 + 2) * 20 + 20));
  auto ref = matmul(a11, w);
  for (Index i = 0; i < 8; ++i)
    CHECK(out.data()[(1 * 3 + 2) * 8 + i] == doctest::Approx(ref.data()[i]));
  auto report = gradcheck([&] { return sum(matmul(a, w)); },
                          {{"a", a}, {"w", w}});
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("softmax values") {
  auto x = Tensor<double>::from_vector({3}, {0, 0, 0});
  auto y = softmax(x, 0);
  for (Index i = 0; i < 3; ++i)
    CHECK(y.data()[i] == doctest::Approx(1.0 / 3.0));

  auto one = softmax(Tensor<double>::from_vector({2, 1}, {5, -3}), 1);
  CHECK(one.data()[0] == doctest::Approx(1.0));
  CHECK(one.data()[1] == doctest::Approx(1.0));

  auto z = softmax(Tensor<double>::from_vector({3}, {1, 2, 3}), 0);
  CHECK(z.data()[0] == doctest::Approx(0.09003).epsilon(1e-4));
  CHECK(z.data()[1] == doctest::Approx(0.24473).epsilon(1e-4));
  CHECK(z.data()[2] == doctest::Approx(0.66524).epsilon(1e-4));
}

TEST_CASE("softmax sums to one for any finite input") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = rand_tensor({4, 6}, rng, -60.0, 60.0);
    auto y = softmax(x, 1);
    for (Index r = 0; r < 4; ++r) {
      double s = 0.0;
      for (Index c = 0; c < 6; ++c) s += y.data()[r * 6 + c];
      CHECK(std::fabs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("softmax gradient") {
  Rng rng(11);
  auto x = rand_leaf({2, 5}, rng);
  auto w = rand_tensor({2, 5}, rng);
  auto report = gradcheck([&] { return sum(mul(softmax(x, 1), w)); },
                          {{"x", x}});
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("gated_fuse") {
  auto a = Tensor<double>::from_vector({3}, {0, 0, 0});
  auto b = Tensor<double>::from_vector({3}, {-1, 0.5, 7});
  auto y = gated_fuse(a, b);
  for (Index i = 0; i < 3; ++i) CHECK(y.data()[i] == doctest::Approx(0.0));

  auto a2 = Tensor<double>::from_vector({2}, {0.3, -1.4});
  auto b2 = Tensor<double>::full({2}, 20.0);
  auto y2 = gated_fuse(a2, b2);
  CHECK(std::fabs(y2.data()[0] - std::tanh(0.3)) < 1e-8);
  CHECK(std::fabs(y2.data()[1] - std::tanh(-1.4)) < 1e-8);

  auto y3 = gated_fuse(Tensor<double>::scalar(1.0), Tensor<double>::scalar(0.0));
  CHECK(y3.value() == doctest::Approx(0.38080).epsilon(1e-4));

  CHECK_THROWS_AS(gated_fuse(Tensor<double>::zeros({2}),
                             Tensor<double>::zeros({3})),
                  ShapeError);
}

TEST_CASE("layernorm values") {
  auto gamma = Tensor<double>::full({4}, 1.0);
  auto beta = Tensor<double>::zeros({4});
  auto x = Tensor<double>::full({4}, 3.5);
  auto y = layernorm(x, 0, gamma, beta);
  for (Index i = 0; i < 4; ++i) CHECK(std::fabs(y.data()[i]) < 1e-9);

  auto g2 = Tensor<double>::full({2}, 1.0);
  auto b2 = Tensor<double>::zeros({2});
  auto y2 = layernorm(Tensor<double>::from_vector({2}, {1, 3}), 0, g2, b2);
  CHECK(y2.data()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y2.data()[1] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("layernorm gradient") {
  Rng rng(5);
  auto x = rand_leaf({2, 5}, rng);
  auto gamma = rand_leaf({5}, rng);
  auto beta = rand_leaf({5}, rng);
  auto w = rand_tensor({2, 5}, rng);
  auto report = gradcheck(
      [&] { return sum(mul(layernorm(x, 1, gamma, beta), w)); },
      {{"x", x}, {"gamma", gamma}, {"beta", beta}});
  CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("gradcheck basics") {
  Rng rng(9);
  auto x = rand_leaf({3, 3}, rng);
  auto r1 = gradcheck([&] { return sum(x); }, {{"x", x}});
  CHECK(r1.max_rel_err < 1e-10);

  auto w = rand_leaf({3, 2}, rng);
  auto r2 = gradcheck([&] { return sum(matmul(x, w)); }, {{"x", x}, {"w", w}});
  CHECK(r2.max_rel_err < 1e-7);

  CHECK_THROWS_AS(
      gradcheck([&] { return mul(x, x); }, {{"x", x}}), NumericError);
}

TEST_CASE("finite differences across the op set") {
  Rng rng(21);
  auto x = rand_leaf({2, 3, 4}, rng);
  auto y = rand_leaf({2, 3, 4}, rng);
  auto probe = rand_tensor({2, 3, 4}, rng);

  auto fd = [&](const std::function<Tensor<double>()>& f) {
    return gradcheck(f, {{"x", x}, {"y", y}}).max_rel_err;
  };

  CHECK(fd([&] { return sum(mul(add(x, y), probe)); }) < 1e-5);
  CHECK(fd([&] { return sum(mul(sub(x, y), probe)); }) < 1e-5);
  CHECK(fd([&] { return sum(mul(mul(x, y), probe)); }) < 1e-5);
  CHECK(fd([&] { return sum(mul(div(x, add_scalar(mul(y, y), 1.0)), probe)); }) < 1e-5);
  CHECK(fd([&] { return sum(mul(tanh(x), probe)); }) < 1e-5);
  CHECK(fd([&] { return sum(mul(sigmoid(x), probe)); }) < 1e-5);
  CHECK(fd([&] { return sum(mul(gelu(x), probe)); }) < 1e-5);
  CHECK(fd([&] { return sum(mul(sqrt(add_scalar(mul(x, x), 1.0)), probe)); }) < 1e-5);
  CHECK(fd([&] { return sum(mul(permute(x, {2, 0, 1}),
                                permute(probe, {2, 0, 1}))); }) < 1e-5);
  CHECK(fd([&] { return sum(mul(reshape(x, {6, 4}), reshape(probe, {6, 4}))); }) < 1e-5);
  CHECK(fd([&] { return sum(mul(slice(x, 2, 1, 2), slice(probe, 2, 1, 2))); }) < 1e-5);
  CHECK(fd([&] {
    auto c = concat<double>({slice(x, 1, 0, 2), slice(y, 1, 0, 1)}, 1);
    return sum(mul(c, probe));
  }) < 1e-5);
  CHECK(fd([&] { return mean(mul(x, probe)); }) < 1e-5);
  CHECK(fd([&] { return sum(mul(sum(x, 1), sum(probe, 1))); }) < 1e-5);
  CHECK(fd([&] { return sum(mul(mean(x, 2, true), mean(probe, 2, true))); }) < 1e-5);
  CHECK(fd([&] { return mean_absolute_error(x, y); }) < 1e-5);
  CHECK(fd([&] { return cosine_similarity(x, y); }) < 1e-5);
  CHECK(fd([&] {
    auto b = broadcast_to(slice(x, 1, 0, 1), x.shape());
    return sum(mul(b, probe));
  }) < 1e-5);
  CHECK(fd([&] { return sum(mul(gated_fuse(x, y), probe)); }) < 1e-5);
}

TEST_CASE("reshape and permute round-trips are identity") {
  Rng rng(33);
  auto x = rand_tensor({2, 3, 4, 5}, rng);
  auto r = reshape(reshape(x, {6, 20}), x.shape());
  for (Index i = 0; i < x.size(); ++i) CHECK(r.data()[i] == x.data()[i]);

  std::vector<Index> perm{3, 1, 0, 2};
  std::vector<Index> inv(4);
  for (Index k = 0; k < 4; ++k) inv[perm[k]] = k;
  auto p = permute(permute(x, perm), inv);
  for (Index i = 0; i < x.size(); ++i) CHECK(p.data()[i] == x.data()[i]);
}

TEST_CASE("broadcast_to values and reduction gradient") {
  auto v = Tensor<double>::from_vector({1, 3}, {1, 2, 3});
  auto b = broadcast_to(v, {2, 3});
  CHECK(b.at({0, 1}) == 2.0);
  CHECK(b.at({1, 2}) == 3.0);
  CHECK_THROWS_AS(broadcast_to(v, {2, 4}), ShapeError);
}

TEST_CASE("gather_rows lookup and scatter-add gradient") {
  Rng rng(17);
  auto table = rand_leaf({5, 3}, rng);
  std::vector<Index> idx{4, 0, 4};
  auto out = gather_rows(table, idx);
  CHECK(out.shape() == Shape{3, 3});
  for (Index c = 0; c < 3; ++c) {
    CHECK(out.at({0, c}) == table.at({4, c}));
    CHECK(out.at({1, c}) == table.at({0, c}));
  }
  auto report = gradcheck([&] { return sum(mul(gather_rows(table, idx),
                                               gather_rows(table, idx))); },
                          {{"table", table}});
  CHECK(report.max_rel_err < 1e-6);
  CHECK_THROWS_AS(gather_rows(table, {5}), ShapeError);
}

TEST_CASE("tensors off the tape carry no grad after backward") {
  Rng rng(2);
  auto x = rand_leaf({2, 2}, rng);
  auto frozen = rand_tensor({2, 2}, rng);  // requires_grad false
  Tape<double> tape;
  auto loss = sum(mul(x, frozen));
  tape.backward(loss);
  CHECK(x.has_grad());
  CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("backward is deterministic") {
  auto run = [] {
    Rng rng(123);
    auto x = rand_leaf({4, 4}, rng);
    auto w = rand_leaf({4, 4}, rng);
    Tape<double> tape;
    auto loss = sum(mul(softmax(matmul(x, w), 1), x));
    tape.backward(loss);
    std::vector<double> grads = x.grad_vec();
    grads.insert(grads.end(), w.grad_vec().begin(), w.grad_vec().end());
    return grads;
  };
  auto g1 = run();
  auto g2 = run();
  REQUIRE(g1.size() == g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("cosine similarity handles zero-norm inputs") {
  auto z = Tensor<double>::zeros({4});
  auto v = Tensor<double>::from_vector({4}, {1, 2, 3, 4});
  CHECK(cosine_similarity(z, v).value() == doctest::Approx(0.0));
  CHECK(cosine_similarity(v, v).value() == doctest::Approx(1.0));
}

TEST_CASE("cast between precisions") {
  auto d = Tensor<double>::from_vector({2}, {1.5, -2.25});
  auto f = cast<float>(d);
  CHECK(f.data()[0] == 1.5f);
  auto back = cast<double>(f);
  CHECK(back.data()[1] == -2.25);
}
