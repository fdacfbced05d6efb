#include <cmath>
#include <cstring>
#include <vector>

#include "autransfer/rng.hpp"
#include "autransfer/tensor.hpp"
#include "doctest.h"
#include "support/gradcheck.hpp"

using namespace autransfer;
using testsupport::BuiltOp;
using testsupport::check_gradient;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("tensor shape and data invariants") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.at(1, 2) == 6.0);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor({0, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor(std::vector<std::size_t>{}), DimensionError);
}

TEST_CASE("matmul identity case") {
  Tape tape;
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {3, 4, 5, 6});
  Tensor out = matmul(tape, eye, m);
  CHECK(out.values()[0] == 3.0);
  CHECK(out.values()[1] == 4.0);
  CHECK(out.values()[2] == 5.0);
  CHECK(out.values()[3] == 6.0);
}

TEST_CASE("matmul hand arithmetic") {
  Tape tape;
  Tensor a({1, 2}, {1, 2});
  Tensor b({2, 1}, {3, 4});
  Tensor out = matmul(tape, a, b);
  CHECK(out.size() == 1);
  CHECK(out.item() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  Tensor a({2, 3});
  Tensor b({4, 5});
  CHECK_THROWS_WITH_AS(matmul(tape, a, b),
                       "matmul: inner dimensions disagree: [2x3] vs [4x5]", DimensionError);
}

TEST_CASE("matmul gradient with all-ones right factor") {
  // d sum(A B) / dA with B = [[1],[1]] is all ones
  Tape tape;
  Tensor a({2, 2}, {0.5, -1.5, 2.0, 0.25});
  Tensor b({2, 1}, {1, 1});
  Tensor loss = sum(tape, matmul(tape, a, b));
  backward(tape, loss);
  for (double g : a.grad()) CHECK(g == doctest::Approx(1.0).epsilon(1e-12));

  auto builder = [](Tape& t, std::span<const double> flat) {
    Tensor aa({2, 2}, {flat[0], flat[1], flat[2], flat[3]});
    Tensor bb({2, 1}, {1, 1});
    BuiltOp built;
    built.output = matmul(t, aa, bb);
    built.inputs = {aa};
    return built;
  };
  auto r = check_gradient(builder, 4, 20, 11);
  CHECK_MESSAGE(r.ok, r.failure);
}

TEST_CASE("add_bias additive identity and hand case") {
  Tape tape;
  Tensor x({2, 2}, {1, 2, 3, 4});
  Tensor zero(std::vector<std::size_t>{2});
  Tensor same = add_bias(tape, x, zero);
  CHECK(std::memcmp(same.values().data(), x.values().data(), 4 * sizeof(double)) == 0);

  Tensor row({1, 2}, {1, 1});
  Tensor b({2}, {2, 3});
  Tensor out = add_bias(tape, row, b);
  CHECK(out.values()[0] == 3.0);
  CHECK(out.values()[1] == 4.0);

  CHECK_THROWS_AS(add_bias(tape, x, Tensor(std::vector<std::size_t>{3})), DimensionError);
}

TEST_CASE("add_bias accumulates bias gradient over rows") {
  Tape tape;
  Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor b({2}, {0.5, -0.5});
  Tensor loss = sum(tape, add_bias(tape, x, b));
  backward(tape, loss);
  CHECK(b.grad()[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(b.grad()[1] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("relu sign cases") {
  Tape tape;
  Tensor x({3}, {-1, 0, 2});
  Tensor out = relu(tape, x);
  CHECK(out.values()[0] == 0.0);
  CHECK(out.values()[1] == 0.0);
  CHECK(out.values()[2] == 2.0);

  Tensor pos({3}, {0.1, 5, 42});
  Tensor same = relu(tape, pos);
  for (std::size_t i = 0; i < 3; ++i) CHECK(same.values()[i] == pos.values()[i]);
}

TEST_CASE("relu gates gradient by sign") {
  Tape tape;
  Tensor x({2}, {-1, 2});
  Tensor loss = sum(tape, relu(tape, x));
  backward(tape, loss);
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 1.0);
}

TEST_CASE("sigmoid analytic identities") {
  Tape tape;
  CHECK(sigmoid(tape, Tensor::scalar(0.0)).item() == 0.5);
  for (double v : {1.0, 5.0, 30.0}) {
    const double p = sigmoid(tape, Tensor::scalar(v)).item();
    const double q = sigmoid(tape, Tensor::scalar(-v)).item();
    CHECK(p + q == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("sigmoid saturates without overflow") {
  Tape tape;
  Tensor x({2}, {1000.0, -1000.0});
  Tensor out = sigmoid(tape, x);
  CHECK(std::isfinite(out.values()[0]));
  CHECK(std::isfinite(out.values()[1]));
  CHECK(out.values()[0] <= 1.0);
  CHECK(out.values()[0] >= 0.0);
  CHECK(out.values()[1] <= 1.0);
  CHECK(out.values()[1] >= 0.0);
}

TEST_CASE("sigmoid branch form matches the naive formula at moderate inputs") {
  Tape tape;
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const double x = rng.uniform(-20.0, 20.0);
    const double naive = 1.0 / (1.0 + std::exp(-x));
    CHECK(sigmoid(tape, Tensor::scalar(x)).item() == doctest::Approx(naive).epsilon(1e-12));
  }
}

TEST_CASE("softmax uniform and shift-invariant rows") {
  Tape tape;
  Tensor two({1, 2}, {0, 0});
  Tensor out = softmax_rows(tape, two);
  CHECK(out.values()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(out.values()[1] == doctest::Approx(0.5).epsilon(1e-15));

  for (double c : {-100.0, 0.0, 3.5, 100.0}) {
    Tensor same({1, 4}, {c, c, c, c});
    Tensor o = softmax_rows(tape, same);
    for (double v : o.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("softmax matches direct evaluation") {
  Tape tape;
  Tensor x({1, 3}, {1, 2, 3});
  Tensor out = softmax_rows(tape, x);
  double denom = 0.0;
  for (double v : {1.0, 2.0, 3.0}) denom += std::exp(v - 3.0);
  for (std::size_t j = 0; j < 3; ++j) {
    const double direct = std::exp(double(j + 1) - 3.0) / denom;
    CHECK(out.values()[j] == doctest::Approx(direct).epsilon(1e-9));
  }
}

TEST_CASE("softmax rows sum to one with entries in range") {
  Tape tape;
  Rng rng(13);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> v(4 * 6);
    for (double& e : v) e = rng.uniform(-30.0, 30.0);
    Tensor out = softmax_rows(tape, Tensor({4, 6}, v));
    for (std::size_t i = 0; i < 4; ++i) {
      double row_sum = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        const double p = out.at(i, j);
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
        row_sum += p;
      }
      CHECK(std::fabs(row_sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("backward seeds the loss gradient") {
  Tape tape;
  Tensor p = Tensor::scalar(3.25);
  backward(tape, p);
  CHECK(p.grad()[0] == 1.0);
}

TEST_CASE("backward accumulates over multiple paths") {
  Tape tape;
  Tensor p = Tensor::scalar(1.5);
  Tensor loss = add(tape, p, p);
  backward(tape, loss);
  CHECK(p.grad()[0] == 2.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape tape;
  Tensor v({2}, {1, 2});
  CHECK_THROWS_AS(backward(tape, v), ContractError);
}

TEST_CASE("two-layer network gradient matches finite differences") {
  // relu between two linear maps; points are redrawn when any relu input
  // sits within 1e-3 of the kink
  const std::size_t in = 3, hidden = 4, out_dim = 2, batch = 2;
  std::vector<double> x_values(batch * in);
  Rng data_rng(99);
  for (double& v : x_values) v = data_rng.uniform(-1.0, 1.0);
  const Tensor x({batch, in}, x_values);

  const std::size_t flat_size = in * hidden + hidden + hidden * out_dim + out_dim;
  auto builder = [&](Tape& t, std::span<const double> flat) {
    std::size_t pos = 0;
    auto take = [&](std::size_t n) {
      std::vector<double> v(flat.begin() + pos, flat.begin() + pos + n);
      pos += n;
      return v;
    };
    Tensor w1({in, hidden}, take(in * hidden));
    Tensor b1({hidden}, take(hidden));
    Tensor w2({hidden, out_dim}, take(hidden * out_dim));
    Tensor b2({out_dim}, take(out_dim));
    BuiltOp built;
    Tensor h = relu(t, add_bias(t, matmul(t, x, w1), b1));
    built.output = add_bias(t, matmul(t, h, w2), b2);
    built.inputs = {w1, b1, w2, b2};
    return built;
  };

  Rng rng(2024);
  int accepted = 0;
  while (accepted < 20) {
    std::vector<double> flat(flat_size);
    for (double& v : flat) v = rng.uniform(-1.0, 1.0);
    // probe the preactivations for kink proximity
    Tape probe;
    std::size_t pos = 0;
    Tensor w1({in, hidden}, std::vector<double>(flat.begin(), flat.begin() + in * hidden));
    pos = in * hidden;
    Tensor b1({hidden}, std::vector<double>(flat.begin() + pos, flat.begin() + pos + hidden));
    Tensor pre = add_bias(probe, matmul(probe, x, w1), b1);
    bool near_kink = false;
    for (double v : pre.values()) {
      if (std::fabs(v) < 1e-3) near_kink = true;
    }
    if (near_kink) continue;
    ++accepted;

    const auto value_of = [&](const std::vector<double>& point) {
      Tape t;
      BuiltOp built = builder(t, point);
      double acc = 0.0;
      for (double v : built.output.values()) acc += v;
      return acc;
    };
    const auto numeric = testsupport::central_differences(value_of, flat, 1e-5);

    Tape t;
    BuiltOp built = builder(t, flat);
    Tensor loss = sum(t, built.output);
    backward(t, loss);
    std::vector<double> analytic;
    for (auto& input : built.inputs) {
      auto g = input.grad();
      analytic.insert(analytic.end(), g.begin(), g.end());
    }
    for (std::size_t i = 0; i < flat_size; ++i) {
      CHECK(testsupport::close_rel(analytic[i], numeric[i], 1e-4));
    }
  }
}

TEST_CASE("zero_grad zeroes and is idempotent") {
  Tape tape;
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  Tensor loss = sum(tape, mul(tape, a, b));
  backward(tape, loss);
  CHECK(a.grad()[0] == 5.0);

  std::vector<Tensor> params{a, b};
  zero_grad(std::span<Tensor>(params));
  for (double g : a.grad()) CHECK(g == 0.0);
  for (double g : b.grad()) CHECK(g == 0.0);
  zero_grad(std::span<Tensor>(params));
  for (double g : a.grad()) CHECK(g == 0.0);
}

TEST_CASE("backward after zero_grad reproduces a fresh run") {
  auto run = [](bool twice) {
    Tensor a({2, 2}, {0.3, -0.7, 1.1, 0.9});
    Tensor b({2, 2}, {0.5, 0.25, -1.0, 2.0});
    if (twice) {
      Tape first;
      backward(first, sum(first, mul(first, a, b)));
      a.zero_grad();
      b.zero_grad();
    }
    Tape tape;
    backward(tape, sum(tape, mul(tape, a, b)));
    std::vector<double> grads(a.grad().begin(), a.grad().end());
    grads.insert(grads.end(), b.grad().begin(), b.grad().end());
    return grads;
  };
  CHECK(run(false) == run(true));
}

TEST_CASE("forward results are bit-identical across repeated runs") {
  Rng rng(5);
  std::vector<double> av(6), bv(6);
  for (double& v : av) v = rng.uniform(-3.0, 3.0);
  for (double& v : bv) v = rng.uniform(-3.0, 3.0);
  auto run = [&]() {
    Tape tape;
    Tensor a({2, 3}, av);
    Tensor b({3, 2}, bv);
    Tensor out = sigmoid(tape, matmul(tape, a, b));
    return std::vector<double>(out.values().begin(), out.values().end());
  };
  const auto first = run();
  const auto second = run();
  CHECK(std::memcmp(first.data(), second.data(), first.size() * sizeof(double)) == 0);
}

TEST_CASE("every op passes the finite-difference gradient check") {
  auto matmul_builder = [](Tape& t, std::span<const double> flat) {
    Tensor a({3, 4}, std::vector<double>(flat.begin(), flat.begin() + 12));
    Tensor b({4, 2}, std::vector<double>(flat.begin() + 12, flat.begin() + 20));
    BuiltOp built;
    built.output = matmul(t, a, b);
    built.inputs = {a, b};
    return built;
  };
  auto r = check_gradient(matmul_builder, 20, 25, 101);
  CHECK_MESSAGE(r.ok, "matmul: " << r.failure);

  auto bias_builder = [](Tape& t, std::span<const double> flat) {
    Tensor x({3, 2}, std::vector<double>(flat.begin(), flat.begin() + 6));
    Tensor b({2}, std::vector<double>(flat.begin() + 6, flat.begin() + 8));
    BuiltOp built;
    built.output = add_bias(t, x, b);
    built.inputs = {x, b};
    return built;
  };
  r = check_gradient(bias_builder, 8, 25, 102);
  CHECK_MESSAGE(r.ok, "add_bias: " << r.failure);

  auto relu_builder = [](Tape& t, std::span<const double> flat) {
    Tensor x({2, 3}, std::vector<double>(flat.begin(), flat.end()));
    BuiltOp built;
    built.output = relu(t, x);
    built.inputs = {x};
    return built;
  };
  r = check_gradient(relu_builder, 6, 25, 103, 1e-4, -2.0, 2.0, 1e-3);
  CHECK_MESSAGE(r.ok, "relu: " << r.failure);

  auto sigmoid_builder = [](Tape& t, std::span<const double> flat) {
    Tensor x({2, 3}, std::vector<double>(flat.begin(), flat.end()));
    BuiltOp built;
    built.output = sigmoid(t, x);
    built.inputs = {x};
    return built;
  };
  r = check_gradient(sigmoid_builder, 6, 25, 104);
  CHECK_MESSAGE(r.ok, "sigmoid: " << r.failure);

  auto softmax_builder = [](Tape& t, std::span<const double> flat) {
    Tensor x({2, 4}, std::vector<double>(flat.begin(), flat.end()));
    BuiltOp built;
    built.output = softmax_rows(t, x);
    built.inputs = {x};
    return built;
  };
  r = check_gradient(softmax_builder, 8, 25, 105);
  CHECK_MESSAGE(r.ok, "softmax_rows: " << r.failure);

  auto add_builder = [](Tape& t, std::span<const double> flat) {
    Tensor a({2, 2}, std::vector<double>(flat.begin(), flat.begin() + 4));
    Tensor b({2, 2}, std::vector<double>(flat.begin() + 4, flat.end()));
    BuiltOp built;
    built.output = add(t, a, b);
    built.inputs = {a, b};
    return built;
  };
  r = check_gradient(add_builder, 8, 25, 106);
  CHECK_MESSAGE(r.ok, "add: " << r.failure);

  auto mul_builder = [](Tape& t, std::span<const double> flat) {
    Tensor a({2, 2}, std::vector<double>(flat.begin(), flat.begin() + 4));
    Tensor b({2, 2}, std::vector<double>(flat.begin() + 4, flat.end()));
    BuiltOp built;
    built.output = mul(t, a, b);
    built.inputs = {a, b};
    return built;
  };
  r = check_gradient(mul_builder, 8, 25, 107);
  CHECK_MESSAGE(r.ok, "mul: " << r.failure);
}

TEST_SUITE_END();
