#include <cmath>
#include <vector>

#include "autransfer/losses.hpp"
#include "doctest.h"
#include "support/gradcheck.hpp"

using namespace autransfer;
using testsupport::BuiltOp;
using testsupport::check_gradient;

TEST_SUITE_BEGIN("losses");

TEST_CASE("cross entropy of uniform logits equals ln C") {
  Tape tape;
  for (std::size_t classes : {2, 6, 12}) {
    Tensor logits({3, classes});
    const std::vector<std::size_t> labels{0, classes - 1, classes / 2};
    const double loss = cross_entropy(tape, logits, labels).item();
    CHECK(std::fabs(loss - std::log(double(classes))) < 1e-12);
  }
}

TEST_CASE("cross entropy vanishes at saturated correct logit") {
  Tape tape;
  Tensor logits({1, 6}, {50, 0, 0, 0, 0, 0});
  const std::vector<std::size_t> labels{0};
  CHECK(cross_entropy(tape, logits, labels).item() < 1e-20);
  CHECK(cross_entropy(tape, logits, labels).item() >= 0.0);
}

TEST_CASE("cross entropy matches -log softmax") {
  Tape tape;
  Tensor logits({1, 3}, {1, 2, 3});
  const std::vector<std::size_t> labels{2};
  double denom = 0.0;
  for (double v : {1.0, 2.0, 3.0}) denom += std::exp(v);
  const double direct = -std::log(std::exp(3.0) / denom);
  CHECK(cross_entropy(tape, logits, labels).item() == doctest::Approx(direct).epsilon(1e-9));
}

TEST_CASE("cross entropy rejects out-of-range labels") {
  Tape tape;
  Tensor logits({2, 3});
  CHECK_THROWS_AS(cross_entropy(tape, logits, std::vector<std::size_t>{0, 3}), ContractError);
  CHECK_THROWS_AS(cross_entropy(tape, logits, std::vector<std::size_t>{0}), DimensionError);
}

TEST_CASE("cross entropy is nonnegative on random logits") {
  Tape tape;
  Rng rng(42);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> v(4 * 5);
    for (double& e : v) e = rng.uniform(-30.0, 30.0);
    std::vector<std::size_t> labels(4);
    for (auto& l : labels) l = rng.below(5);
    CHECK(cross_entropy(tape, Tensor({4, 5}, v), labels).item() >= 0.0);
  }
}

TEST_CASE("bce at zero logit equals ln 2") {
  Tape tape;
  Tensor logits({1, 1}, {0.0});
  BinaryMatrix labels = BinaryMatrix::from(1, 1, {1});
  CHECK(std::fabs(multi_label_loss(tape, logits, labels).item() - std::log(2.0)) < 1e-12);
}

TEST_CASE("bce vanishes at matching saturated logits") {
  Tape tape;
  Tensor logits({1, 4}, {50, -50, 50, -50});
  BinaryMatrix labels = BinaryMatrix::from(1, 4, {1, 0, 1, 0});
  const double loss = multi_label_loss(tape, logits, labels).item();
  CHECK(loss >= 0.0);
  CHECK(loss < 1e-20);
}

TEST_CASE("bce matches the direct formula on a mixed 2x2 batch") {
  Tape tape;
  Tensor logits({2, 2}, {0.5, -1.0, 2.0, 0.0});
  BinaryMatrix labels = BinaryMatrix::from(2, 2, {1, 0, 0, 1});
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  double expected = 0.0;
  expected += -std::log(sig(0.5));
  expected += -std::log(1.0 - sig(-1.0));
  expected += -std::log(1.0 - sig(2.0));
  expected += -std::log(sig(0.0));
  expected /= 4.0;
  CHECK(multi_label_loss(tape, logits, labels).item() == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("bce positive weighting scales only positive terms") {
  Tape tape;
  Tensor logits({2, 1}, {0.8, -0.3});
  BinaryMatrix labels = BinaryMatrix::from(2, 1, {1, 0});
  const std::vector<double> weights{3.0};
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  const double expected = (3.0 * -std::log(sig(0.8)) + -std::log(1.0 - sig(-0.3))) / 2.0;
  CHECK(multi_label_loss(tape, logits, labels, weights).item() ==
        doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("bce decreases as the correct-sign margin grows") {
  Tape tape;
  double previous = 1e300;
  for (double margin : {0.0, 0.5, 1.0, 2.0, 5.0, 10.0}) {
    Tensor logits({1, 2}, {margin, -margin});
    BinaryMatrix labels = BinaryMatrix::from(1, 2, {1, 0});
    const double loss = multi_label_loss(tape, logits, labels).item();
    CHECK(loss < previous);
    previous = loss;
  }
}

TEST_CASE("bce rejects bad weights and shapes") {
  Tape tape;
  Tensor logits({2, 2});
  BinaryMatrix labels = BinaryMatrix::from(2, 2, {1, 0, 0, 1});
  CHECK_THROWS_AS(multi_label_loss(tape, logits, labels, std::vector<double>{1.0}),
                  DimensionError);
  CHECK_THROWS_AS(multi_label_loss(tape, logits, labels, std::vector<double>{1.0, 0.0}),
                  ContractError);
  CHECK_THROWS_AS(multi_label_loss(tape, Tensor({1, 2}), labels), DimensionError);
  CHECK_THROWS_AS(BinaryMatrix::from(1, 2, {0, 2}), ContractError);
}

TEST_CASE("both losses pass the finite-difference gradient check") {
  const std::vector<std::size_t> ce_labels{1, 0, 2};
  auto ce_builder = [&](Tape& t, std::span<const double> flat) {
    Tensor logits({3, 3}, std::vector<double>(flat.begin(), flat.end()));
    BuiltOp built;
    built.output = cross_entropy(t, logits, ce_labels);
    built.inputs = {logits};
    return built;
  };
  auto r = check_gradient(ce_builder, 9, 25, 201, 1e-4, -3.0, 3.0);
  CHECK_MESSAGE(r.ok, "cross_entropy: " << r.failure);

  const BinaryMatrix ml_labels = BinaryMatrix::from(2, 3, {1, 0, 1, 0, 1, 0});
  auto ml_builder = [&](Tape& t, std::span<const double> flat) {
    Tensor logits({2, 3}, std::vector<double>(flat.begin(), flat.end()));
    BuiltOp built;
    built.output = multi_label_loss(t, logits, ml_labels);
    built.inputs = {logits};
    return built;
  };
  r = check_gradient(ml_builder, 6, 25, 202, 1e-4, -3.0, 3.0);
  CHECK_MESSAGE(r.ok, "multi_label_loss: " << r.failure);

  const std::vector<double> weights{2.0, 0.5, 3.0};
  auto weighted_builder = [&](Tape& t, std::span<const double> flat) {
    Tensor logits({2, 3}, std::vector<double>(flat.begin(), flat.end()));
    BuiltOp built;
    built.output = multi_label_loss(t, logits, ml_labels, weights);
    built.inputs = {logits};
    return built;
  };
  r = check_gradient(weighted_builder, 6, 25, 203, 1e-4, -3.0, 3.0);
  CHECK_MESSAGE(r.ok, "weighted multi_label_loss: " << r.failure);
}

TEST_CASE("pos weights from label counts") {
  CHECK(compute_pos_weights(BinaryMatrix::from(4, 1, {1, 1, 0, 0})) == std::vector<double>{1.0});
  CHECK(compute_pos_weights(BinaryMatrix::from(3, 1, {1, 1, 1})) == std::vector<double>{1.0});
  CHECK(compute_pos_weights(BinaryMatrix::from(4, 1, {0, 0, 0, 1})) == std::vector<double>{3.0});
  CHECK(compute_pos_weights(BinaryMatrix::from(2, 2, {0, 1, 0, 1})) ==
        std::vector<double>{1.0, 1.0});
}

TEST_SUITE_END();
