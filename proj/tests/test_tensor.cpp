#include "doctest.h"
#include "grad_cases.hpp"

#include "advrank/tensor.hpp"

#include <random>
#include <string>

using namespace advrank;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("elementwise broadcasting") {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor row({3}, {10, 20, 30});
  const Tensor col({2, 1}, {100, 200});
  CHECK(values(add(a, row)) == std::vector<float>{11, 22, 33, 14, 25, 36});
  CHECK(values(sub(a, col)) == std::vector<float>{-99, -98, -97, -196, -195, -194});
  CHECK(values(mul(a, Tensor::scalar(2))) == std::vector<float>{2, 4, 6, 8, 10, 12});
  CHECK(add(row, col).shape() == Shape{2, 3});
  CHECK(broadcast_shapes({4, 1, 3}, {2, 1}, "t") == Shape{4, 2, 3});
}

TEST_CASE("shape errors name both shapes") {
  const Tensor a({2, 3}, std::vector<float>(6, 1.0f));
  const Tensor b({2, 2}, std::vector<float>(4, 1.0f));
  try {
    (void)add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[2, 2]") != std::string::npos);
  }
  CHECK_THROWS_AS((void)matmul(a, a), ShapeError);
  CHECK_THROWS_AS((void)reshape(a, {4}), ShapeError);
  CHECK_THROWS_AS((void)slice_rows(a, 1, 3), ShapeError);
  const std::size_t bad[] = {2};
  CHECK_THROWS_AS((void)gather_rows(a, bad), ShapeError);
  CHECK_THROWS_AS((void)concat_rows({a, Tensor({1, 2}, {0, 0})}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS((void)a.item(), ShapeError);
}

TEST_CASE("matmul and reductions by hand") {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 2}, {5, 6, 7, 8});
  CHECK(values(matmul(a, b)) == std::vector<float>{19, 22, 43, 50});
  CHECK(values(transpose(a)) == std::vector<float>{1, 3, 2, 4});
  CHECK(sum(a).item() == 10.0f);
  CHECK(mean(a).item() == 2.5f);
  CHECK(values(sum_last(a)) == std::vector<float>{3, 7});
  CHECK(values(l2_norm_rows(Tensor({1, 2}, {3, 4}))) == std::vector<float>{5});
  CHECK(values(clamp(Tensor({3}, {-1, 0.5f, 2}), 0, 1)) == std::vector<float>{0, 0.5f, 1});
}

TEST_CASE("tape misuse") {
  Tape tape;
  const Tensor x({2}, {1, 2}, true);
  const Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), AutogradError);
  const Tensor loose = Tensor::scalar(1.0f, true);
  CHECK_THROWS_AS(tape.backward(loose), AutogradError);
}

TEST_CASE("backward after the tape is gone") {
  Tensor y;
  {
    Tape tape;
    const Tensor x({2}, {1, 2}, true);
    y = sum(x);
  }
  CHECK_THROWS_AS(backward(y), AutogradError);
}

TEST_CASE("gradients accumulate over reuse") {
  Tape tape;
  const Tensor x({3}, {1, -2, 3}, true);
  tape.backward(sum(mul(x, x)));
  CHECK(values(Tensor({3}, {x.grad().begin(), x.grad().end()})) == std::vector<float>{2, -4, 6});
}

TEST_CASE("nested tapes record on the innermost") {
  Tape outer;
  const Tensor x({1}, {3}, true);
  const Tensor a = mul(x, x);
  {
    Tape inner;
    const Tensor w({1}, {2}, true);
    const Tensor b = sum(mul(w, x.detach()));
    inner.backward(b);
    CHECK(w.grad()[0] == doctest::Approx(3.0));
    CHECK_FALSE(x.has_grad());
  }
  outer.backward(sum(a));
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("norm subgradient at the zero row is finite") {
  Tape tape;
  const Tensor x({1, 4}, {0, 0, 0, 0}, true);
  tape.backward(sum(l2_norm_rows(x)));
  for (float g : x.grad()) CHECK(g == doctest::Approx(0.5));
}

TEST_CASE("gradient suite against double finite differences") {
  std::mt19937_64 rng(20240601);
  for (const auto& c : oracle::gradient_cases()) {
    CAPTURE(c.name);
    double worst = 0.0, worst_value = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const auto rep = oracle::check_gradients(c.f, c.ref, c.inputs(rng));
      worst = std::max(worst, rep.max_rel_err);
      worst_value = std::max(worst_value, rep.value_err);
    }
    CHECK(worst <= 1e-3);
    CHECK(worst_value <= 1e-4);
  }
}

TEST_CASE("relu and clamp by definition") {
  CHECK(values(relu(Tensor({3}, {-1, 0, 2}))) == std::vector<float>{0, 0, 2});
  CHECK(values(clamp(Tensor({3}, {-0.5f, 0.5f, 1.5f}), 0, 1)) == std::vector<float>{0, 0.5f, 1});
  CHECK(values(matmul(Tensor::full({2, 3}, 1), Tensor::full({3, 2}, 1))) == std::vector<float>(4, 3.0f));
  CHECK(std::isnan(relu(Tensor({1}, {std::nanf("")})).item()));

  Tape tape;
  const Tensor x({1}, {1}, true);
  tape.backward(sum(relu(neg(x))));
  CHECK(x.grad()[0] == 0.0f);
}

TEST_CASE("forward results are bitwise repeatable") {
  std::mt19937_64 r1(3), r2(3);
  const Tensor a = oracle::random_tensor({16, 9}, r1), b = oracle::random_tensor({16, 9}, r2);
  const Tensor w = oracle::random_tensor({9, 5}, r1);
  CHECK(values(normalize_rows(matmul(a, w))) == values(normalize_rows(matmul(b, w))));
}
