#include "doctest.h"

#include "blocklm/ops.hpp"
#include "blocklm/tensor.hpp"

using namespace blocklm;

TEST_CASE("element count is the product of extents") {
  Tensor t({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.values().size() == 24);
  CHECK(t.rank() == 3);
  CHECK(shape_numel({}) == 1);
  CHECK(shape_str({2, 3}) == "[2,3]");
}

TEST_CASE("rank above four is rejected") { CHECK_THROWS_AS(Tensor({1, 1, 1, 1, 1}), ShapeError); }

TEST_CASE("value count must match the shape") { CHECK_THROWS_AS(Tensor({2, 2}, {1.0f, 2.0f, 3.0f}), ShapeError); }

TEST_CASE("reshape shares storage") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = t.reshape({3, 2});
  r.values()[0] = 9.0f;
  CHECK(t.values()[0] == 9.0f);
  CHECK_THROWS_AS(t.reshape({4, 2}), ShapeError);
}

TEST_CASE("detach copies values without history") {
  Tensor x = Tensor::scalar(2.0f, true);
  Tensor y = mul(x, x);
  Tensor d = y.detach();
  CHECK(d.item() == 4.0f);
  CHECK_FALSE(d.requires_grad());
  d.values()[0] = 1.0f;
  CHECK(y.item() == 4.0f);
}

TEST_CASE("product rule: d(x*y)/dx at (2,3) is 3") {
  Tensor x = Tensor::scalar(2.0f, true);
  Tensor y = Tensor::scalar(3.0f, true);
  backward(mul(x, y));
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(y.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("gradients have the value shape and accumulate over uses") {
  Tensor x({2, 2}, {1, 2, 3, 4}, true);
  backward(sum(add(x, x)));
  REQUIRE(x.grad().size() == 4);
  for (float g : x.grad()) CHECK(g == 2.0f);
}

TEST_CASE("backward twice on the same loss throws") {
  Tensor x = Tensor::scalar(2.0f, true);
  Tensor loss = mul(x, x);
  backward(loss);
  CHECK_THROWS_AS(backward(loss), AutogradError);
}

TEST_CASE("backward needs a scalar") {
  Tensor x({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(scale(x, 2.0f)), AutogradError);
}

TEST_CASE("no-grad guard records nothing") {
  Tensor x = Tensor::scalar(2.0f, true);
  Tensor y;
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    y = mul(x, x);
  }
  CHECK(grad_enabled());
  CHECK(y.node() == nullptr);
}

TEST_CASE("zero_grad clears accumulated gradients") {
  Tensor x = Tensor::scalar(1.0f, true);
  backward(scale(x, 5.0f));
  CHECK(x.grad()[0] == 5.0f);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0f);
}
