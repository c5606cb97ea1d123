#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "maggen/rng.hpp"
#include "maggen/tensor.hpp"

using namespace maggen;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = lo + (hi - lo) * rng.next_double();
  return Tensor::from(shape, std::move(v));
}

// Random values bounded away from zero, for kink-sensitive ops.
Tensor random_tensor_with_margin(const Shape& shape, Rng& rng, double margin = 0.05) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) {
    double mag = margin + (1.0 - margin) * rng.next_double();
    x = rng.next_u64() & 1 ? mag : -mag;
  }
  return Tensor::from(shape, std::move(v));
}

// Reduces an op output to a scalar through a fixed random weighting, so a
// finite-difference check exercises every output element.
LossFn weighted(const std::function<Tensor(const std::vector<Tensor>&)>& op, Tensor weights) {
  return [op, weights](const std::vector<Tensor>& params) {
    return sum_all(mul(op(params), weights));
  };
}

}  // namespace

TEST_CASE("forward op examples") {
  SUBCASE("matmul by identity is identity") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    CHECK(bitwise_equal(matmul(a, eye), a));
  }
  SUBCASE("softmax of equal logits is uniform") {
    Tensor s = softmax(Tensor::from({3}, {0, 0, 0}));
    for (int i = 0; i < 3; ++i) CHECK(s.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));
  }
  SUBCASE("squared Euclidean distance, hand-evaluated") {
    // (1-4)^2 + (2-6)^2 = 9 + 16 = 25
    Tensor a = Tensor::from({2}, {1, 2});
    Tensor b = Tensor::from({2}, {4, 6});
    CHECK(squared_distance(a, b).item() == doctest::Approx(25.0).epsilon(1e-12));
  }
  SUBCASE("shape mismatch names the op and both shapes") {
    Tensor a = Tensor::from({2, 3}, std::vector<double>(6, 1.0));
    Tensor b = Tensor::from({3, 2}, std::vector<double>(6, 1.0));
    try {
      add(a, b);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      std::string msg = e.what();
      CHECK(msg.find("add") != std::string::npos);
      CHECK(msg.find("[2,3]") != std::string::npos);
      CHECK(msg.find("[3,2]") != std::string::npos);
    }
  }
  SUBCASE("non-finite forward value is a numeric-domain error") {
    CHECK_THROWS_AS(log(Tensor::from({2}, {1.0, -1.0})), NumericError);
    CHECK_THROWS_AS(exp(Tensor::from({1}, {1e9})), NumericError);
  }
}

TEST_CASE("backward basics") {
  SUBCASE("d/dtheta of half theta^2 at 3 is 3") {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor theta = tape.watch(Tensor::scalar(3.0));
    Tensor loss = scalar_mul(mul(theta, theta), 0.5);
    auto g = tape.gradients(loss, std::vector<Tensor>{theta});
    CHECK(g[0].item() == doctest::Approx(3.0).epsilon(1e-12));
  }
  SUBCASE("softmax-then-pick gradient sums to zero at equal logits") {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor z = tape.watch(Tensor::from({4}, {0.7, 0.7, 0.7, 0.7}));
    Tensor s = softmax(z);
    Tensor picked = pick_per_row(reshape(s, {1, 4}), {2});
    auto g = tape.gradients(sum_all(picked), std::vector<Tensor>{z});
    double sum = 0;
    for (double x : g[0].data()) sum += x;
    CHECK(std::abs(sum) < 1e-12);
  }
  SUBCASE("parameters unreachable from the output get zero gradients") {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor a = tape.watch(Tensor::scalar(2.0));
    Tensor b = tape.watch(Tensor::from({3}, {1, 2, 3}));
    Tensor loss = mul(a, a);
    auto g = tape.gradients(loss, std::vector<Tensor>{a, b});
    CHECK(g[0].item() == doctest::Approx(4.0));
    CHECK(bitwise_equal(g[1], Tensor::zeros({3})));
  }
  SUBCASE("detached scalar is rejected") {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor a = tape.watch(Tensor::scalar(1.0));
    Tensor loss = mul(a, a);
    CHECK_THROWS_AS(tape.gradients(loss.detached(), std::vector<Tensor>{a}), UsageError);
  }
  SUBCASE("backward over a truncated subgraph is rejected") {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor a = tape.watch(Tensor::scalar(1.5));
    auto mark = tape.checkpoint();
    Tensor loss = mul(a, a);
    tape.truncate(mark);
    CHECK_THROWS_AS(tape.gradients(loss, std::vector<Tensor>{a}), UsageError);
  }
}

TEST_CASE("backward matches central finite differences per op") {
  Rng rng(20240811);
  struct Case {
    const char* name;
    std::function<Tensor(const std::vector<Tensor>&)> op;
    std::vector<Shape> shapes;
    bool positive_inputs = false;
    bool margin_inputs = false;
  };
  std::vector<Case> cases = {
      {"add", [](const std::vector<Tensor>& p) { return add(p[0], p[1]); }, {{3, 4}, {3, 4}}},
      {"sub", [](const std::vector<Tensor>& p) { return sub(p[0], p[1]); }, {{3, 4}, {3, 4}}},
      {"mul", [](const std::vector<Tensor>& p) { return mul(p[0], p[1]); }, {{3, 4}, {3, 4}}},
      {"divide",
       [](const std::vector<Tensor>& p) { return divide(p[0], p[1]); },
       {{3, 4}, {3, 4}},
       false,
       true},
      {"scalar_mul", [](const std::vector<Tensor>& p) { return scalar_mul(p[0], -1.7); }, {{5}}},
      {"scalar_add", [](const std::vector<Tensor>& p) { return scalar_add(p[0], 0.3); }, {{5}}},
      {"matmul", [](const std::vector<Tensor>& p) { return matmul(p[0], p[1]); }, {{3, 4}, {4, 2}}},
      {"transpose", [](const std::vector<Tensor>& p) { return transpose(p[0]); }, {{3, 4}}},
      {"relu", [](const std::vector<Tensor>& p) { return relu(p[0]); }, {{4, 3}}, false, true},
      {"log", [](const std::vector<Tensor>& p) { return log(p[0]); }, {{3, 3}}, true},
      {"exp", [](const std::vector<Tensor>& p) { return exp(p[0]); }, {{3, 3}}},
      {"sqrt", [](const std::vector<Tensor>& p) { return sqrt(p[0]); }, {{3, 3}}, true},
      {"clamp_min",
       [](const std::vector<Tensor>& p) { return clamp_min(p[0], 0.0); },
       {{4, 3}},
       false,
       true},
      {"reshape", [](const std::vector<Tensor>& p) { return reshape(p[0], {2, 6}); }, {{3, 4}}},
      {"sum_axis0", [](const std::vector<Tensor>& p) { return sum_axis(p[0], 0); }, {{3, 4}}},
      {"sum_axis1", [](const std::vector<Tensor>& p) { return sum_axis(p[0], 1); }, {{3, 4}}},
      {"mean_axis", [](const std::vector<Tensor>& p) { return mean_axis(p[0], 1); }, {{3, 4}}},
      {"broadcast0",
       [](const std::vector<Tensor>& p) { return broadcast_axis(p[0], 0, 3); },
       {{4}}},
      {"broadcast1",
       [](const std::vector<Tensor>& p) { return broadcast_axis(p[0], 1, 3); },
       {{4}}},
      {"softmax", [](const std::vector<Tensor>& p) { return softmax(p[0], 2.0); }, {{3, 5}}},
      {"log_softmax", [](const std::vector<Tensor>& p) { return log_softmax(p[0]); }, {{3, 5}}},
      {"sq_dist",
       [](const std::vector<Tensor>& p) { return squared_distance(p[0], p[1]); },
       {{6}, {6}}},
      {"gather_rows",
       [](const std::vector<Tensor>& p) { return gather_rows(p[0], {2, 0, 2}); },
       {{4, 3}}},
      {"pick_per_row",
       [](const std::vector<Tensor>& p) { return pick_per_row(p[0], {1, 0, 2}); },
       {{3, 3}}},
      {"slice_rows", [](const std::vector<Tensor>& p) { return slice_rows(p[0], 1, 3); }, {{4, 3}}},
      {"pad_rows", [](const std::vector<Tensor>& p) { return pad_rows(p[0], 1, 5); }, {{2, 3}}},
      {"concat_rows",
       [](const std::vector<Tensor>& p) { return concat_rows(p); },
       {{2, 3}, {3, 3}}},
      {"l2_normalize",
       [](const std::vector<Tensor>& p) { return l2_normalize_rows(p[0]); },
       {{3, 4}},
       false,
       true},
  };

  // 100 random instances spread across the op set.
  for (const auto& c : cases) {
    double worst = 0;
    for (int rep = 0; rep < 4; ++rep) {
      std::vector<Tensor> params;
      Shape out_shape;
      {
        for (const Shape& s : c.shapes) {
          if (c.positive_inputs) {
            params.push_back(random_tensor(s, rng, 0.5, 2.0));
          } else if (c.margin_inputs) {
            params.push_back(random_tensor_with_margin(s, rng));
          } else {
            params.push_back(random_tensor(s, rng));
          }
        }
        out_shape = c.op(params).shape();
      }
      Tensor w = random_tensor(out_shape, rng);
      worst = std::max(worst, finite_diff_check(weighted(c.op, w), params, 1e-5));
    }
    INFO(c.name);
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x0 = random_tensor({4, 3}, rng);
    double a = -2.0 + 4.0 * rng.next_double();
    double b = -2.0 + 4.0 * rng.next_double();

    Tape tape;
    Tape::Scope scope(tape);
    Tensor x = tape.watch(x0);
    Tensor l1 = sum_all(mul(x, x));
    Tensor l2 = sum_all(exp(scalar_mul(x, 0.3)));
    Tensor combined = add(scalar_mul(l1, a), scalar_mul(l2, b));

    auto g1 = tape.gradients(l1, std::vector<Tensor>{x});
    auto g2 = tape.gradients(l2, std::vector<Tensor>{x});
    auto gc = tape.gradients(combined, std::vector<Tensor>{x});
    Tensor expected = add(scalar_mul(g1[0], a), scalar_mul(g2[0], b));
    CHECK(allclose(gc[0], expected, 1e-12));
  }
}

TEST_CASE("identical seeds give bit-identical gradients") {
  auto run = [] {
    Rng rng(99);
    Tensor x0 = random_tensor({6, 4}, rng);
    Tensor y0 = random_tensor({4, 2}, rng);
    Tape tape;
    Tape::Scope scope(tape);
    Tensor x = tape.watch(x0);
    Tensor y = tape.watch(y0);
    Tensor loss = sum_all(softmax(matmul(x, y)));
    return tape.gradients(loss, std::vector<Tensor>{x, y});
  };
  auto a = run();
  auto b = run();
  CHECK(bitwise_equal(a[0], b[0]));
  CHECK(bitwise_equal(a[1], b[1]));
}

TEST_CASE("grad_through_update on the quadratic") {
  // L(theta) = 0.5 (theta - 1)^2 at theta = 0 with inner_lr = 0.1:
  // theta' = 0.1; Exact d/dtheta = (theta' - 1)(1 - lr) = -0.81,
  // FirstOrder = (theta' - 1) = -0.9.
  LossFn loss = [](const std::vector<Tensor>& p) {
    Tensor d = scalar_add(p[0], -1.0);
    return scalar_mul(mul(d, d), 0.5);
  };
  std::vector<Tensor> params = {Tensor::scalar(0.0)};

  auto exact = grad_through_update(loss, params, 0.1, GradMode::Exact);
  CHECK(exact[0].item() == doctest::Approx(-0.81).epsilon(1e-12));

  auto first = grad_through_update(loss, params, 0.1, GradMode::FirstOrder);
  CHECK(first[0].item() == doctest::Approx(-0.9).epsilon(1e-12));

  SUBCASE("inner_lr = 0 makes the modes agree bitwise") {
    auto e0 = grad_through_update(loss, params, 0.0, GradMode::Exact);
    auto f0 = grad_through_update(loss, params, 0.0, GradMode::FirstOrder);
    CHECK(bitwise_equal(e0[0], f0[0]));
  }
}

TEST_CASE("exact meta-gradient matches the closed form on the quadratic family") {
  // L_k(theta) = 0.5 a_k (theta - b_k)^2. After theta'_k = theta - rho a_k (theta - b_k),
  // d L_k(theta'_k) / d theta = a_k (theta'_k - b_k)(1 - rho a_k).
  Rng rng(4242);
  for (int rep = 0; rep < 50; ++rep) {
    double a = 0.5 + 2.0 * rng.next_double();
    double b = -1.0 + 2.0 * rng.next_double();
    double theta = -2.0 + 4.0 * rng.next_double();
    double rho = 0.05 + 0.2 * rng.next_double();

    LossFn loss = [a, b](const std::vector<Tensor>& p) {
      Tensor d = scalar_add(p[0], -b);
      return scalar_mul(mul(d, d), 0.5 * a);
    };
    std::vector<Tensor> params = {Tensor::scalar(theta)};
    auto g = grad_through_update(loss, params, rho, GradMode::Exact);

    double theta_p = theta - rho * a * (theta - b);
    double closed = a * (theta_p - b) * (1.0 - rho * a);
    CHECK(std::abs(g[0].item() - closed) <= 1e-12);
  }
}

TEST_CASE("finite_diff_check on a linear loss is near exact") {
  Rng rng(11);
  Tensor w = random_tensor({8}, rng);
  LossFn loss = [w](const std::vector<Tensor>& p) { return sum_all(mul(p[0], w)); };
  std::vector<Tensor> params = {random_tensor({8}, rng)};
  CHECK(finite_diff_check(loss, params, 1e-5) <= 1e-10);
}

TEST_CASE("finite_diff_check on softmax cross-entropy composition") {
  Rng rng(13);
  // -log softmax(z)[label] for a random 3-class logit vector.
  LossFn loss = [](const std::vector<Tensor>& p) {
    Tensor lp = log_softmax(reshape(p[0], {1, 3}));
    return neg(sum_all(pick_per_row(lp, {1})));
  };
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<Tensor> params = {random_tensor({3}, rng, -2.0, 2.0)};
    CHECK(finite_diff_check(loss, params, 1e-5) <= 1e-6);
  }
}

TEST_CASE("second-order flow through recorded adjoint arithmetic") {
  // f(x) = x^3; g = df/dx = 3x^2 recorded with create_graph, then
  // d(g)/dx = 6x via a second backward.
  Tape tape;
  Tape::Scope scope(tape);
  Tensor x = tape.watch(Tensor::scalar(1.75));
  Tensor f = mul(mul(x, x), x);
  auto g = tape.gradients(f, std::vector<Tensor>{x}, /*create_graph=*/true);
  CHECK(g[0].item() == doctest::Approx(3 * 1.75 * 1.75).epsilon(1e-12));
  auto h = tape.gradients(g[0], std::vector<Tensor>{x});
  CHECK(h[0].item() == doctest::Approx(6 * 1.75).epsilon(1e-12));
}

TEST_CASE("tape reuse after reset") {
  Tape tape;
  Tape::Scope scope(tape);
  Tensor a = tape.watch(Tensor::scalar(2.0));
  Tensor l = mul(a, a);
  (void)l;
  tape.reset();
  Tensor b = tape.watch(Tensor::scalar(5.0));
  Tensor l2 = mul(b, b);
  auto g = tape.gradients(l2, std::vector<Tensor>{b});
  CHECK(g[0].item() == doctest::Approx(10.0));
  // Handles from before the reset are dead.
  CHECK_THROWS_AS(tape.gradients(l, std::vector<Tensor>{a}), UsageError);
}
