#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <vector>

#include "prdu/categorical.hpp"
#include "prdu/gradcheck.hpp"
#include "prdu/rng.hpp"
#include "prdu/tape.hpp"
#include "prdu/tensor.hpp"

using namespace prdu;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  double* p = t.data();
  for (int i = 0; i < t.size(); ++i) p[i] = rng.next_uniform(lo, hi);
  return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK_THROWS_AS(Tensor({0, 3}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  CHECK(Tensor::scalar(4.0).value() == 4.0);

  Tensor shallow = t;
  t.data()[0] = 7.0;
  CHECK(shallow.at(0, 0) == 7.0);
  Tensor deep = t.clone();
  t.data()[0] = 9.0;
  CHECK(deep.at(0, 0) == 7.0);
}

TEST_CASE("primitive application examples") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor prod = matmul(nullptr, a, eye);
  CHECK(bit_equal(prod, a));

  Tensor sig = sigmoid(nullptr, Tensor({1}, {0.0}));
  CHECK(sig.at(0) == 0.5);

  Tensor rows({2, 2}, {1, 3, 3, 5});
  Tensor mean = mean_over_axis(nullptr, rows, 0);
  CHECK(mean.at(0) == 2.0);
  CHECK(mean.at(1) == 4.0);
}

TEST_CASE("primitive errors fail fast") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({3}, {1, 2, 3});
  CHECK_THROWS_AS(matmul(nullptr, a, b), std::invalid_argument);
  CHECK_THROWS_AS(add(nullptr, a, b), std::invalid_argument);
  const Tensor in[] = {a};
  CHECK_THROWS_AS(apply_named(nullptr, "no-such-primitive", in), std::invalid_argument);
  CHECK(apply_named(nullptr, "transpose", in).at(0, 1) == 3.0);
}

TEST_CASE("inputs from another tape are rejected") {
  Tape t1;
  Tensor x({2}, {1, 2});
  t1.watch(x);
  Tensor y = scale(&t1, x, 2.0);
  Tape t2;
  CHECK_THROWS_AS(scale(&t2, y, 1.0), std::invalid_argument);
}

TEST_CASE("backward on linear and quadratic maps") {
  SECTION("sum gives ones") {
    Tape tape;
    Tensor x({3}, {1.0, -2.0, 0.5});
    tape.watch(x);
    Tensor loss = sum_all(&tape, x);
    const GradientMap grads = tape.backward(loss);
    const Tensor gx = grads.grad(x);
    CHECK(gx.at(0) == 1.0);
    CHECK(gx.at(1) == 1.0);
    CHECK(gx.at(2) == 1.0);
  }
  SECTION("disconnected leaf gets exact zeros") {
    Tape tape;
    Tensor x({3}, {1.0, 2.0, 3.0});
    Tensor y({2}, {5.0, 6.0});
    tape.watch(x);
    tape.watch(y);
    Tensor loss = sum_all(&tape, y);
    const Tensor gx = tape.backward(loss).grad(x);
    for (int i = 0; i < 3; ++i) CHECK(gx.at(i) == 0.0);
  }
  SECTION("x*x at 3 differentiates to 6") {
    Tape tape;
    Tensor x = Tensor::scalar(3.0);
    tape.watch(x);
    Tensor loss = mul(&tape, x, x);
    CHECK(tape.backward(loss).grad(x).value() == 6.0);
  }
  SECTION("backward preconditions") {
    Tape tape;
    Tensor x({2}, {1, 2});
    tape.watch(x);
    Tensor vec = scale(&tape, x, 2.0);
    CHECK_THROWS_AS(tape.backward(vec), std::invalid_argument);  // not scalar
    Tensor off_tape = Tensor::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(off_tape), std::invalid_argument);
  }
}

TEST_CASE("finite differences match hand results") {
  Tensor x({4}, {0.3, -1.2, 2.0, 0.0});
  auto sum_f = [&] {
    double acc = 0;
    for (int i = 0; i < x.size(); ++i) acc += x.data()[i];
    return acc;
  };
  Tensor g = finite_difference_gradient(sum_f, x, 1e-5);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(g.at(i) - 1.0) < 1e-9);

  Tensor x2 = Tensor::scalar(3.0);
  auto square_f = [&] { return x2.value() * x2.value(); };
  Tensor g2 = finite_difference_gradient(square_f, x2, 1e-5);
  CHECK(std::abs(g2.value() - 6.0) < 1e-8);

  CHECK_THROWS_AS(finite_difference_gradient(sum_f, x, 0.0), std::invalid_argument);
}

TEST_CASE("backward agrees with finite differences on a random 2-layer network") {
  Rng rng(42);
  Tensor w1 = random_tensor({5, 4}, rng);
  Tensor w2 = random_tensor({3, 5}, rng);
  Tensor b1 = random_tensor({5}, rng);
  Tensor input = random_tensor({4}, rng);

  auto forward = [&](Tape* tape) {
    Tensor h = tanh_op(tape, add(tape, matmul(tape, w1, input), b1));
    return sum_all(tape, sigmoid(tape, matmul(tape, w2, h)));
  };

  Tape tape;
  tape.watch(w1);
  tape.watch(w2);
  tape.watch(b1);
  const GradientMap grads = tape.backward(forward(&tape));

  auto loss_value = [&] { return forward(nullptr).value(); };
  for (Tensor* param : {&w1, &w2, &b1}) {
    Tensor numeric = finite_difference_gradient(loss_value, *param, 1e-5);
    CHECK(gradient_max_rel_error(grads.grad(*param), numeric) < 1e-4);
  }
}

// Every primitive, randomized inputs, analytic vs central differences.
TEST_CASE("per-primitive gradient property") {
  Rng rng(7);
  int trials_done = 0;
  auto check_graph = [&](auto build, std::vector<Tensor*> leaves) {
    Tape tape;
    for (Tensor* leaf : leaves) tape.watch(*leaf);
    Tensor loss = build(&tape);
    const GradientMap grads = tape.backward(loss);
    auto value = [&] { return build(static_cast<Tape*>(nullptr)).value(); };
    for (Tensor* leaf : leaves) {
      Tensor numeric = finite_difference_gradient(value, *leaf, 1e-5);
      REQUIRE(gradient_max_rel_error(grads.grad(*leaf), numeric) < 1e-4);
      ++trials_done;
    }
  };

  for (int trial = 0; trial < 12; ++trial) {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tensor v = random_tensor({4}, rng);
    Tensor u = random_tensor({3}, rng);
    Tensor w = random_tensor({3}, rng);
    Tensor pos = random_tensor({3}, rng, 0.5, 2.5);
    Tensor table = random_tensor({5, 3}, rng);

    check_graph([&](Tape* t) { return sum_all(t, matmul(t, a, b)); }, {&a, &b});
    check_graph([&](Tape* t) { return sum_all(t, matmul(t, a, v)); }, {&a, &v});
    check_graph([&](Tape* t) { return sum_all(t, matmul(t, u, a)); }, {&u, &a});
    check_graph([&](Tape* t) { return sum_all(t, mul(t, add(t, u, w), sub(t, u, w))); },
                {&u, &w});
    check_graph([&](Tape* t) { return sum_all(t, sigmoid(t, mul(t, u, w))); }, {&u, &w});
    check_graph([&](Tape* t) { return sum_all(t, tanh_op(t, u)); }, {&u});
    check_graph([&](Tape* t) { return sum_all(t, exp_op(t, scale(t, u, 0.5))); }, {&u});
    check_graph([&](Tape* t) { return sum_all(t, log_op(t, pos)); }, {&pos});
    check_graph([&](Tape* t) { return sum_all(t, transpose(t, a)); }, {&a});
    check_graph(
        [&](Tape* t) {
          const Tensor parts[] = {u, w, Tensor::scalar(1.5)};
          return sum_all(t, exp_op(t, scale(t, concat(t, parts), 0.3)));
        },
        {&u, &w});
    check_graph([&](Tape* t) { return sum_all(t, tanh_op(t, mean_over_axis(t, a, 0))); }, {&a});
    check_graph([&](Tape* t) { return sum_all(t, tanh_op(t, mean_over_axis(t, a, 1))); }, {&a});
    check_graph(
        [&](Tape* t) {
          const Tensor rows[] = {u, w};
          return sum_all(t, tanh_op(t, stack_rows(t, rows)));
        },
        {&u, &w});
    check_graph([&](Tape* t) { return sum_all(t, exp_op(t, select_row(t, a, 1))); }, {&a});
    check_graph([&](Tape* t) { return select_index(t, mul(t, v, v), 2); }, {&v});
    check_graph([&](Tape* t) { return sum_all(t, mul(t, log_softmax(t, v), v)); }, {&v});
    check_graph(
        [&](Tape* t) {
          return sum_all(t, tanh_op(t, embed_rows(t, table, std::vector<int>{0, 2, 2, 4})));
        },
        {&table});
  }
  CHECK(trials_done >= 100);
}

TEST_CASE("softmax examples and invariants") {
  SECTION("uniform logits") {
    Categorical c = softmax(nullptr, Tensor({3}, {0, 0, 0}));
    for (int i = 0; i < 3; ++i) CHECK(std::abs(c.probs.at(i) - 1.0 / 3.0) < 1e-15);
  }
  SECTION("log-count logits normalize to the counts") {
    Categorical c =
        softmax(nullptr, Tensor({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}));
    // oracle: exponentiate and normalize by hand
    const double z = 1.0 + 2.0 + 3.0;
    CHECK(std::abs(c.probs.at(0) - 1.0 / z) < 1e-14);
    CHECK(std::abs(c.probs.at(1) - 2.0 / z) < 1e-14);
    CHECK(std::abs(c.probs.at(2) - 3.0 / z) < 1e-14);
  }
  SECTION("shift invariance") {
    // exactly representable logits and shift: float ops below are exact
    Tensor x({3}, {1.0, 2.0, -0.5});
    Tensor shifted({3}, {1.0 + 4.0, 2.0 + 4.0, -0.5 + 4.0});
    CHECK(bit_equal(softmax(nullptr, x).probs, softmax(nullptr, shifted).probs));

    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
      Tensor logits = random_tensor({4}, rng, -5, 5);
      const double c = rng.next_uniform(-3, 3);
      Tensor moved = logits.clone();
      for (int i = 0; i < 4; ++i) moved.data()[i] += c;
      Categorical p1 = softmax(nullptr, logits);
      Categorical p2 = softmax(nullptr, moved);
      for (int i = 0; i < 4; ++i) CHECK(std::abs(p1.probs.at(i) - p2.probs.at(i)) < 1e-14);
    }
  }
  SECTION("normalization, range, argmax, log consistency") {
    Rng rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
      Tensor logits = random_tensor({5}, rng, -30, 30);
      Categorical c = softmax(nullptr, logits);
      double total = 0.0;
      int arg_logits = 0;
      for (int i = 0; i < 5; ++i) {
        total += c.probs.at(i);
        CHECK(c.probs.at(i) >= 0.0);
        CHECK(c.probs.at(i) <= 1.0);
        if (logits.at(i) > logits.at(arg_logits)) arg_logits = i;
        if (c.probs.at(i) >= 1e-300)
          CHECK(std::abs(c.log_probs.at(i) - std::log(c.probs.at(i))) < 1e-12);
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
      CHECK(c.argmax() == arg_logits);
    }
  }
  SECTION("preconditions") {
    CHECK_THROWS_AS(softmax(nullptr, Tensor({1}, {0.0})), std::invalid_argument);
  }
}

TEST_CASE("cross entropy examples") {
  SECTION("confident correct prediction is near zero") {
    Categorical c = softmax(nullptr, Tensor({3}, {30.0, 0.0, 0.0}));
    CHECK(cross_entropy(nullptr, c, 0).value() < 1e-12);
  }
  SECTION("uniform over four classes costs ln 4") {
    Categorical c = softmax(nullptr, Tensor({4}, {0, 0, 0, 0}));
    CHECK(std::abs(cross_entropy(nullptr, c, 2).value() - std::log(4.0)) < 1e-14);
  }
  SECTION("quarter probability costs ln 4") {
    Categorical c = softmax(nullptr, Tensor({2}, {std::log(0.25), std::log(0.75)}));
    CHECK(std::abs(cross_entropy(nullptr, c, 0).value() - std::log(4.0)) < 1e-13);
  }
  SECTION("label range checked") {
    Categorical c = softmax(nullptr, Tensor({2}, {0, 0}));
    CHECK_THROWS_AS(cross_entropy(nullptr, c, 2), std::invalid_argument);
    CHECK_THROWS_AS(cross_entropy(nullptr, c, -1), std::invalid_argument);
  }
  SECTION("cross-entropy and log-prob paths agree") {
    Rng rng(13);
    for (int trial = 0; trial < 1000; ++trial) {
      Tensor logits = random_tensor({4}, rng, -20, 20);
      Categorical c = softmax(nullptr, logits);
      const int label = static_cast<int>(rng.next_below(4));
      CHECK(std::abs(cross_entropy(nullptr, c, label).value() + c.log_probs.at(label)) <
            1e-12);
    }
  }
}

TEST_CASE("categorical kl examples and invariants") {
  SECTION("identical distributions have zero divergence") {
    Categorical q = softmax(nullptr, Tensor({3}, {0.4, -1.0, 2.0}));
    CHECK(std::abs(kl_categorical(nullptr, q, q).value()) < 1e-12);
  }
  SECTION("one-hot against uniform costs ln 2") {
    Categorical q = softmax(nullptr, Tensor({2}, {500.0, -500.0}));
    Categorical p = softmax(nullptr, Tensor({2}, {0.0, 0.0}));
    CHECK(q.probs.at(0) == 1.0);
    CHECK(q.probs.at(1) == 0.0);  // underflow keeps 0 * log 0 = 0 workable
    CHECK(std::abs(kl_categorical(nullptr, q, p).value() - std::log(2.0)) < 1e-14);
  }
  SECTION("hand-computed asymmetric divergence") {
    Categorical q = softmax(nullptr, Tensor({2}, {std::log(0.25), std::log(0.75)}));
    Categorical p = softmax(nullptr, Tensor({2}, {0.0, 0.0}));
    const double expected = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
    CHECK(std::abs(kl_categorical(nullptr, q, p).value() - expected) < 1e-13);
  }
  SECTION("dimension mismatch") {
    Categorical q = softmax(nullptr, Tensor({2}, {0, 0}));
    Categorical p = softmax(nullptr, Tensor({3}, {0, 0, 0}));
    CHECK_THROWS_AS(kl_categorical(nullptr, q, p), std::invalid_argument);
  }
  SECTION("non-negativity and zero iff equal") {
    Rng rng(17);
    for (int trial = 0; trial < 1000; ++trial) {
      Categorical q = softmax(nullptr, random_tensor({4}, rng, -10, 10));
      Categorical p = softmax(nullptr, random_tensor({4}, rng, -10, 10));
      const double kl = kl_categorical(nullptr, q, p).value();
      CHECK(kl >= -1e-12);
      double max_gap = 0.0;
      for (int i = 0; i < 4; ++i)
        max_gap = std::max(max_gap, std::abs(q.probs.at(i) - p.probs.at(i)));
      if (max_gap >= 1e-6) CHECK(kl > 0.0);
      if (kl <= 1e-12) CHECK(max_gap < 1e-5);
    }
  }
}

TEST_CASE("categorical from plain probabilities floors tiny values") {
  Categorical c = Categorical::from_probs({1.0 - 1e-310, 1e-310});
  CHECK(std::isfinite(c.log_probs.at(1)));
  CHECK(c.log_probs.at(1) < -600.0);
}

TEST_CASE("tape replay determinism") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor w = random_tensor({4, 4}, rng);
    Tensor x = random_tensor({4}, rng);
    Tape tape;
    tape.watch(w);
    Tensor loss = sum_all(&tape, sigmoid(&tape, matmul(&tape, w, x)));
    Tensor grad = tape.backward(loss).grad(w);
    return std::make_pair(loss.value(), grad);
  };
  const auto [l1, g1] = run(99);
  const auto [l2, g2] = run(99);
  CHECK(l1 == l2);
  CHECK(bit_equal(g1, g2));
}
