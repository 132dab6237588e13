#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ialgca/gradcheck.hpp"
#include "ialgca/gradcheck_suite.hpp"
#include "ialgca/param.hpp"
#include "ialgca/tape.hpp"

using namespace ialgca;

TEST_CASE("primitive forward examples") {
  Tape<double> tape;
  auto x = constant(tape, Tensord::from({1}, {0.0}));
  CHECK(sigmoid(x).t().data[0] == doctest::Approx(0.5).epsilon(1e-15));

  auto z = constant(tape, Tensord::from({3}, {0.0, 0.0, 0.0}));
  auto sm = softmax_last(z);
  for (int i = 0; i < 3; ++i)
    CHECK(sm.t().data[i] == doctest::Approx(1.0 / 3).epsilon(1e-15));

  auto m = constant(tape, Tensord::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto mean0 = mean_axis(m, 0);
  CHECK(mean0.t().shape == std::vector<int>{3});
  CHECK(mean0.t().data[0] == 2.5);
  CHECK(mean0.t().data[1] == 3.5);
  CHECK(mean0.t().data[2] == 4.5);
}

TEST_CASE("shape errors name the primitive and both shapes") {
  Tape<double> tape;
  auto a = constant(tape, Tensord::zeros({2, 3}));
  auto b = constant(tape, Tensord::zeros({4, 5}));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("(2,3)") != std::string::npos);
    CHECK(msg.find("(4,5)") != std::string::npos);
  }
}

TEST_CASE("non-finite outputs raise structured numeric errors") {
  Tape<double> tape;
  auto x = constant(tape, Tensord::from({2}, {-1.0, 4.0}));
  CHECK_THROWS_AS(log(x), NumericError);
  CHECK_THROWS_AS(sqrt(x), NumericError);
  auto big = constant(tape, Tensord::from({1}, {1e308}));
  CHECK_THROWS_AS(mul(big, big), NumericError);
}

TEST_CASE("backward basics") {
  SUBCASE("d(x*x)/dx = 2x") {
    Tape<double> tape;
    auto x = constant(tape, Tensord::from({1}, {3.0}));
    auto loss = mean_all(mul(x, x));
    auto grads = tape.backward(loss.id);
    CHECK(grads[static_cast<size_t>(x.id)].data[0] == doctest::Approx(6.0).epsilon(1e-12));
  }
  SUBCASE("sigmoid'(0) = 0.25") {
    Tape<double> tape;
    auto x = constant(tape, Tensord::from({1}, {0.0}));
    auto loss = mean_all(sigmoid(x));
    auto grads = tape.backward(loss.id);
    CHECK(grads[static_cast<size_t>(x.id)].data[0] == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("mean of 4 elements gives 0.25 each") {
    Tape<double> tape;
    auto x = constant(tape, Tensord::from({4}, {1, 2, 3, 4}));
    auto loss = mean_all(x);
    auto grads = tape.backward(loss.id);
    for (int i = 0; i < 4; ++i)
      CHECK(grads[static_cast<size_t>(x.id)].data[i] == doctest::Approx(0.25));
  }
  SUBCASE("non-scalar loss is a contract violation") {
    Tape<double> tape;
    auto x = constant(tape, Tensord::zeros({3}));
    auto y = relu(x);
    CHECK_THROWS_AS(tape.backward(y.id), ContractError);
  }
  SUBCASE("reusing a tensor accumulates additively") {
    Tape<double> tape;
    auto x = constant(tape, Tensord::from({1}, {2.0}));
    auto y = add(mul(x, x), x);  // x^2 + x -> 2x + 1 = 5
    auto grads = tape.backward(mean_all(y).id);
    CHECK(grads[static_cast<size_t>(x.id)].data[0] == doctest::Approx(5.0).epsilon(1e-12));
  }
  SUBCASE("unreached leaves get zero gradients") {
    Tape<double> tape;
    auto x = constant(tape, Tensord::from({1}, {2.0}));
    auto unused = constant(tape, Tensord::from({2}, {1.0, 1.0}));
    auto grads = tape.backward(mean_all(mul(x, x)).id);
    REQUIRE(grads[static_cast<size_t>(unused.id)].data.size() == 2);
    CHECK(grads[static_cast<size_t>(unused.id)].data[0] == 0.0);
    CHECK(grads[static_cast<size_t>(unused.id)].data[1] == 0.0);
  }
}

TEST_CASE("softmax rows sum to one and stay in (0,1)") {
  Rng rng(11);
  for (int c = 0; c < 50; ++c) {
    Tape<double> tape;
    auto x = constant(tape, Tensord::randn({4, 6}, rng, 3.0));
    auto y = softmax_last(x);
    for (int r = 0; r < 4; ++r) {
      double sum = 0;
      for (int k = 0; k < 6; ++k) {
        double v = y.t().at(r, k);
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("tape replay determinism") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tape<double> tape;
    auto x = constant(tape, Tensord::randn({3, 4}, rng));
    auto w = constant(tape, Tensord::randn({4, 2}, rng));
    auto y = softmax_last(matmul(relu(x), w));
    return y.t();
  };
  Tensord a = run(5), b = run(5), c = run(6);
  REQUIRE(a.numel() == b.numel());
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(std::memcmp(&a.data[i], &b.data[i], sizeof(double)) == 0);
  bool any_diff = false;
  for (int64_t i = 0; i < a.numel(); ++i) any_diff |= a.data[i] != c.data[i];
  CHECK(any_diff);
}

TEST_CASE("sgd_step") {
  SUBCASE("basic update") {
    ParamSet<double> ps;
    ps.add("w", Tensord::from({1}, {1.0}));
    std::vector<Tensord> grads{Tensord::from({1}, {2.0})};
    sgd_step(ps, grads, 0.1);
    CHECK(ps[0].value.data[0] == doctest::Approx(0.8).epsilon(1e-15));
  }
  SUBCASE("zero gradient is a fixed point") {
    ParamSet<double> ps;
    ps.add("w", Tensord::from({1}, {1.5}));
    std::vector<Tensord> grads{Tensord::zeros({1})};
    sgd_step(ps, grads, 0.1);
    CHECK(ps[0].value.data[0] == 1.5);
  }
  SUBCASE("two lr=0.5 steps on x^2 reach the minimum and stay") {
    ParamSet<double> ps;
    ps.add("x", Tensord::from({1}, {1.0}));
    for (int step = 0; step < 2; ++step) {
      Tape<double> tape;
      auto vals = ps.bind(tape);
      auto loss = mean_all(mul(vals[0], vals[0]));
      auto grads = tape.backward(loss.id);
      sgd_step(ps, grads, 0.5);
    }
    CHECK(ps[0].value.data[0] == 0.0);
  }
  SUBCASE("non-trainable parameters stay put; missing gradient rejected") {
    ParamSet<double> ps;
    ps.add("w", Tensord::from({1}, {1.0}));
    ps.add("frozen", Tensord::from({1}, {7.0}), /*trainable=*/false);
    std::vector<Tensord> grads{Tensord::from({1}, {1.0}), Tensord()};
    sgd_step(ps, grads, 0.5);
    CHECK(ps[1].value.data[0] == 7.0);
    std::vector<Tensord> bad{Tensord()};
    bad.resize(2);
    CHECK_THROWS_AS(sgd_step(ps, bad, 0.5), ContractError);
  }
}

TEST_CASE("finite difference oracle") {
  SUBCASE("x^2 at 3") {
    ParamSet<double> ps;
    ps.add("x", Tensord::from({1}, {3.0}));
    auto fd = finite_diff_gradient(
        [](const ParamSet<double>& p) {
          double v = p[0].value.data[0];
          return v * v;
        },
        ps);
    CHECK(std::abs(fd["x"].data[0] - 6.0) < 1e-8);
  }
  SUBCASE("non-deterministic functions are rejected") {
    ParamSet<double> ps;
    ps.add("x", Tensord::from({1}, {1.0}));
    int calls = 0;
    CHECK_THROWS_AS(finite_diff_gradient(
                        [&calls](const ParamSet<double>&) {
                          return static_cast<double>(++calls);
                        },
                        ps),
                    OracleError);
  }
  SUBCASE("state-mutating functions are rejected") {
    ParamSet<double> ps;
    ps.add("x", Tensord::from({1}, {1.0}));
    CHECK_THROWS_AS(finite_diff_gradient(
                        [](const ParamSet<double>& p) {
                          auto& hack = const_cast<ParamSet<double>&>(p);
                          hack[0].value.data[0] += 1.0;
                          return 0.0;
                        },
                        ps),
                    OracleError);
  }
  SUBCASE("epsilon must be positive") {
    ParamSet<double> ps;
    ps.add("x", Tensord::from({1}, {1.0}));
    CHECK_THROWS_AS(
        finite_diff_gradient([](const ParamSet<double>&) { return 0.0; }, ps, 0.0),
        ContractError);
  }
}

TEST_CASE("IAL logits match the analytic backward (oracle cross-check)") {
  // f = IAL of [2,1,0] target 0 through the tape vs central differences
  ParamSet<double> ps;
  ps.add("logits", Tensord::from({1, 3}, {2.0, 1.0, 0.0}));
  auto loss_of = [](const ParamSet<double>& p) {
    Tape<double> tape;
    auto vals = p.bind(tape);
    Val<double> xt = reshape(gather_last(vals[0], {0}), {1, 1});
    Val<double> xm = reshape(gather_last(vals[0], {1}), {1, 1});
    Val<double> two = concat_axis<double>({xt, xm}, 1);
    Val<double> picked = gather_last(log(softmax_last(two)), {0});
    return scalar_mul(mean_all(picked), -1.0).t().data[0];
  };
  auto fd = finite_diff_gradient(loss_of, ps);
  Tape<double> tape;
  auto vals = ps.bind(tape);
  Val<double> xt = reshape(gather_last(vals[0], {0}), {1, 1});
  Val<double> xm = reshape(gather_last(vals[0], {1}), {1, 1});
  Val<double> two = concat_axis<double>({xt, xm}, 1);
  Val<double> picked = gather_last(log(softmax_last(two)), {0});
  auto grads = tape.backward(scalar_mul(mean_all(picked), -1.0).id);
  for (int i = 0; i < 3; ++i)
    CHECK(rel_err(grads[0].data[i], fd["logits"].data[i]) <= 1e-6);
}

TEST_CASE("per-primitive analytic adjoints match central differences") {
  auto results = gradcheck_primitives(20);
  for (const auto& r : results) {
    INFO(r.name, " max_rel ", r.max_rel);
    CHECK(r.max_rel <= 1e-6);
  }
}
