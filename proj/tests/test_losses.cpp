#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "ialgca/gradcheck_suite.hpp"
#include "ialgca/losses.hpp"

using namespace ialgca;

namespace {

double ce_value(const Tensord& logits, const std::vector<int>& targets) {
  Tape<double> tape;
  return cross_entropy(constant(tape, logits), targets).t().data[0];
}

double ial_value(const Tensord& logits, const std::vector<int>& targets) {
  Tape<double> tape;
  return intensity_aware_loss(constant(tape, logits), targets).t().data[0];
}

}  // namespace

TEST_CASE("cross entropy examples") {
  Tensord uniform = Tensord::zeros({1, 7});
  CHECK(ce_value(uniform, {0}) == doctest::Approx(std::log(7.0)).epsilon(1e-12));

  Tensord margin = Tensord::zeros({1, 7});
  margin.at(0, 2) = 50.0;
  CHECK(ce_value(margin, {2}) < 1e-9);

  Tensord three = Tensord::from({1, 3}, {2.0, 1.0, 0.0});
  CHECK(ce_value(three, {0}) == doctest::Approx(0.40760596444438037).epsilon(1e-12));
}

TEST_CASE("cross entropy contract") {
  Tape<double> tape;
  auto ok = constant(tape, Tensord::zeros({2, 3}));
  CHECK_THROWS_AS(cross_entropy(ok, {0, 3}), ContractError);   // target out of range
  CHECK_THROWS_AS(cross_entropy(ok, {0}), ContractError);      // batch mismatch
  auto k1 = constant(tape, Tensord::zeros({2, 1}));
  CHECK_THROWS_AS(cross_entropy(k1, {0, 0}), ContractError);   // K < 2
}

TEST_CASE("intensity-aware loss examples") {
  // x_t == x_max -> P = 0.5 -> ln 2
  Tensord tie = Tensord::from({1, 3}, {1.0, 1.0, -3.0});
  CHECK(ial_value(tie, {0}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensord three = Tensord::from({1, 3}, {2.0, 1.0, 0.0});
  CHECK(ial_value(three, {0}) == doctest::Approx(0.3132616875182228).epsilon(1e-12));

  Tape<double> tape;
  auto k1 = constant(tape, Tensord::zeros({1, 1}));
  CHECK_THROWS_AS(intensity_aware_loss(k1, {0}), ContractError);
}

TEST_CASE("two-class collapse: IAL equals CE exactly for K=2") {
  Rng rng(21);
  for (int i = 0; i < 10000; ++i) {
    Tensord logits = Tensord::randn({1, 2}, rng, 3.0);
    int target = static_cast<int>(rng.u64() & 1);
    double ce = ce_value(logits, {target});
    double ial = ial_value(logits, {target});
    REQUIRE(std::abs(ce - ial) <= 1e-12);
  }
}

TEST_CASE("P_IA dominates the target softmax probability (L_IA <= L_CE)") {
  Rng rng(22);
  for (int i = 0; i < 10000; ++i) {
    int k = 2 + static_cast<int>(rng.u64() % 7);
    Tensord logits = Tensord::randn({1, k}, rng, 3.0);
    int target = static_cast<int>(rng.u64() % static_cast<uint64_t>(k));
    double ce = ce_value(logits, {target});
    double ial = ial_value(logits, {target});
    REQUIRE(ial <= ce + 1e-12);
  }
}

TEST_CASE("margin sweep drives L_IA to zero with L_CE") {
  double prev = 1e9;
  std::vector<std::pair<double, double>> cases = {{5, 1e-2}, {10, 1e-4}, {20, 1e-8}};
  for (auto [m, bound] : cases) {
    Tensord logits = Tensord::zeros({1, 5});
    logits.at(0, 1) = m;
    double v = ial_value(logits, {1});
    CHECK(v < bound);
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("shift invariance of both losses") {
  Rng rng(23);
  for (int i = 0; i < 200; ++i) {
    Tensord logits = Tensord::randn({2, 5}, rng, 2.0);
    Tensord shifted = logits;
    double c = rng.uniform(-7.0, 7.0);
    shifted.data += c;
    std::vector<int> targets{1, 4};
    CHECK(std::abs(ce_value(logits, targets) - ce_value(shifted, targets)) <= 1e-12);
    CHECK(std::abs(ial_value(logits, targets) - ial_value(shifted, targets)) <= 1e-12);
  }
}

TEST_CASE("ties break to the lowest index and only that logit gets gradient") {
  Tensord logits = Tensord::from({1, 4}, {1.0, 0.7, 0.7, 0.2});
  Tape<double> tape;
  auto lv = constant(tape, logits);
  auto loss = intensity_aware_loss(lv, {0});
  auto grads = tape.backward(loss.id);
  const Tensord& g = grads[static_cast<size_t>(lv.id)];
  CHECK(g.data[0] != 0.0);  // target
  CHECK(g.data[1] != 0.0);  // lowest-index maximizer
  CHECK(g.data[2] == 0.0);  // equal logit at higher index: no gradient
  CHECK(g.data[3] == 0.0);

  // permuting the two equal non-target logits leaves the value unchanged
  Tensord permuted = Tensord::from({1, 4}, {1.0, 0.7, 0.7, 0.2});
  CHECK(ial_value(permuted, {0}) == ial_value(logits, {0}));
}

TEST_CASE("combined loss") {
  Tensord three = Tensord::from({1, 3}, {2.0, 1.0, 0.0});
  SUBCASE("lambda 0 and no aux collapses to CE bitwise") {
    Tape<double> tape;
    LossConfig cfg;
    cfg.lambda = 0.0;
    auto logits = constant(tape, three);
    double combined = combined_loss(logits, {}, {0}, cfg).t().data[0];
    double ce = ce_value(three, {0});
    CHECK(std::memcmp(&combined, &ce, sizeof(double)) == 0);
  }
  SUBCASE("lambda 0 produces bitwise-identical gradients to plain CE") {
    Rng rng(24);
    Tensord logits = Tensord::randn({3, 5}, rng);
    std::vector<int> targets{0, 2, 4};
    LossConfig cfg;
    cfg.lambda = 0.0;
    Tape<double> t1;
    auto v1 = constant(t1, logits);
    auto g1 = t1.backward(combined_loss(v1, {}, targets, cfg).id);
    Tape<double> t2;
    auto v2 = constant(t2, logits);
    auto g2 = t2.backward(cross_entropy(v2, targets).id);
    REQUIRE(g1[static_cast<size_t>(v1.id)].numel() == g2[static_cast<size_t>(v2.id)].numel());
    CHECK(std::memcmp(g1[static_cast<size_t>(v1.id)].data.data(),
                      g2[static_cast<size_t>(v2.id)].data.data(),
                      sizeof(double) * 15) == 0);
  }
  SUBCASE("lambda 0.1 composition") {
    Tape<double> tape;
    LossConfig cfg;
    cfg.lambda = 0.1;
    auto logits = constant(tape, three);
    CHECK(combined_loss(logits, {}, {0}, cfg).t().data[0] ==
          doctest::Approx(0.43893213319620265).epsilon(1e-12));
  }
  SUBCASE("huge target margin sends the total loss to zero") {
    Tensord big = Tensord::zeros({1, 4});
    big.at(0, 0) = 60.0;
    Tape<double> tape;
    LossConfig cfg;
    cfg.lambda = 0.1;
    CHECK(combined_loss(constant(tape, big), {}, {0}, cfg).t().data[0] < 1e-9);
  }
  SUBCASE("aux heads contribute weighted CE terms") {
    Tape<double> tape;
    LossConfig cfg;
    cfg.lambda = 0.0;
    cfg.aux_weight = 0.3;
    auto logits = constant(tape, three);
    auto aux = constant(tape, Tensord::from({1, 3}, {0.0, 0.0, 0.0}));
    double total = combined_loss(logits, {aux}, {0}, cfg).t().data[0];
    CHECK(total == doctest::Approx(0.40760596444438037 + 0.3 * std::log(3.0)).epsilon(1e-12));
  }
  SUBCASE("negative weights rejected") {
    LossConfig cfg;
    cfg.lambda = -0.1;
    Tape<double> tape;
    auto logits = constant(tape, three);
    CHECK_THROWS_AS(combined_loss(logits, {}, {0}, cfg), ContractError);
  }
}

TEST_CASE("loss gradients match central differences, incl. near-tie points") {
  for (const auto& r : gradcheck_losses()) {
    INFO(r.name, " max_rel ", r.max_rel);
    CHECK(r.max_rel <= 1e-6);
  }
}
