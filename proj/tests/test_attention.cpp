#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "ialgca/attention.hpp"
#include "ialgca/gradcheck_suite.hpp"

using namespace ialgca;

namespace {

double sigma(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Straight-line re-evaluation of the squeeze MLP on one frame descriptor,
// independent of the tape.
std::vector<double> mlp_oracle(const std::vector<double>& z, const Tensord& w1,
                               const Tensord& w2) {
  int c = w1.dim(1), b = w1.dim(0);
  std::vector<double> h(static_cast<size_t>(b), 0.0);
  for (int i = 0; i < b; ++i) {
    double acc = 0;
    for (int j = 0; j < c; ++j) acc += w1.at(i, j) * z[static_cast<size_t>(j)];
    h[static_cast<size_t>(i)] = std::max(0.0, acc);
  }
  std::vector<double> s(static_cast<size_t>(c), 0.0);
  for (int i = 0; i < c; ++i) {
    double acc = 0;
    for (int j = 0; j < b; ++j) acc += w2.at(i, j) * h[static_cast<size_t>(j)];
    s[static_cast<size_t>(i)] = acc;
  }
  return s;
}

bool bitwise_equal(const Tensord& a, const Tensord& b) {
  if (a.shape != b.shape) return false;
  return std::memcmp(a.data.data(), b.data.data(),
                     static_cast<size_t>(a.numel()) * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("SE block") {
  SUBCASE("zero weights gate everything at 0.5") {
    Rng rng(1);
    Tensord x = Tensord::randn({2, 3, 2, 2}, rng);
    SEBlock<double> blk;
    blk.r = 3;
    blk.w1 = Tensord::zeros({1, 3});
    blk.w2 = Tensord::zeros({3, 1});
    auto [xt, s] = se_attention(x, blk);
    for (int64_t i = 0; i < s.numel(); ++i) CHECK(s.data[i] == 0.5);
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(xt.data[i] == doctest::Approx(x.data[i] / 2).epsilon(1e-15));
  }
  SUBCASE("zero input gives the zero-descriptor gate") {
    Rng rng(2);
    SEBlock<double> blk = se_block_init<double>(4, 2, rng);
    Tensord x = Tensord::zeros({2, 4, 3, 3});
    auto [xt, s] = se_attention(x, blk);
    // Z = 0, so s = sigma(W2 relu(0)) = sigma(0) = 0.5 per channel
    for (int64_t i = 0; i < s.numel(); ++i) CHECK(s.data[i] == 0.5);
    for (int64_t i = 0; i < xt.numel(); ++i) CHECK(xt.data[i] == 0.0);
  }
  SUBCASE("matches a straight-line re-computation") {
    Rng rng(3);
    Tensord x = Tensord::randn({1, 2, 2, 2}, rng);
    SEBlock<double> blk = se_block_init<double>(2, 1, rng);
    auto [xt, s] = se_attention(x, blk);
    std::vector<double> z(2, 0.0);
    for (int c = 0; c < 2; ++c) {
      double acc = 0;
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) acc += x.at(0, c, i, j);
      z[static_cast<size_t>(c)] = acc / 4.0;
    }
    auto pre = mlp_oracle(z, blk.w1, blk.w2);
    for (int c = 0; c < 2; ++c) {
      double expected = sigma(pre[static_cast<size_t>(c)]);
      CHECK(s.at(0, c) == doctest::Approx(expected).epsilon(1e-12));
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
          CHECK(xt.at(0, c, i, j) ==
                doctest::Approx(expected * x.at(0, c, i, j)).epsilon(1e-12));
    }
  }
  SUBCASE("empty feature map is rejected") {
    Rng rng(4);
    SEBlock<double> blk = se_block_init<double>(2, 1, rng);
    Tensord x = Tensord::zeros({1, 2, 0, 3});
    CHECK_THROWS_AS(se_attention(x, blk), ShapeError);
  }
}

TEST_CASE("GCA block") {
  SUBCASE("frame-constant gate collapses to 2v") {
    // constant input over frames -> s constant over frames -> S = 2*sqrt(v*v)
    Rng rng(5);
    GCABlock<double> blk = gca_block_init<double>(3, 2, 2, 1, rng, 0.05);
    Tensord frame = Tensord::randn({1, 3, 2, 2}, rng);
    Tensord x({4, 3, 2, 2});
    for (int t = 0; t < 4; ++t)
      for (int64_t i = 0; i < frame.numel(); ++i)
        x.data[t * frame.numel() + i] = frame.data[i];
    auto [xt, s] = gca_attention(x, blk);
    (void)xt;
    for (int c = 0; c < 3; ++c) {
      double v = s.at(0, c) / 2.0;  // with s frame-constant, S = 2*sqrt(v*v) = 2v
      CHECK(s.at(0, c) == doctest::Approx(2.0 * v).epsilon(1e-12));
      for (int t = 1; t < 4; ++t) CHECK(s.at(t, c) == doctest::Approx(s.at(0, c)));
    }
  }
  SUBCASE("Eq-5-style mapping on s = (0.9, 0.4)") {
    Tape<double> tape;
    auto s = constant(tape, Tensord::from({2, 1}, {0.9, 0.4}));
    auto gap = mean_axis(s, 0);
    CHECK(gap.t().data[0] == doctest::Approx(0.65).epsilon(1e-15));
    auto s_gca = scalar_mul(sqrt(mul_bcast_last(s, gap)), 2.0);
    CHECK(s_gca.t().data[0] == doctest::Approx(1.5297058540778354).epsilon(1e-12));
    CHECK(s_gca.t().data[1] == doctest::Approx(1.0198039027185569).epsilon(1e-12));
  }
  SUBCASE("identity configuration is a bitwise identity map") {
    Rng rng(6);
    Tensord x = Tensord::randn({3, 4, 3, 2}, rng);
    GCABlock<double> blk = gca_block_identity<double>(4, 3, 2, 2);
    auto [xt, s] = gca_attention(x, blk);
    CHECK(bitwise_equal(xt, x));
    for (int64_t i = 0; i < s.numel(); ++i) CHECK(s.data[i] == 1.0);
  }
  SUBCASE("matches a straight-line re-computation") {
    Rng rng(7);
    Tensord x = Tensord::randn({2, 2, 2, 2}, rng);
    GCABlock<double> blk = gca_block_init<double>(2, 2, 2, 1, rng, 0.3);
    auto [xt, s] = gca_attention(x, blk);
    double sraw[2][2];
    for (int t = 0; t < 2; ++t) {
      std::vector<double> z(2, 0.0);
      for (int c = 0; c < 2; ++c) {
        double acc = 0;
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j) acc += x.at(t, c, i, j) * blk.kernel.at(c, i, j);
        z[static_cast<size_t>(c)] = acc;
      }
      auto pre = mlp_oracle(z, blk.w1, blk.w2);
      for (int c = 0; c < 2; ++c) sraw[t][c] = sigma(pre[static_cast<size_t>(c)]);
    }
    for (int c = 0; c < 2; ++c) {
      double gap = 0.5 * (sraw[0][c] + sraw[1][c]);
      for (int t = 0; t < 2; ++t) {
        double expected = 2.0 * std::sqrt(sraw[t][c] * gap);
        CHECK(s.at(t, c) == doctest::Approx(expected).epsilon(1e-12));
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j)
            CHECK(xt.at(t, c, i, j) ==
                  doctest::Approx(expected * x.at(t, c, i, j)).epsilon(1e-12));
      }
    }
  }
  SUBCASE("kernel/feature mismatch is a shape error") {
    Rng rng(8);
    GCABlock<double> blk = gca_block_init<double>(2, 4, 4, 1, rng);
    Tensord x = Tensord::randn({1, 2, 3, 3}, rng);
    CHECK_THROWS_AS(gca_attention(x, blk), ShapeError);
  }
}

TEST_CASE("CBAM channel block") {
  SUBCASE("zero weights gate at 0.5") {
    Rng rng(9);
    Tensord x = Tensord::randn({2, 3, 2, 2}, rng);
    CBAMChannelBlock<double> blk;
    blk.r = 3;
    blk.w1 = Tensord::zeros({1, 3});
    blk.w2 = Tensord::zeros({3, 1});
    auto [xt, s] = cbam_channel_attention(x, blk);
    (void)xt;
    for (int64_t i = 0; i < s.numel(); ++i) CHECK(s.data[i] == 0.5);
  }
  SUBCASE("constant input degenerates to sigma(2 MLP(Z))") {
    Rng rng(10);
    CBAMChannelBlock<double> blk = cbam_block_init<double>(3, 1, rng);
    Tensord x = Tensord::full({2, 3, 2, 2}, 0.7);
    auto [xt, s] = cbam_channel_attention(x, blk);
    (void)xt;
    std::vector<double> z(3, 0.7);  // avg and max pooling agree
    auto pre = mlp_oracle(z, blk.w1, blk.w2);
    for (int t = 0; t < 2; ++t)
      for (int c = 0; c < 3; ++c)
        CHECK(s.at(t, c) ==
              doctest::Approx(sigma(2.0 * pre[static_cast<size_t>(c)])).epsilon(1e-12));
  }
  SUBCASE("matches a straight-line re-computation") {
    Rng rng(11);
    Tensord x = Tensord::randn({1, 2, 2, 2}, rng);
    CBAMChannelBlock<double> blk = cbam_block_init<double>(2, 1, rng);
    auto [xt, s] = cbam_channel_attention(x, blk);
    (void)xt;
    std::vector<double> zavg(2, 0.0), zmax(2, 0.0);
    for (int c = 0; c < 2; ++c) {
      double acc = 0, mx = x.at(0, c, 0, 0);
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
          acc += x.at(0, c, i, j);
          mx = std::max(mx, x.at(0, c, i, j));
        }
      zavg[static_cast<size_t>(c)] = acc / 4.0;
      zmax[static_cast<size_t>(c)] = mx;
    }
    auto pa = mlp_oracle(zavg, blk.w1, blk.w2);
    auto pm = mlp_oracle(zmax, blk.w1, blk.w2);
    for (int c = 0; c < 2; ++c)
      CHECK(s.at(0, c) == doctest::Approx(sigma(pa[static_cast<size_t>(c)] +
                                                pm[static_cast<size_t>(c)]))
                              .epsilon(1e-12));
  }
}

namespace {
Tensord uniform_tensor(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensord t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data[i] = rng.uniform(lo, hi);
  return t;
}
}  // namespace

TEST_CASE("range separation: SE/CBAM in (0,1), GCA in (0,2)") {
  // Bounded uniform draws keep the pre-sigmoid activation provably under 36,
  // below the point where a double rounds sigma to exactly 0 or 1, so the
  // strict range bounds are checkable in floating point.
  Rng rng(12);
  double gca_max_seen = 0.0;
  for (int trial = 0; trial < 300; ++trial) {
    int t = 1 + trial % 3, c = 2 + trial % 3, h = 2 + trial % 2;
    Tensord x = uniform_tensor({t, c, h, 2}, rng, -2.0, 2.0);
    int b = bottleneck_dim(c, 2);
    SEBlock<double> se{uniform_tensor({b, c}, rng, -1, 1),
                       uniform_tensor({c, b}, rng, -1, 1), 2};
    auto s_se = se_attention(x, se).second;
    for (int64_t i = 0; i < s_se.numel(); ++i) {
      CHECK(s_se.data[i] > 0.0);
      CHECK(s_se.data[i] < 1.0);
    }
    CBAMChannelBlock<double> cb{uniform_tensor({b, c}, rng, -1, 1),
                                uniform_tensor({c, b}, rng, -1, 1), 2};
    auto s_cb = cbam_channel_attention(x, cb).second;
    for (int64_t i = 0; i < s_cb.numel(); ++i) {
      CHECK(s_cb.data[i] > 0.0);
      CHECK(s_cb.data[i] < 1.0);
    }
    GCABlock<double> gc{uniform_tensor({b, c}, rng, -1, 1),
                        uniform_tensor({c, b}, rng, -1, 1),
                        uniform_tensor({c, h, 2}, rng, -1.0 / (2 * h), 1.0 / (2 * h)), 2};
    auto s_gc = gca_attention(x, gc).second;
    for (int64_t i = 0; i < s_gc.numel(); ++i) {
      CHECK(s_gc.data[i] > 0.0);
      CHECK(s_gc.data[i] < 2.0);
      gca_max_seen = std::max(gca_max_seen, s_gc.data[i]);
    }
  }

  // amplification witness: single-frame clips make S_gca = 2s, so the search
  // only needs one gate above 0.75 (pre-activation bound still < 36)
  for (int trial = 0; trial < 5000 && gca_max_seen <= 1.5; ++trial) {
    Tensord x = uniform_tensor({1, 2, 2, 2}, rng, -4.0, 4.0);
    GCABlock<double> gc{uniform_tensor({1, 2}, rng, -1, 1),
                        uniform_tensor({2, 1}, rng, -1, 1),
                        uniform_tensor({2, 2, 2}, rng, -0.25, 0.25), 2};
    auto s_gc = gca_attention(x, gc).second;
    for (int64_t i = 0; i < s_gc.numel(); ++i) {
      CHECK(s_gc.data[i] > 0.0);
      CHECK(s_gc.data[i] < 2.0);
      gca_max_seen = std::max(gca_max_seen, s_gc.data[i]);
    }
  }
  CHECK(gca_max_seen > 1.5);
}

TEST_CASE("location sensitivity: GCA sees spatial layout, SE does not") {
  // identical spatial means, different layouts
  Tensord a = Tensord::zeros({1, 1, 2, 2});
  Tensord b = Tensord::full({1, 1, 2, 2}, 1.0);
  a.at(0, 0, 0, 0) = 4.0;  // all mass top-left
  {
    Tape<double> tape;
    auto za = mean_axis(mean_axis(constant(tape, a), 3), 2);
    auto zb = mean_axis(mean_axis(constant(tape, b), 3), 2);
    CHECK(za.t().data[0] == zb.t().data[0]);
  }
  {
    Tape<double> tape;
    Tensord kernel = Tensord::from({1, 2, 2}, {0.7, 0.1, 0.1, 0.1});
    auto za = weighted_spatial_sum(constant(tape, a), constant(tape, kernel));
    auto zb = weighted_spatial_sum(constant(tape, b), constant(tape, kernel));
    CHECK(za.t().data[0] != zb.t().data[0]);
  }
}

TEST_CASE("reduction ratio contract") {
  Rng rng(13);
  CHECK_THROWS_AS(se_block_init<double>(4, 8, rng), ContractError);
  CHECK(bottleneck_dim(8, 4) == 2);
}

TEST_CASE("all blocks pass finite-difference gradient checks") {
  for (const auto& r : gradcheck_blocks()) {
    INFO(r.name, " max_rel ", r.max_rel);
    CHECK(r.max_rel <= 1e-6);
  }
}
