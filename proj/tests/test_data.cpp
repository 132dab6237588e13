#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "ialgca/data.hpp"

using namespace ialgca;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("ialgca_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Data-driven nearest-prototype classifier: class prototypes are the mean
// frames of the training clips; test clips go to the closest prototype.
double prototype_accuracy(const Manifest& train, const Manifest& test,
                          const std::function<bool(const ClipRecord&)>& use_test) {
  int k = train.num_classes;
  std::vector<std::vector<double>> proto(static_cast<size_t>(k));
  std::vector<int> counts(static_cast<size_t>(k), 0);
  for (const auto& rec : train.records) {
    std::vector<int> all(static_cast<size_t>(rec.num_frames));
    std::iota(all.begin(), all.end(), 0);
    Tensorf clip = load_clip(rec, all);
    int64_t plane = clip.numel() / clip.dim(0);
    auto& p = proto[static_cast<size_t>(rec.label)];
    if (p.empty()) p.assign(static_cast<size_t>(plane), 0.0);
    for (int t = 0; t < clip.dim(0); ++t)
      for (int64_t i = 0; i < plane; ++i)
        p[static_cast<size_t>(i)] += clip.data[t * plane + i] / clip.dim(0);
    counts[static_cast<size_t>(rec.label)]++;
  }
  for (int c = 0; c < k; ++c)
    for (auto& v : proto[static_cast<size_t>(c)]) v /= counts[static_cast<size_t>(c)];

  int64_t total = 0, hit = 0;
  for (const auto& rec : test.records) {
    if (!use_test(rec)) continue;
    std::vector<int> all(static_cast<size_t>(rec.num_frames));
    std::iota(all.begin(), all.end(), 0);
    Tensorf clip = load_clip(rec, all);
    int64_t plane = clip.numel() / clip.dim(0);
    std::vector<double> mean(static_cast<size_t>(plane), 0.0);
    for (int t = 0; t < clip.dim(0); ++t)
      for (int64_t i = 0; i < plane; ++i)
        mean[static_cast<size_t>(i)] += clip.data[t * plane + i] / clip.dim(0);
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < k; ++c) {
      double d = 0;
      for (int64_t i = 0; i < plane; ++i) {
        double diff = mean[static_cast<size_t>(i)] - proto[static_cast<size_t>(c)][static_cast<size_t>(i)];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    ++total;
    if (best == rec.label) ++hit;
  }
  REQUIRE(total > 0);
  return static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("segment partition covers [0,n) exactly, earlier segments longer") {
  for (int n = 1; n <= 64; ++n)
    for (int u = 1; u <= n; ++u) {
      auto segs = segment_bounds(n, u);
      REQUIRE(segs.size() == static_cast<size_t>(u));
      int expect_start = 0;
      int prev_len = segs[0].second;
      for (auto [start, len] : segs) {
        CHECK(start == expect_start);
        CHECK(len >= 1);
        CHECK(len <= prev_len);  // earlier segments take the remainder
        prev_len = len;
        expect_start += len;
      }
      CHECK(expect_start == n);
    }
}

TEST_CASE("train sampler") {
  SUBCASE("n=16 U=16 V=1 is forced to 0..15") {
    Rng rng(1);
    auto idx = sample_train_indices(16, 16, 1, rng);
    REQUIRE(idx.size() == 16);
    for (int i = 0; i < 16; ++i) CHECK(idx[static_cast<size_t>(i)] == i);
  }
  SUBCASE("n=8 U=8 V=2 duplicates every frame exactly twice") {
    Rng rng(2);
    auto idx = sample_train_indices(8, 8, 2, rng);
    REQUIRE(idx.size() == 16);
    for (int i = 0; i < 8; ++i) {
      CHECK(idx[static_cast<size_t>(2 * i)] == i);
      CHECK(idx[static_cast<size_t>(2 * i + 1)] == i);
    }
  }
  SUBCASE("indices stay in their segment, sorted, exact length (1000 seeds)") {
    for (uint64_t seed = 0; seed < 1000; ++seed) {
      Rng rng(seed);
      auto idx = sample_train_indices(100, 8, 2, rng);
      REQUIRE(idx.size() == 16);
      auto segs = segment_bounds(100, 8);
      for (int s = 0; s < 8; ++s) {
        auto [start, len] = segs[static_cast<size_t>(s)];
        for (int v = 0; v < 2; ++v) {
          int i = idx[static_cast<size_t>(2 * s + v)];
          CHECK(i >= start);
          CHECK(i < start + len);
        }
        // segment length 12 or 13 >= V=2: no replacement, so indices distinct
        CHECK(idx[static_cast<size_t>(2 * s)] != idx[static_cast<size_t>(2 * s + 1)]);
      }
      CHECK(std::is_sorted(idx.begin(), idx.end()));
    }
  }
}

TEST_CASE("test sampler") {
  SUBCASE("n=16 U=8 V=2 picks whole segments") {
    auto idx = sample_test_indices(16, 8, 2);
    REQUIRE(idx.size() == 16);
    for (int i = 0; i < 16; ++i) CHECK(idx[static_cast<size_t>(i)] == i);
  }
  SUBCASE("n=24 U=8 V=2 picks the centred window offsets 0,1 of length-3 segments") {
    auto idx = sample_test_indices(24, 8, 2);
    std::vector<int> expect;
    for (int s = 0; s < 8; ++s) {
      expect.push_back(3 * s);
      expect.push_back(3 * s + 1);
    }
    CHECK(idx == expect);
  }
  SUBCASE("short segments repeat the middle index") {
    auto idx = sample_test_indices(3, 3, 2);
    CHECK(idx == std::vector<int>{0, 0, 1, 1, 2, 2});
  }
  SUBCASE("pure function: repeated calls identical") {
    for (int n : {1, 5, 16, 33, 64})
      for (int u : {1, 3, 7})
        for (int v : {1, 2, 4}) {
          if (u > n) continue;
          CHECK(sample_test_indices(n, u, v) == sample_test_indices(n, u, v));
        }
  }
}

TEST_CASE("clip file round trip") {
  fs::path dir = scratch_dir("clip");
  Rng rng(3);
  Tensorf clip = Tensorf::randn({5, 2, 3, 4}, rng);
  std::string path = (dir / "a.clip").string();
  write_clip(path, clip);

  SUBCASE("header") {
    CHECK(clip_header(path) == std::vector<int>{5, 2, 3, 4});
  }
  SUBCASE("full read is bitwise identical") {
    ClipRecord rec{path, 0, std::nullopt, 5};
    Tensorf back = load_clip(rec, {0, 1, 2, 3, 4});
    CHECK(back.shape == clip.shape);
    CHECK(std::memcmp(back.data.data(), clip.data.data(), sizeof(float) * clip.numel()) == 0);
  }
  SUBCASE("duplicate indices repeat frames") {
    ClipRecord rec{path, 0, std::nullopt, 5};
    Tensorf two = load_clip(rec, {2, 2});
    int64_t plane = clip.numel() / 5;
    for (int64_t i = 0; i < plane; ++i) {
      CHECK(two.data[i] == clip.data[2 * plane + i]);
      CHECK(two.data[plane + i] == clip.data[2 * plane + i]);
    }
  }
  SUBCASE("out-of-range index fails before any read") {
    ClipRecord rec{path, 0, std::nullopt, 5};
    CHECK_THROWS_AS(load_clip(rec, {0, 5}), IoError);
    CHECK_THROWS_AS(load_clip(rec, {-1}), IoError);
  }
  SUBCASE("bad magic rejected") {
    std::string bad = (dir / "bad.clip").string();
    std::ofstream os(bad, std::ios::binary);
    os << "WRONGMAG" << std::string(16, '\0');
    os.close();
    ClipRecord rec{bad, 0, std::nullopt, 1};
    CHECK_THROWS_AS(load_clip(rec, {0}), IoError);
  }
  fs::remove_all(dir);
}

TEST_CASE("manifest round trip") {
  fs::path dir = scratch_dir("manifest");
  Rng rng(4);
  write_clip((dir / "x.clip").string(), Tensorf::randn({3, 1, 2, 2}, rng));
  write_clip((dir / "y.clip").string(), Tensorf::randn({4, 1, 2, 2}, rng));
  Manifest m;
  m.split = "train";
  m.num_classes = 2;
  m.records.push_back({"x.clip", 0, std::nullopt, 3});
  m.records.push_back({"y.clip", 1, 0.25, 4});
  std::string path = (dir / "train.csv").string();
  save_manifest(path, m);

  Manifest back = load_manifest(path);
  REQUIRE(back.records.size() == 2);
  CHECK(back.num_classes == 2);
  CHECK(!back.records[0].intensity.has_value());
  REQUIRE(back.records[1].intensity.has_value());
  CHECK(*back.records[1].intensity == doctest::Approx(0.25));
  CHECK(back.records[1].num_frames == 4);
  CHECK(fs::path(back.records[0].path).is_absolute());

  SUBCASE("missing clip file is an error") {
    Manifest ghost = m;
    ghost.records[0].path = "ghost.clip";
    save_manifest(path, ghost);
    CHECK_THROWS_AS(load_manifest(path), IoError);
  }
  SUBCASE("bad header is an error") {
    std::ofstream os(path, std::ios::trunc);
    os << "wrong,header\n";
    os.close();
    CHECK_THROWS_AS(load_manifest(path), IoError);
  }
  fs::remove_all(dir);
}

TEST_CASE("synthetic generator") {
  SUBCASE("same seed twice gives byte-identical datasets") {
    SyntheticConfig cfg;
    cfg.num_classes = 3;
    cfg.train_per_class = 2;
    cfg.test_per_class = 2;
    cfg.frames_min = 4;
    cfg.frames_max = 6;
    cfg.height = cfg.width = 8;
    cfg.seed = 11;
    fs::path d1 = scratch_dir("synth1"), d2 = scratch_dir("synth2");
    generate_synthetic(cfg, d1.string());
    generate_synthetic(cfg, d2.string());
    for (const char* f : {"train.csv", "test.csv"})
      CHECK(file_bytes(d1 / f) == file_bytes(d2 / f));
    for (const auto& entry : fs::directory_iterator(d1 / "clips")) {
      fs::path rel = entry.path().filename();
      CHECK(file_bytes(entry.path()) == file_bytes(d2 / "clips" / rel));
    }
    fs::remove_all(d1);
    fs::remove_all(d2);
  }
  SUBCASE("zero intensity collapses onto the neutral pattern") {
    SyntheticConfig cfg;
    cfg.height = cfg.width = 8;
    Rng rng(5);
    SyntheticPatterns pats = make_patterns(cfg, rng);
    Rng ra(1), rb(1);
    Tensorf nne = make_clip_frames(pats.base, &pats.classes[0], 0.0, 4, true, 0.0, ra);
    Tensorf ne = make_clip_frames(pats.base, nullptr, 0.0, 4, true, 0.0, rb);
    CHECK(std::memcmp(nne.data.data(), ne.data.data(), sizeof(float) * ne.numel()) == 0);
    // and the deviation from neutral is bounded by the intensity
    for (double alpha : {1e-4, 1e-2}) {
      Rng rc(1);
      Tensorf low = make_clip_frames(pats.base, &pats.classes[0], alpha, 4, true, 0.0, rc);
      double max_pat = 0;
      for (int64_t i = 0; i < pats.classes[0].numel(); ++i)
        max_pat = std::max(max_pat, std::abs(double(pats.classes[0].data[i])));
      for (int64_t i = 0; i < low.numel(); ++i)
        CHECK(std::abs(low.data[i] - ne.data[i]) <= alpha * max_pat + 1e-6);
    }
  }
  SUBCASE("intensity metadata: neutral 0, others in the two ranges") {
    SyntheticConfig cfg;
    cfg.num_classes = 4;
    cfg.train_per_class = 3;
    cfg.test_per_class = 3;
    cfg.height = cfg.width = 8;
    cfg.frames_min = 4;
    cfg.frames_max = 5;
    fs::path dir = scratch_dir("synth3");
    auto [train, test] = generate_synthetic(cfg, dir.string());
    for (const auto& m : {train, test})
      for (const auto& rec : m.records) {
        REQUIRE(rec.intensity.has_value());
        if (rec.label == 0) CHECK(*rec.intensity == 0.0);
        else {
          bool in_low = *rec.intensity > cfg.low_lo && *rec.intensity <= cfg.low_hi;
          bool in_high = *rec.intensity > cfg.high_lo && *rec.intensity <= cfg.high_hi;
          CHECK((in_low || in_high));
        }
      }
    fs::remove_all(dir);
  }
  SUBCASE("noise-free high-intensity data is perfectly separable by prototypes") {
    SyntheticConfig cfg;
    cfg.num_classes = 4;
    cfg.train_per_class = 3;
    cfg.test_per_class = 4;
    cfg.height = cfg.width = 8;
    cfg.frames_min = 4;
    cfg.frames_max = 6;
    cfg.noise_std = 0.0;
    cfg.p_low = 0.0;
    cfg.high_lo = 0.95;
    cfg.high_hi = 1.0;
    fs::path dir = scratch_dir("synth4");
    auto [train, test] = generate_synthetic(cfg, dir.string());
    double acc = prototype_accuracy(train, test, [](const ClipRecord&) { return true; });
    CHECK(acc == 1.0);
    fs::remove_all(dir);
  }
  SUBCASE("separability is monotone in the intensity bins") {
    SyntheticConfig cfg;
    cfg.train_per_class = 6;
    cfg.test_per_class = 10;
    cfg.height = cfg.width = 16;
    cfg.noise_std = 0.25;  // hard enough that the low bin actually suffers
    cfg.seed = 9;
    fs::path dir = scratch_dir("synth5");
    auto [train, test] = generate_synthetic(cfg, dir.string());
    auto in_bin = [](double lo, double hi) {
      return [lo, hi](const ClipRecord& r) {
        return r.intensity && *r.intensity > lo && *r.intensity <= hi;
      };
    };
    double low = prototype_accuracy(train, test, in_bin(0.0, 0.3));
    double high = prototype_accuracy(train, test, in_bin(0.3, 1.0));
    CHECK(low <= high);
    fs::remove_all(dir);
  }
}
