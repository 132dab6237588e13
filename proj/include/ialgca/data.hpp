#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ialgca/rng.hpp"
#include "ialgca/tensor.hpp"

namespace ialgca {

struct ClipRecord {
  std::string path;
  int label = 0;
  std::optional<double> intensity;  // 0 marks a neutral clip, empty = unknown
  int num_frames = 0;
};

struct Manifest {
  std::vector<ClipRecord> records;
  int num_classes = 0;
  std::string split;  // "train" or "test"
};

// ---- clip files ----
// Layout: magic "DFERCLP1", then u32le num_frames, C, H, W, then float32le
// values frame-major (frame, channel, row, column). Frames are seekable.

void write_clip(const std::string& path, const Tensorf& frames);
std::vector<int> clip_header(const std::string& path);  // {F, C, H, W}

// Reads only the selected frames; validates every index before touching the
// stream, so a bad index never yields a partial tensor.
Tensorf load_clip(const ClipRecord& record, const std::vector<int>& indices);

// ---- manifests ----
// UTF-8 CSV, header `path,label,num_frames,intensity`; intensity column is
// empty when unknown. Paths are stored relative to the CSV's directory and
// resolved (and checked for existence) at load time.

void save_manifest(const std::string& path, const Manifest& manifest);
Manifest load_manifest(const std::string& path);

// ---- dynamic sampling ----

// Contiguous partition of [0,n) into U segments, earlier segments taking the
// remainder. Returns (start, length) pairs.
std::vector<std::pair<int, int>> segment_bounds(int num_frames, int u);

// Training: V random frames per segment, without replacement when the
// segment is long enough, with replacement otherwise. Sorted, length U*V.
std::vector<int> sample_train_indices(int num_frames, int u, int v, Rng& rng);

// Testing: the V frames centred in each segment (window start
// floor((L-V)/2)); short segments repeat their middle frame. Deterministic.
std::vector<int> sample_test_indices(int num_frames, int u, int v);

// ---- synthetic intensity-graded dataset ----
// Every non-neutral clip is base + intensity * m(t) * pattern[class] + noise,
// so expression clips converge to the neutral class as intensity -> 0.
// Intensities come from a low/high two-range mixture for stratified
// evaluation; m(t) is a raised-cosine onset-apex-offset profile in [0.5, 1].

struct SyntheticConfig {
  int num_classes = 7;
  int train_per_class = 8;
  int test_per_class = 12;
  int frames_min = 16, frames_max = 24;
  int channels = 3, height = 32, width = 32;
  double p_low = 0.5;
  double low_lo = 0.05, low_hi = 0.3;
  double high_lo = 0.6, high_hi = 1.0;
  double noise_std = 0.06;
  double base_std = 0.05;  // per-pixel RMS of the shared neutral pattern
  bool cosine_modulation = true;
  uint64_t seed = 7;

  void validate() const;
};

struct SyntheticPatterns {
  Tensorf base;                  // C x H x W neutral pattern
  std::vector<Tensorf> classes;  // K-1 unit-norm class patterns
};

SyntheticPatterns make_patterns(const SyntheticConfig& cfg, Rng& rng);

double modulation_at(int t, int num_frames, bool cosine);

// One clip's frames for a given class pattern (pass nullptr for neutral).
Tensorf make_clip_frames(const Tensorf& base, const Tensorf* pattern, double intensity,
                         int num_frames, bool cosine, double noise_std, Rng& rng);

// Writes clips and manifests under out_dir (clips/ plus train.csv, test.csv).
std::pair<Manifest, Manifest> generate_synthetic(const SyntheticConfig& cfg,
                                                 const std::string& out_dir);

}  // namespace ialgca
