#include "ialgca/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ialgca/common.hpp"

namespace fs = std::filesystem;

namespace ialgca {

namespace {

constexpr char kClipMagic[8] = {'D', 'F', 'E', 'R', 'C', 'L', 'P', '1'};
constexpr int kHeaderBytes = 8 + 4 * 4;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw IoError(cat("truncated header in '", path, "'"));
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

static_assert(sizeof(float) == 4, "float32 storage assumed");

void put_f32(std::ostream& os, const float* data, size_t count) {
  // little-endian hosts write directly
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
}

}  // namespace

void write_clip(const std::string& path, const Tensorf& frames) {
  if (frames.rank() != 4)
    throw ShapeError(cat("write_clip: expected F x C x H x W, got ",
                         shape_str(frames.shape)));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(cat("cannot open '", path, "' for writing"));
  os.write(kClipMagic, 8);
  for (int i = 0; i < 4; ++i) put_u32(os, static_cast<uint32_t>(frames.dim(i)));
  put_f32(os, frames.data.data(), static_cast<size_t>(frames.numel()));
  if (!os) throw IoError(cat("write failed for '", path, "'"));
}

std::vector<int> clip_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(cat("cannot open clip '", path, "'"));
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kClipMagic, 8) != 0)
    throw IoError(cat("bad magic in clip '", path, "'"));
  std::vector<int> dims(4);
  for (int i = 0; i < 4; ++i) dims[static_cast<size_t>(i)] = static_cast<int>(get_u32(is, path));
  return dims;
}

Tensorf load_clip(const ClipRecord& record, const std::vector<int>& indices) {
  std::ifstream is(record.path, std::ios::binary);
  if (!is) throw IoError(cat("cannot open clip '", record.path, "'"));
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kClipMagic, 8) != 0)
    throw IoError(cat("bad magic in clip '", record.path, "'"));
  int f = static_cast<int>(get_u32(is, record.path));
  int c = static_cast<int>(get_u32(is, record.path));
  int h = static_cast<int>(get_u32(is, record.path));
  int w = static_cast<int>(get_u32(is, record.path));
  for (int idx : indices)
    if (idx < 0 || idx >= f)
      throw IoError(cat("frame index ", idx, " out of range [0,", f, ") in '",
                        record.path, "'"));
  int64_t frame_elems = static_cast<int64_t>(c) * h * w;
  Tensorf out({static_cast<int>(indices.size()), c, h, w});
  for (size_t i = 0; i < indices.size(); ++i) {
    is.seekg(kHeaderBytes + static_cast<std::streamoff>(indices[i]) * frame_elems * 4);
    if (!is.read(reinterpret_cast<char*>(out.data.data() + static_cast<int64_t>(i) * frame_elems),
                 frame_elems * 4))
      throw IoError(cat("truncated clip '", record.path, "'"));
  }
  return out;
}

void save_manifest(const std::string& path, const Manifest& manifest) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(cat("cannot open '", path, "' for writing"));
  os << "path,label,num_frames,intensity\n";
  for (const auto& r : manifest.records) {
    os << r.path << "," << r.label << "," << r.num_frames << ",";
    if (r.intensity) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.6f", *r.intensity);
      os << buf;
    }
    os << "\n";
  }
  if (!os) throw IoError(cat("write failed for '", path, "'"));
}

Manifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(cat("cannot open manifest '", path, "'"));
  fs::path dir = fs::path(path).parent_path();
  std::string line;
  if (!std::getline(is, line)) throw IoError(cat("empty manifest '", path, "'"));
  if (line.ends_with("\r")) line.pop_back();
  if (line != "path,label,num_frames,intensity")
    throw IoError(cat("unexpected manifest header in '", path, "': ", line));
  Manifest m;
  int line_no = 1;
  int max_label = -1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.ends_with("\r")) line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    while (cols.size() < 4) cols.push_back("");
    if (cols.size() != 4)
      throw IoError(cat("manifest '", path, "' line ", line_no, ": expected 4 columns"));
    ClipRecord r;
    fs::path p(cols[0]);
    r.path = (p.is_absolute() ? p : dir / p).string();
    try {
      r.label = std::stoi(cols[1]);
      r.num_frames = std::stoi(cols[2]);
      if (!cols[3].empty()) r.intensity = std::stod(cols[3]);
    } catch (const std::exception&) {
      throw IoError(cat("manifest '", path, "' line ", line_no, ": bad number"));
    }
    if (r.num_frames < 1)
      throw IoError(cat("manifest '", path, "' line ", line_no, ": num_frames must be >= 1"));
    if (r.label < 0)
      throw IoError(cat("manifest '", path, "' line ", line_no, ": negative label"));
    if (!fs::exists(r.path))
      throw IoError(cat("manifest '", path, "' line ", line_no, ": missing clip '",
                        r.path, "'"));
    max_label = std::max(max_label, r.label);
    m.records.push_back(std::move(r));
  }
  m.num_classes = max_label + 1;
  return m;
}

std::vector<std::pair<int, int>> segment_bounds(int num_frames, int u) {
  if (num_frames < 1) throw ContractError(cat("num_frames must be >= 1, got ", num_frames));
  if (u < 1) throw ContractError(cat("U must be >= 1, got ", u));
  int q = num_frames / u, rem = num_frames % u;
  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<size_t>(u));
  int start = 0;
  for (int k = 0; k < u; ++k) {
    int len = q + (k < rem ? 1 : 0);
    out.emplace_back(start, len);
    start += len;
  }
  return out;
}

namespace {
// Empty segments (U > n) fall back to the nearest existing frame.
int clamp_start(int start, int num_frames) { return std::min(start, num_frames - 1); }
}  // namespace

std::vector<int> sample_train_indices(int num_frames, int u, int v, Rng& rng) {
  if (v < 1) throw ContractError(cat("V must be >= 1, got ", v));
  auto segs = segment_bounds(num_frames, u);
  std::vector<int> picked;
  picked.reserve(static_cast<size_t>(u) * v);
  std::vector<int> pool;
  for (auto [start, len] : segs) {
    if (len >= v) {
      pool.resize(static_cast<size_t>(len));
      for (int i = 0; i < len; ++i) pool[static_cast<size_t>(i)] = start + i;
      // partial Fisher-Yates: first v entries are a uniform draw w/o replacement
      for (int i = 0; i < v; ++i) {
        int j = rng.uniform_int(i, len - 1);
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        picked.push_back(pool[static_cast<size_t>(i)]);
      }
    } else if (len >= 1) {
      for (int i = 0; i < v; ++i) picked.push_back(start + rng.uniform_int(0, len - 1));
    } else {
      for (int i = 0; i < v; ++i) picked.push_back(clamp_start(start, num_frames));
    }
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

std::vector<int> sample_test_indices(int num_frames, int u, int v) {
  if (v < 1) throw ContractError(cat("V must be >= 1, got ", v));
  auto segs = segment_bounds(num_frames, u);
  std::vector<int> picked;
  picked.reserve(static_cast<size_t>(u) * v);
  for (auto [start, len] : segs) {
    if (len >= v) {
      int first = start + (len - v) / 2;
      for (int i = 0; i < v; ++i) picked.push_back(first + i);
    } else if (len >= 1) {
      int mid = start + (len - 1) / 2;
      for (int i = 0; i < v; ++i) picked.push_back(mid);
    } else {
      for (int i = 0; i < v; ++i) picked.push_back(clamp_start(start, num_frames));
    }
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

void SyntheticConfig::validate() const {
  if (num_classes < 2) throw ConfigError(cat("num_classes must be >= 2, got ", num_classes));
  if (train_per_class < 1 || test_per_class < 1)
    throw ConfigError("clips per class must be >= 1");
  if (frames_min < 1 || frames_max < frames_min)
    throw ConfigError(cat("bad frame range [", frames_min, ",", frames_max, "]"));
  if (channels < 1 || height < 1 || width < 1) throw ConfigError("bad clip dimensions");
  if (p_low < 0 || p_low > 1) throw ConfigError(cat("p_low must be in [0,1], got ", p_low));
  auto check_range = [](double lo, double hi, const char* name) {
    if (!(lo > 0 && lo < hi && hi <= 1.0))
      throw ConfigError(cat("bad ", name, " intensity range (", lo, ",", hi, "]"));
  };
  check_range(low_lo, low_hi, "low");
  check_range(high_lo, high_hi, "high");
  if (noise_std < 0) throw ConfigError("noise_std must be >= 0");
  if (base_std < 0) throw ConfigError("base_std must be >= 0");
}

namespace {

// Smooth random field: coarse grid of normals, bilinearly upsampled.
Tensorf smooth_field(int c, int h, int w, int coarse, Rng& rng) {
  Tensorf out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    std::vector<double> grid(static_cast<size_t>(coarse) * coarse);
    for (auto& g : grid) g = rng.gauss();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double gy = (coarse - 1) * static_cast<double>(y) / std::max(1, h - 1);
        double gx = (coarse - 1) * static_cast<double>(x) / std::max(1, w - 1);
        int y0 = std::min(static_cast<int>(gy), coarse - 2);
        int x0 = std::min(static_cast<int>(gx), coarse - 2);
        if (coarse == 1) { y0 = x0 = 0; }
        double fy = gy - y0, fx = gx - x0;
        int y1 = std::min(y0 + 1, coarse - 1), x1 = std::min(x0 + 1, coarse - 1);
        double v = grid[static_cast<size_t>(y0) * coarse + x0] * (1 - fy) * (1 - fx) +
                   grid[static_cast<size_t>(y1) * coarse + x0] * fy * (1 - fx) +
                   grid[static_cast<size_t>(y0) * coarse + x1] * (1 - fy) * fx +
                   grid[static_cast<size_t>(y1) * coarse + x1] * fy * fx;
        out.at(ch, y, x) = static_cast<float>(v);
      }
  }
  return out;
}

// Localised class signature: smooth field masked by a Gaussian window at a
// class-specific location, unit L2 norm.
Tensorf class_pattern(const SyntheticConfig& cfg, int k, Rng& rng) {
  Tensorf p = smooth_field(cfg.channels, cfg.height, cfg.width, 4, rng);
  double angle = 6.283185307179586477 * (k - 1) / std::max(1, cfg.num_classes - 1);
  double cy = cfg.height * (0.5 + 0.28 * std::sin(angle));
  double cx = cfg.width * (0.5 + 0.28 * std::cos(angle));
  double sigma = 0.22 * std::min(cfg.height, cfg.width);
  for (int ch = 0; ch < cfg.channels; ++ch)
    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x < cfg.width; ++x) {
        double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        p.at(ch, y, x) *= static_cast<float>(std::exp(-d2 / (2 * sigma * sigma)));
      }
  double norm = std::sqrt(static_cast<double>((p.data.cast<double>() * p.data.cast<double>()).sum()));
  if (norm < 1e-12) norm = 1.0;
  p.data /= static_cast<float>(norm);
  return p;
}

}  // namespace

SyntheticPatterns make_patterns(const SyntheticConfig& cfg, Rng& rng) {
  SyntheticPatterns pats;
  pats.base = smooth_field(cfg.channels, cfg.height, cfg.width, 4, rng);
  // keep the shared neutral field small: a large common-mode component would
  // dominate every clip and drown the class signal under plain SGD
  double rms = std::sqrt(pats.base.data.cast<double>().square().mean());
  pats.base.data *= static_cast<float>(cfg.base_std / std::max(rms, 1e-9));
  for (int k = 1; k < cfg.num_classes; ++k) {
    Tensorf cand = class_pattern(cfg, k, rng);
    // redraw on near-collinearity so the classes stay mutually distinct
    for (int tries = 0; tries < 100; ++tries) {
      bool ok = true;
      for (const auto& other : pats.classes) {
        double dot = (cand.data.cast<double>() * other.data.cast<double>()).sum();
        if (std::abs(dot) > 0.95) { ok = false; break; }
      }
      if (ok) break;
      cand = class_pattern(cfg, k, rng);
    }
    pats.classes.push_back(std::move(cand));
  }
  return pats;
}

double modulation_at(int t, int num_frames, bool cosine) {
  if (!cosine || num_frames <= 1) return 1.0;
  double uu = static_cast<double>(t) / (num_frames - 1);
  return 0.5 + 0.25 * (1.0 - std::cos(6.283185307179586477 * uu));
}

Tensorf make_clip_frames(const Tensorf& base, const Tensorf* pattern, double intensity,
                         int num_frames, bool cosine, double noise_std, Rng& rng) {
  int c = base.dim(0), h = base.dim(1), w = base.dim(2);
  Tensorf clip({num_frames, c, h, w});
  int64_t plane = base.numel();
  for (int t = 0; t < num_frames; ++t) {
    double m = modulation_at(t, num_frames, cosine);
    for (int64_t i = 0; i < plane; ++i) {
      double v = base.data[i];
      if (pattern) v += intensity * m * pattern->data[i];
      if (noise_std > 0) v += noise_std * rng.gauss();
      clip.data[static_cast<int64_t>(t) * plane + i] = static_cast<float>(v);
    }
  }
  return clip;
}

std::pair<Manifest, Manifest> generate_synthetic(const SyntheticConfig& cfg,
                                                 const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(fs::path(out_dir) / "clips");
  Rng root(cfg.seed);
  SyntheticPatterns pats = make_patterns(cfg, root);

  auto build_split = [&](const std::string& split, int per_class, uint64_t salt) {
    Rng rng = root.fork(salt);
    Manifest m;
    m.num_classes = cfg.num_classes;
    m.split = split;
    for (int k = 0; k < cfg.num_classes; ++k)
      for (int i = 0; i < per_class; ++i) {
        int frames = rng.uniform_int(cfg.frames_min, cfg.frames_max);
        double alpha = 0.0;
        const Tensorf* pat = nullptr;
        if (k != 0) {
          pat = &pats.classes[static_cast<size_t>(k - 1)];
          alpha = rng.uniform() < cfg.p_low ? rng.uniform(cfg.low_lo, cfg.low_hi)
                                            : rng.uniform(cfg.high_lo, cfg.high_hi);
        }
        Tensorf clip =
            make_clip_frames(pats.base, pat, alpha, frames, cfg.cosine_modulation,
                             cfg.noise_std, rng);
        std::string rel = cat("clips/", split, "_", k, "_", i, ".clip");
        write_clip((fs::path(out_dir) / rel).string(), clip);
        ClipRecord rec;
        rec.path = rel;  // relative; resolved by load_manifest
        rec.label = k;
        rec.intensity = alpha;
        rec.num_frames = frames;
        m.records.push_back(std::move(rec));
      }
    return m;
  };

  Manifest train = build_split("train", cfg.train_per_class, 1);
  Manifest test = build_split("test", cfg.test_per_class, 2);
  save_manifest((fs::path(out_dir) / "train.csv").string(), train);
  save_manifest((fs::path(out_dir) / "test.csv").string(), test);
  // return manifests with resolved paths
  return {load_manifest((fs::path(out_dir) / "train.csv").string()),
          load_manifest((fs::path(out_dir) / "test.csv").string())};
}

}  // namespace ialgca
