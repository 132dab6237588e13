#include "ialgca/trainer.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

namespace ialgca {

namespace {

int argmax_row(const float* row, int k) {
  int best = 0;
  for (int j = 1; j < k; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

Tensorf flip_horizontal(const Tensorf& clip) {
  Tensorf out(clip.shape);
  int t = clip.dim(0), c = clip.dim(1), h = clip.dim(2), w = clip.dim(3);
  for (int a = 0; a < t; ++a)
    for (int b = 0; b < c; ++b)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(a, b, y, x) = clip.at(a, b, y, w - 1 - x);
  return out;
}

// Zero-pad by `pad` on every side, then crop back to H x W at (dy, dx).
Tensorf pad_crop(const Tensorf& clip, int pad, int dy, int dx) {
  Tensorf out(clip.shape);
  int t = clip.dim(0), c = clip.dim(1), h = clip.dim(2), w = clip.dim(3);
  for (int a = 0; a < t; ++a)
    for (int b = 0; b < c; ++b)
      for (int y = 0; y < h; ++y) {
        int sy = y + dy - pad;
        if (sy < 0 || sy >= h) continue;  // stays zero
        for (int x = 0; x < w; ++x) {
          int sx = x + dx - pad;
          if (sx < 0 || sx >= w) continue;
          out.at(a, b, y, x) = clip.at(a, b, sy, sx);
        }
      }
  return out;
}

void normalize_clip(Tensorf& clip, const Tensorf& mean, const Tensorf& std) {
  int t = clip.dim(0), c = clip.dim(1);
  int64_t plane = static_cast<int64_t>(clip.dim(2)) * clip.dim(3);
  for (int a = 0; a < t; ++a)
    for (int b = 0; b < c; ++b) {
      auto seg = clip.data.segment((static_cast<int64_t>(a) * c + b) * plane, plane);
      seg = (seg - mean.data[b]) / std.data[b];
    }
}

// Channel statistics over every frame of the training split.
void compute_normalization(DFERModel<float>& model, const Manifest& manifest) {
  int c = model.cfg.in_channels;
  std::vector<double> sum(static_cast<size_t>(c), 0.0), sumsq(static_cast<size_t>(c), 0.0);
  std::vector<int64_t> count(static_cast<size_t>(c), 0);
  for (const auto& rec : manifest.records) {
    std::vector<int> all(static_cast<size_t>(rec.num_frames));
    std::iota(all.begin(), all.end(), 0);
    Tensorf clip = load_clip(rec, all);
    if (clip.dim(1) != c)
      throw IoError(cat("clip '", rec.path, "' has ", clip.dim(1), " channels, expected ", c));
    int64_t plane = static_cast<int64_t>(clip.dim(2)) * clip.dim(3);
    for (int t = 0; t < clip.dim(0); ++t)
      for (int b = 0; b < c; ++b) {
        auto seg = clip.data.segment((static_cast<int64_t>(t) * c + b) * plane, plane);
        sum[static_cast<size_t>(b)] += seg.cast<double>().sum();
        sumsq[static_cast<size_t>(b)] += seg.cast<double>().square().sum();
        count[static_cast<size_t>(b)] += plane;
      }
  }
  Tensorf mean({c}), stddev({c});
  for (int b = 0; b < c; ++b) {
    double m = sum[static_cast<size_t>(b)] / static_cast<double>(count[static_cast<size_t>(b)]);
    double var = sumsq[static_cast<size_t>(b)] / static_cast<double>(count[static_cast<size_t>(b)]) - m * m;
    mean.data[b] = static_cast<float>(m);
    stddev.data[b] = static_cast<float>(std::sqrt(std::max(var, 1e-12)));
    if (stddev.data[b] < 1e-6f) stddev.data[b] = 1e-6f;
  }
  model.params.find("norm.mean")->value = std::move(mean);
  model.params.find("norm.std")->value = std::move(stddev);
}

Tensorf prepare_train_clip(const ClipRecord& rec, const TrainConfig& cfg,
                           const Tensorf& mean, const Tensorf& std, Rng& rng) {
  std::vector<int> idx = sample_train_indices(rec.num_frames, cfg.u, cfg.v, rng);
  Tensorf clip = load_clip(rec, idx);
  if (cfg.flip && rng.uniform() < 0.5) clip = flip_horizontal(clip);
  if (cfg.crop && cfg.crop_pad > 0) {
    int dy = rng.uniform_int(0, 2 * cfg.crop_pad);
    int dx = rng.uniform_int(0, 2 * cfg.crop_pad);
    clip = pad_crop(clip, cfg.crop_pad, dy, dx);
  }
  normalize_clip(clip, mean, std);
  return clip;
}

}  // namespace

int resolve_thread_cap(int requested) {
  int cap = 0;
  if (const char* env = std::getenv("IALGCA_THREADS")) {
    cap = std::atoi(env);
    if (cap < 1) cap = 1;
  }
  if (requested < 1) return cap > 0 ? cap : 1;
  return cap > 0 ? std::min(requested, cap) : requested;
}

std::vector<EpochLogRow> train(DFERModel<float>& model, const Manifest& train_manifest,
                               const Manifest* test_manifest, const TrainConfig& cfg) {
  cfg.validate();
  model.cfg.validate();
  if (train_manifest.records.empty()) throw ContractError("train: empty manifest");
  if (model.cfg.frames != cfg.u * cfg.v)
    throw ConfigError(cat("model expects ", model.cfg.frames, " frames but U*V = ",
                          cfg.u * cfg.v));
  for (const auto& r : train_manifest.records)
    if (r.label >= model.cfg.num_classes)
      throw ContractError(cat("label ", r.label, " out of range for K=", model.cfg.num_classes));

  compute_normalization(model, train_manifest);
  const Tensorf mean = model.params.find("norm.mean")->value;
  const Tensorf stddev = model.params.find("norm.std")->value;

  LossConfig lcfg;
  lcfg.lambda = cfg.lambda;
  lcfg.aux_weight = model.cfg.aux ? cfg.aux_weight : 0.0;

  Rng rng(cfg.seed);
  std::vector<int> order(train_manifest.records.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochLogRow> log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = lr_at_epoch(cfg, epoch);
    rng.shuffle(order);
    double loss_sum = 0.0;
    int64_t correct = 0, seen = 0;
    int num_batches = (static_cast<int>(order.size()) + cfg.batch - 1) / cfg.batch;
    for (int b = 0; b < num_batches; ++b) {
      int lo = b * cfg.batch;
      int hi = std::min<int>(lo + cfg.batch, static_cast<int>(order.size()));
      try {
        Tape<float> tape;
        BoundModel<float> bm = bind_model(tape, model);
        std::vector<Val<float>> clips;
        std::vector<int> targets;
        for (int i = lo; i < hi; ++i) {
          const auto& rec = train_manifest.records[static_cast<size_t>(order[static_cast<size_t>(i)])];
          clips.push_back(constant(tape, prepare_train_clip(rec, cfg, mean, stddev, rng)));
          targets.push_back(rec.label);
        }
        BatchForward<float> out = classify_batch_graph(bm, clips);
        Val<float> loss = combined_loss(out.logits, out.aux, targets, lcfg);
        double lv = static_cast<double>(loss.t().data[0]);
        if (!std::isfinite(lv))
          throw NumericError(cat("non-finite loss ", lv));
        auto grads = tape.backward(loss.id);
        sgd_step(model.params, grads, lr);
        const Tensorf& lg = out.logits.t();
        for (int i = lo; i < hi; ++i) {
          int row = i - lo;
          if (argmax_row(lg.data.data() + static_cast<int64_t>(row) * lg.dim(1), lg.dim(1)) ==
              targets[static_cast<size_t>(row)])
            ++correct;
        }
        loss_sum += lv * (hi - lo);
        seen += hi - lo;
      } catch (const NumericError& e) {
        throw NumericError(cat("epoch ", epoch, " batch ", b, " (seed ", cfg.seed,
                               "): ", e.message()));
      }
    }
    EpochLogRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.loss = loss_sum / static_cast<double>(seen);
    row.train_war = static_cast<double>(correct) / static_cast<double>(seen);
    if (test_manifest && cfg.eval_every > 0 &&
        ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)) {
      EvalReport rep = evaluate(model, *test_manifest, cfg.u, cfg.v);
      row.test_uar = rep.uar;
      row.test_war = rep.war;
    }
    log.push_back(row);
  }
  return log;
}

EvalReport evaluate(const DFERModel<float>& model, const Manifest& manifest, int u, int v,
                    int threads) {
  if (manifest.records.empty()) throw ContractError("evaluate: empty manifest");
  if (model.cfg.frames != u * v)
    throw ConfigError(cat("model expects ", model.cfg.frames, " frames but U*V = ", u * v));
  const Tensorf& mean = model.params.find("norm.mean")->value;
  const Tensorf& stddev = model.params.find("norm.std")->value;

  size_t n = manifest.records.size();
  std::vector<PredRecord> preds(n);
  auto work = [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      const auto& rec = manifest.records[i];
      std::vector<int> idx = sample_test_indices(rec.num_frames, u, v);
      Tensorf clip = load_clip(rec, idx);
      normalize_clip(clip, mean, stddev);
      auto [logits, aux] = classify(model, clip);
      (void)aux;
      preds[i] = {rec.label, argmax_row(logits.data.data(), logits.dim(0)), rec.intensity};
    }
  };
  int workers = resolve_thread_cap(threads);
  if (workers <= 1 || n < 2) {
    work(0, n);
  } else {
    workers = std::min<int>(workers, static_cast<int>(n));
    std::vector<std::thread> pool;
    size_t chunk = (n + static_cast<size_t>(workers) - 1) / static_cast<size_t>(workers);
    for (int t = 0; t < workers; ++t) {
      size_t lo = static_cast<size_t>(t) * chunk;
      size_t hi = std::min(n, lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back(work, lo, hi);
    }
    for (auto& th : pool) th.join();
  }
  return make_report(model.cfg.num_classes, preds);
}

void write_train_log(const std::string& path, const std::vector<EpochLogRow>& log) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(cat("cannot open '", path, "' for writing"));
  os << "epoch,lr,loss,train_war,test_uar,test_war\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.8f,%.6f,%.6f", r.epoch, r.lr, r.loss, r.train_war);
    os << buf << ",";
    if (r.test_uar) {
      std::snprintf(buf, sizeof(buf), "%.6f", *r.test_uar);
      os << buf;
    }
    os << ",";
    if (r.test_war) {
      std::snprintf(buf, sizeof(buf), "%.6f", *r.test_war);
      os << buf;
    }
    os << "\n";
  }
  if (!os) throw IoError(cat("write failed for '", path, "'"));
}

std::vector<AblationResult> run_ablation(const AblationSpec& spec, const Manifest& train_mf,
                                         const Manifest& test_mf, std::ostream* progress) {
  if (spec.cells.empty()) throw ContractError("ablation: no cells");
  if (spec.seeds < 1) throw ContractError("ablation: seeds must be >= 1");
  std::vector<AblationResult> results;
  for (const auto& cell : spec.cells) {
    AblationResult res;
    res.cell = cell;
    for (int s = 0; s < spec.seeds; ++s) {
      uint64_t seed = spec.train.seed + static_cast<uint64_t>(s);
      ModelConfig mc = spec.model;
      mc.attention = cell.attention;
      mc.r = cell.r;
      mc.aux = cell.aux && cell.attention != AttentionKind::None;
      TrainConfig tc = spec.train;
      tc.seed = seed;
      tc.lambda = cell.ial ? cell.lambda : 0.0;
      tc.eval_every = 0;
      DFERModel<float> model = DFERModel<float>::init(mc, seed);
      train(model, train_mf, nullptr, tc);
      EvalReport rep = evaluate(model, test_mf, tc.u, tc.v);
      res.uar.push_back(rep.uar);
      res.war.push_back(rep.war);
      res.low_war.push_back(rep.low_bin.valid ? rep.low_bin.war : 0.0);
      if (progress)
        (*progress) << cell.name << " seed " << seed << ": UAR " << rep.uar << " WAR "
                    << rep.war << " lowWAR "
                    << (rep.low_bin.valid ? rep.low_bin.war : 0.0) << "\n"
                    << std::flush;
    }
    results.push_back(std::move(res));
  }
  return results;
}

namespace {
std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double m = 0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0;
  for (double x : xs) v += (x - m) * (x - m);
  return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}
}  // namespace

void write_ablation_csv(const std::string& path, const AblationSpec& spec,
                        const std::vector<AblationResult>& rows) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(cat("cannot open '", path, "' for writing"));
  os << "cell,attention,ial,aux,lambda,r,seeds,uar_mean,uar_std,war_mean,war_std,"
        "low_war_mean,low_war_std,seed_list\n";
  char buf[256];
  for (const auto& r : rows) {
    auto [um, us] = mean_std(r.uar);
    auto [wm, ws] = mean_std(r.war);
    auto [lm, ls] = mean_std(r.low_war);
    std::snprintf(buf, sizeof(buf), "%s,%s,%d,%d,%.4f,%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,",
                  r.cell.name.c_str(), to_string(r.cell.attention), r.cell.ial ? 1 : 0,
                  r.cell.aux ? 1 : 0, r.cell.lambda, r.cell.r, spec.seeds, um, us, wm, ws,
                  lm, ls);
    os << buf;
    for (int s = 0; s < spec.seeds; ++s) {
      if (s) os << ";";
      os << spec.train.seed + static_cast<uint64_t>(s);
    }
    os << "\n";
  }
  if (!os) throw IoError(cat("write failed for '", path, "'"));
}

void save_model_meta(const std::string& path, const ModelConfig& cfg, int u, int v) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(cat("cannot open '", path, "' for writing"));
  os << "classes = " << cfg.num_classes << "\n";
  os << "frames = " << cfg.frames << "\n";
  os << "in_channels = " << cfg.in_channels << "\n";
  os << "in_h = " << cfg.in_h << "\n";
  os << "in_w = " << cfg.in_w << "\n";
  os << "widths = ";
  for (size_t i = 0; i < cfg.widths.size(); ++i) os << (i ? "," : "") << cfg.widths[i];
  os << "\n";
  os << "attention = " << to_string(cfg.attention) << "\n";
  os << "r = " << cfg.r << "\n";
  os << "heads = " << cfg.heads << "\n";
  os << "layers = " << cfg.layers << "\n";
  os << "token_dim = " << cfg.token_dim << "\n";
  os << "mlp_dim = " << cfg.mlp_dim << "\n";
  os << "aux = " << (cfg.aux ? "on" : "off") << "\n";
  os << "fusion = " << to_string(cfg.fusion) << "\n";
  os << "pos_embed = " << (cfg.pos_embed ? "on" : "off") << "\n";
  os << "u = " << u << "\n";
  os << "v = " << v << "\n";
  if (!os) throw IoError(cat("write failed for '", path, "'"));
}

ModelMeta load_model_meta(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(cat("cannot open model meta '", path, "'"));
  ModelMeta meta;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.ends_with("\r")) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(cat("meta '", path, "' line ", line_no, ": expected key = value"));
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t");
      size_t b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    auto on = [&] { return value == "on" || value == "true" || value == "1"; };
    if (key == "classes") meta.cfg.num_classes = std::stoi(value);
    else if (key == "frames") meta.cfg.frames = std::stoi(value);
    else if (key == "in_channels") meta.cfg.in_channels = std::stoi(value);
    else if (key == "in_h") meta.cfg.in_h = std::stoi(value);
    else if (key == "in_w") meta.cfg.in_w = std::stoi(value);
    else if (key == "widths") {
      meta.cfg.widths.clear();
      std::stringstream ss(value);
      std::string tok;
      while (std::getline(ss, tok, ',')) meta.cfg.widths.push_back(std::stoi(tok));
    } else if (key == "attention") meta.cfg.attention = attention_from_string(value);
    else if (key == "r") meta.cfg.r = std::stoi(value);
    else if (key == "heads") meta.cfg.heads = std::stoi(value);
    else if (key == "layers") meta.cfg.layers = std::stoi(value);
    else if (key == "token_dim") meta.cfg.token_dim = std::stoi(value);
    else if (key == "mlp_dim") meta.cfg.mlp_dim = std::stoi(value);
    else if (key == "aux") meta.cfg.aux = on();
    else if (key == "fusion") meta.cfg.fusion = fusion_from_string(value);
    else if (key == "pos_embed") meta.cfg.pos_embed = on();
    else if (key == "u") meta.u = std::stoi(value);
    else if (key == "v") meta.v = std::stoi(value);
    else
      throw ConfigError(cat("meta '", path, "' line ", line_no, ": unknown key '", key, "'"));
  }
  return meta;
}

}  // namespace ialgca
