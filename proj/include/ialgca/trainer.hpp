#pragma once

#include <iosfwd>
#include <optional>

#include "ialgca/data.hpp"
#include "ialgca/metrics.hpp"
#include "ialgca/model.hpp"

namespace ialgca {

struct TrainConfig {
  int epochs = 40;
  double base_lr = 0.02;
  double gamma = 0.96;  // exponential decay per epoch
  int batch = 8;
  uint64_t seed = 1;
  double lambda = 0.1;
  double aux_weight = 0.3;
  int u = 8, v = 1;  // dynamic sampling; u*v must equal the model's frame count
  bool flip = true;
  bool crop = true;
  int crop_pad = 4;
  int eval_every = 1;  // test-set metrics every N epochs; 0 disables

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(base_lr > 0)) throw ConfigError(cat("base_lr must be > 0, got ", base_lr));
    if (!(gamma > 0 && gamma <= 1)) throw ConfigError(cat("gamma must be in (0,1], got ", gamma));
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (u < 1 || v < 1) throw ConfigError("U and V must be >= 1");
    if (lambda < 0 || aux_weight < 0) throw ConfigError("loss weights must be >= 0");
    if (crop_pad < 0) throw ConfigError("crop_pad must be >= 0");
  }
};

inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  if (epoch < 0) throw ContractError(cat("epoch must be >= 0, got ", epoch));
  return cfg.base_lr * std::pow(cfg.gamma, epoch);
}

struct EpochLogRow {
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  double train_war = 0;
  std::optional<double> test_uar, test_war;
};

// CSV columns: epoch,lr,loss,train_war,test_uar,test_war (test columns empty
// on epochs without evaluation).
void write_train_log(const std::string& path, const std::vector<EpochLogRow>& log);

// Seeded SGD loop: shuffle, dynamic-sample, augment, normalize, forward,
// combined loss, backward, step. Single-threaded and bit-reproducible for a
// fixed seed. Channel mean/std of the training split are computed up front
// and stored in the model's norm.* parameters.
std::vector<EpochLogRow> train(DFERModel<float>& model, const Manifest& train_manifest,
                               const Manifest* test_manifest, const TrainConfig& cfg);

// Deterministic centred sampling, argmax with lowest-index tie-break.
// threads = 0 resolves to the IALGCA_THREADS environment cap (default 1).
EvalReport evaluate(const DFERModel<float>& model, const Manifest& manifest, int u, int v,
                    int threads = 0);

int resolve_thread_cap(int requested);

// ---- ablation matrix ----

struct AblationCell {
  std::string name = "cell";
  AttentionKind attention = AttentionKind::None;
  bool ial = false;
  bool aux = false;
  double lambda = 0.1;
  int r = 4;
};

struct AblationResult {
  AblationCell cell;
  std::vector<double> uar, war, low_war;  // one entry per seed
};

struct AblationSpec {
  std::vector<AblationCell> cells;
  int seeds = 5;
  TrainConfig train;   // per-cell lambda/aux applied on top
  ModelConfig model;   // per-cell attention/r/aux applied on top
};

std::vector<AblationResult> run_ablation(const AblationSpec& spec, const Manifest& train_mf,
                                         const Manifest& test_mf,
                                         std::ostream* progress = nullptr);

void write_ablation_csv(const std::string& path, const AblationSpec& spec,
                        const std::vector<AblationResult>& rows);

// ---- checkpoint sidecar ----
// The checkpoint itself stores only named tensors; the <ckpt>.meta sidecar
// records the architecture and sampler settings needed to rebuild the model.

void save_model_meta(const std::string& path, const ModelConfig& cfg, int u, int v);
struct ModelMeta {
  ModelConfig cfg;
  int u = 8, v = 1;
};
ModelMeta load_model_meta(const std::string& path);

}  // namespace ialgca
