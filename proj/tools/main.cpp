// Command-line front end: dataset synthesis, training, evaluation, gradient
// checking, the ablation matrix and checkpoint inspection.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <functional>
#include <iostream>

#include "ialgca/checkpoint.hpp"
#include "ialgca/cli_config.hpp"
#include "ialgca/data.hpp"
#include "ialgca/gradcheck_suite.hpp"
#include "ialgca/trainer.hpp"

namespace fs = std::filesystem;
using namespace ialgca;

namespace {

// Config-file support: `--config FILE` provides defaults for any long flag;
// values given explicitly on the command line win.
struct ConfigurableApp {
  CLI::App* cmd = nullptr;
  std::string config_path;
  std::map<std::string, std::function<void(const std::string&)>> setters;

  void attach(CLI::App* app) {
    cmd = app;
    app->add_option("--config", config_path,
                    "key = value file with defaults for any long flag");
  }

  template <class T>
  CLI::Option* opt(const std::string& flag, T& var, const std::string& desc) {
    CLI::Option* o = cmd->add_option(flag, var, desc);
    o->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string key = flag.substr(2);
    setters[key] = [&var](const std::string& s) {
      if constexpr (std::is_same_v<T, int>) var = std::stoi(s);
      else if constexpr (std::is_same_v<T, uint64_t>) var = std::stoull(s);
      else if constexpr (std::is_same_v<T, double>) var = std::stod(s);
      else var = s;
    };
    return o;
  }

  CLI::Option* flag_bool(const std::string& flag, bool& var, const std::string& desc) {
    CLI::Option* o = cmd->add_flag(flag, var, desc);
    std::string key = flag.substr(2);
    setters[key] = [&var, key](const std::string& s) { var = parse_bool(s, key); };
    return o;
  }

  // Call after parsing: applies config-file values under explicit flags.
  void merge() {
    if (config_path.empty()) return;
    std::set<std::string> allowed;
    for (const auto& [k, _] : setters) allowed.insert(k);
    auto kv = read_config_file(config_path, allowed);
    for (const auto& [key, value] : kv) {
      CLI::Option* o = cmd->get_option("--" + key);
      if (o->count() > 0) continue;  // explicit flag wins
      setters.at(key)(value);
    }
  }
};

ModelConfig model_config_from_data(const Manifest& train, int u, int v,
                                   const std::string& widths_str) {
  ModelConfig cfg;
  cfg.num_classes = train.num_classes;
  if (!widths_str.empty()) {
    cfg.widths.clear();
    std::stringstream ss(widths_str);
    std::string tok;
    while (std::getline(ss, tok, ',')) cfg.widths.push_back(std::stoi(tok));
  }
  if (train.records.empty()) throw ContractError("empty training manifest");
  auto dims = clip_header(train.records.front().path);
  cfg.in_channels = dims[1];
  cfg.in_h = dims[2];
  cfg.in_w = dims[3];
  cfg.frames = u * v;
  return cfg;
}

nlohmann::json report_to_json(const EvalReport& rep) {
  nlohmann::json j;
  j["samples"] = rep.confusion.total();
  j["uar"] = rep.uar;
  j["war"] = rep.war;
  j["recalls"] = nlohmann::json::array();
  for (double r : rep.recalls)
    j["recalls"].push_back(std::isnan(r) ? nlohmann::json(nullptr) : nlohmann::json(r));
  j["confusion"] = nlohmann::json::array();
  int k = rep.confusion.num_classes();
  for (int t = 0; t < k; ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (int p = 0; p < k; ++p) row.push_back(rep.confusion.at(t, p));
    j["confusion"].push_back(row);
  }
  auto bin = [](const IntensityBin& b) {
    nlohmann::json jb;
    jb["valid"] = b.valid;
    jb["war"] = b.war;
    jb["count"] = b.count;
    return jb;
  };
  j["low_intensity"] = bin(rep.low_bin);
  j["high_intensity"] = bin(rep.high_bin);
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"intensity-aware dynamic expression recognition toolkit"};
  app.name("ialgca");
  app.set_help_all_flag("--help-all", "expanded help for every subcommand and flag");
  app.require_subcommand(1);

  // ---- synth ----
  ConfigurableApp synth;
  synth.attach(app.add_subcommand("synth", "generate the synthetic intensity-graded dataset"));
  std::string synth_out;
  SyntheticConfig scfg;
  uint64_t synth_seed = scfg.seed;
  synth.cmd->add_option("--out", synth_out, "output directory")->required();
  synth.opt("--seed", synth_seed, "generator seed");
  synth.opt("--classes", scfg.num_classes, "number of classes incl. neutral class 0");
  synth.opt("--train-per-class", scfg.train_per_class, "training clips per class");
  synth.opt("--test-per-class", scfg.test_per_class, "test clips per class");
  synth.opt("--frames-min", scfg.frames_min, "minimum frames per clip");
  synth.opt("--frames-max", scfg.frames_max, "maximum frames per clip");
  synth.opt("--channels", scfg.channels, "clip channels");
  synth.opt("--height", scfg.height, "clip height");
  synth.opt("--width", scfg.width, "clip width");
  synth.opt("--p-low", scfg.p_low, "fraction of low-intensity clips");
  synth.opt("--noise", scfg.noise_std, "per-pixel Gaussian noise std");
  synth.opt("--base-std", scfg.base_std, "per-pixel RMS of the neutral base pattern");
  synth.opt("--low-lo", scfg.low_lo, "low intensity range lower bound");
  synth.opt("--low-hi", scfg.low_hi, "low intensity range upper bound");
  synth.opt("--high-lo", scfg.high_lo, "high intensity range lower bound");
  synth.opt("--high-hi", scfg.high_hi, "high intensity range upper bound");
  bool flat_mod = false;
  synth.flag_bool("--flat-modulation", flat_mod,
                  "constant temporal profile instead of the raised-cosine bump");

  // ---- train ----
  ConfigurableApp train_cmd;
  train_cmd.attach(app.add_subcommand("train", "train a model and write checkpoint + log"));
  std::string train_data, train_out, train_log, attention_str = "gca",
                                                fusion_str = "frame-diff", widths_str;
  TrainConfig tcfg;
  int model_r = 4, heads = 4, layers = 2, token_dim = 64, mlp_dim = 128;
  std::string aux_str = "on";
  bool no_flip = false, no_crop = false, no_pos = false;
  train_cmd.cmd->add_option("--data", train_data, "dataset directory (train.csv/test.csv)")
      ->required();
  train_cmd.cmd->add_option("--out", train_out, "checkpoint output path")->required();
  train_cmd.opt("--attention", attention_str, "attention kind: none|se|cbam|gca");
  train_cmd.opt("--lambda", tcfg.lambda, "intensity-aware loss coefficient");
  train_cmd.opt("--aux", aux_str, "auxiliary classifiers: on|off");
  train_cmd.opt("--aux-weight", tcfg.aux_weight, "auxiliary cross-entropy weight");
  train_cmd.opt("--epochs", tcfg.epochs, "training epochs");
  train_cmd.opt("--lr", tcfg.base_lr, "initial learning rate");
  train_cmd.opt("--gamma", tcfg.gamma, "exponential lr decay per epoch");
  train_cmd.opt("--batch", tcfg.batch, "batch size");
  train_cmd.opt("--seed", tcfg.seed, "training + init seed");
  train_cmd.opt("--u", tcfg.u, "sampler segments");
  train_cmd.opt("--v", tcfg.v, "frames per segment");
  train_cmd.opt("--r", model_r, "attention reduction ratio");
  train_cmd.opt("--fusion", fusion_str, "frame fusion: identity|frame-diff");
  train_cmd.opt("--widths", widths_str, "stage widths, e.g. 8,16,32");
  train_cmd.opt("--heads", heads, "transformer heads");
  train_cmd.opt("--layers", layers, "transformer encoder layers");
  train_cmd.opt("--token-dim", token_dim, "transformer token dimension");
  train_cmd.opt("--mlp-dim", mlp_dim, "transformer MLP hidden dimension");
  train_cmd.opt("--eval-every", tcfg.eval_every, "test-set evaluation cadence (0 = never)");
  train_cmd.opt("--log", train_log, "training log CSV path (default <out>.log.csv)");
  train_cmd.flag_bool("--no-flip", no_flip, "disable horizontal flip augmentation");
  train_cmd.flag_bool("--no-crop", no_crop, "disable pad-and-crop augmentation");
  train_cmd.flag_bool("--no-pos-embed", no_pos, "disable the learned positional embedding");

  // ---- eval ----
  ConfigurableApp eval_cmd;
  eval_cmd.attach(app.add_subcommand("eval", "evaluate a checkpoint on a dataset"));
  std::string eval_ckpt, eval_data, eval_split = "test";
  int eval_threads = 0;
  bool eval_json = false;
  eval_cmd.cmd->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  eval_cmd.cmd->add_option("--data", eval_data, "dataset directory")->required();
  eval_cmd.opt("--split", eval_split, "manifest to evaluate: test|train");
  eval_cmd.opt("--threads", eval_threads, "worker threads (capped by IALGCA_THREADS)");
  eval_cmd.cmd->add_flag("--json", eval_json, "emit the report as JSON");

  // ---- gradcheck ----
  auto* gc_cmd = app.add_subcommand("gradcheck", "run the finite-difference gradient suite");
  std::string gc_module = "all";
  gc_cmd->add_option("--module", gc_module, "suite: all|tensor|attention|losses|model");

  // ---- ablate ----
  ConfigurableApp ablate_cmd;
  ablate_cmd.attach(app.add_subcommand("ablate", "train the ablation matrix and emit CSV"));
  std::string ablate_spec, ablate_data, ablate_out = "ablation.csv";
  int ablate_seeds = 0;
  ablate_cmd.cmd->add_option("--spec", ablate_spec, "ablation matrix spec file")->required();
  ablate_cmd.opt("--data", ablate_data,
                 "dataset directory (generated fresh when omitted)");
  ablate_cmd.opt("--out", ablate_out, "output CSV path");
  ablate_cmd.opt("--seeds", ablate_seeds, "seeds per cell (overrides the spec file)");

  // ---- inspect ----
  auto* inspect_cmd = app.add_subcommand("inspect", "list checkpoint parameters and shapes");
  std::string inspect_ckpt;
  inspect_cmd->add_option("--ckpt", inspect_ckpt, "checkpoint path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth.cmd->parsed()) {
      synth.merge();
      scfg.seed = synth_seed;
      scfg.cosine_modulation = !flat_mod;
      auto [train_mf, test_mf] = generate_synthetic(scfg, synth_out);
      std::cout << "wrote " << train_mf.records.size() << " train and "
                << test_mf.records.size() << " test clips under " << synth_out << "\n";
      return 0;
    }

    if (train_cmd.cmd->parsed()) {
      train_cmd.merge();
      tcfg.flip = !no_flip;
      tcfg.crop = !no_crop;
      Manifest train_mf = load_manifest((fs::path(train_data) / "train.csv").string());
      Manifest test_mf = load_manifest((fs::path(train_data) / "test.csv").string());
      ModelConfig mcfg = model_config_from_data(train_mf, tcfg.u, tcfg.v, widths_str);
      mcfg.attention = attention_from_string(attention_str);
      mcfg.fusion = fusion_from_string(fusion_str);
      mcfg.aux = parse_bool(aux_str, "aux");
      mcfg.r = model_r;
      mcfg.heads = heads;
      mcfg.layers = layers;
      mcfg.token_dim = token_dim;
      mcfg.mlp_dim = mlp_dim;
      mcfg.pos_embed = !no_pos;
      DFERModel<float> model = DFERModel<float>::init(mcfg, tcfg.seed);
      auto t0 = std::chrono::steady_clock::now();
      auto log = train(model, train_mf, &test_mf, tcfg);
      auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      save_checkpoint(train_out, model.params);
      save_model_meta(train_out + ".meta", mcfg, tcfg.u, tcfg.v);
      if (train_log.empty()) train_log = train_out + ".log.csv";
      write_train_log(train_log, log);
      std::cout << "trained " << tcfg.epochs << " epochs in " << static_cast<int>(secs)
                << "s; checkpoint " << train_out << ", log " << train_log << "\n";
      if (!log.empty() && log.back().test_war)
        std::cout << "final test UAR " << *log.back().test_uar << " WAR "
                  << *log.back().test_war << "\n";
      return 0;
    }

    if (eval_cmd.cmd->parsed()) {
      eval_cmd.merge();
      if (eval_split != "test" && eval_split != "train")
        throw ConfigError(cat("bad --split '", eval_split, "' (test|train)"));
      ModelMeta meta = load_model_meta(eval_ckpt + ".meta");
      DFERModel<float> model = DFERModel<float>::init(meta.cfg, 0);
      load_checkpoint_into(eval_ckpt, model.params);
      Manifest mf =
          load_manifest((fs::path(eval_data) / (eval_split + ".csv")).string());
      EvalReport rep = evaluate(model, mf, meta.u, meta.v, eval_threads);
      if (eval_json)
        std::cout << report_to_json(rep).dump(2) << "\n";
      else
        std::cout << rep.to_text();
      return 0;
    }

    if (gc_cmd->parsed()) {
      std::vector<SuiteResult> results;
      if (gc_module == "all") results = gradcheck_all();
      else if (gc_module == "tensor") results = gradcheck_primitives();
      else if (gc_module == "attention") results = gradcheck_blocks();
      else if (gc_module == "losses") results = gradcheck_losses();
      else if (gc_module == "model") results = gradcheck_model();
      else throw ConfigError(cat("unknown module '", gc_module,
                                 "' (all|tensor|attention|losses|model)"));
      bool all_pass = true;
      for (const auto& r : results) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-36s max_rel %.3e  tol %.0e  %s", r.name.c_str(),
                      r.max_rel, r.tol, r.pass() ? "PASS" : "FAIL");
        std::cout << buf << "\n";
        all_pass = all_pass && r.pass();
      }
      std::cout << (all_pass ? "gradcheck: all passed" : "gradcheck: FAILURES above") << "\n";
      return all_pass ? 0 : 2;
    }

    if (ablate_cmd.cmd->parsed()) {
      ablate_cmd.merge();
      AblationFile file = parse_ablation_file(ablate_spec);
      AblationSpec spec;
      auto g = [&](const char* key) -> const std::string* {
        auto it = file.globals.find(key);
        return it == file.globals.end() ? nullptr : &it->second;
      };
      if (auto* v = g("seeds")) spec.seeds = std::stoi(*v);
      if (ablate_seeds > 0) spec.seeds = ablate_seeds;
      if (auto* v = g("epochs")) spec.train.epochs = std::stoi(*v);
      if (auto* v = g("lr")) spec.train.base_lr = std::stod(*v);
      if (auto* v = g("gamma")) spec.train.gamma = std::stod(*v);
      if (auto* v = g("batch")) spec.train.batch = std::stoi(*v);
      if (auto* v = g("seed")) spec.train.seed = std::stoull(*v);
      if (auto* v = g("u")) spec.train.u = std::stoi(*v);
      if (auto* v = g("v")) spec.train.v = std::stoi(*v);
      if (auto* v = g("aux_weight")) spec.train.aux_weight = std::stod(*v);
      if (auto* v = g("eval_every")) spec.train.eval_every = std::stoi(*v);
      for (const auto& c : file.cells) {
        AblationCell cell;
        cell.name = c.name;
        for (const auto& [k, v] : c.kv) {
          if (k == "attention") cell.attention = attention_from_string(v);
          else if (k == "ial") cell.ial = parse_bool(v, "ial");
          else if (k == "aux") cell.aux = parse_bool(v, "aux");
          else if (k == "lambda") cell.lambda = std::stod(v);
          else if (k == "r") cell.r = std::stoi(v);
        }
        if (cell.lambda > 0 && c.kv.count("lambda") && !c.kv.count("ial")) cell.ial = true;
        spec.cells.push_back(cell);
      }
      std::string data_dir = ablate_data;
      if (data_dir.empty()) {
        data_dir = ablate_out + ".data";
        SyntheticConfig def;
        generate_synthetic(def, data_dir);
        std::cerr << "generated dataset under " << data_dir << "\n";
      }
      Manifest train_mf = load_manifest((fs::path(data_dir) / "train.csv").string());
      Manifest test_mf = load_manifest((fs::path(data_dir) / "test.csv").string());
      spec.model = model_config_from_data(train_mf, spec.train.u, spec.train.v, "");
      auto rows = run_ablation(spec, train_mf, test_mf, &std::cerr);
      write_ablation_csv(ablate_out, spec, rows);
      std::cout << "wrote " << ablate_out << "\n";
      return 0;
    }

    if (inspect_cmd->parsed()) {
      auto entries = read_checkpoint(inspect_ckpt);
      int64_t total = 0;
      for (const auto& e : entries) {
        int64_t n = 1;
        for (int d : e.shape) n *= d;
        total += n;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-24s %-16s %8lld", e.name.c_str(),
                      shape_str(e.shape).c_str(), static_cast<long long>(n));
        std::cout << buf << "\n";
      }
      std::cout << entries.size() << " parameters, " << total << " scalars\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "E_INTERNAL: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
