#pragma once

#include "ialgca/attention.hpp"
#include "ialgca/losses.hpp"

namespace ialgca {

enum class AttentionKind { None, Se, Cbam, Gca };
enum class FusionKind { Identity, FrameDiff };

inline const char* to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::None: return "none";
    case AttentionKind::Se: return "se";
    case AttentionKind::Cbam: return "cbam";
    case AttentionKind::Gca: return "gca";
  }
  return "?";
}
inline const char* to_string(FusionKind k) {
  return k == FusionKind::Identity ? "identity" : "frame-diff";
}
inline AttentionKind attention_from_string(const std::string& s) {
  if (s == "none") return AttentionKind::None;
  if (s == "se") return AttentionKind::Se;
  if (s == "cbam") return AttentionKind::Cbam;
  if (s == "gca") return AttentionKind::Gca;
  throw ConfigError(cat("unknown attention kind '", s, "' (none|se|cbam|gca)"));
}
inline FusionKind fusion_from_string(const std::string& s) {
  if (s == "identity") return FusionKind::Identity;
  if (s == "frame-diff") return FusionKind::FrameDiff;
  throw ConfigError(cat("unknown fusion kind '", s, "' (identity|frame-diff)"));
}

// Per-frame residual conv stages with an optional channel-attention site and
// auxiliary head after each stage, a frame-fusion step, a linear token
// projection, a temporal transformer encoder, mean-token pooling and a final
// linear classifier. Defaults are desk scale; paper_preset() matches the
// 112x112 / ResNet18-width setup.
struct ModelConfig {
  int num_classes = 7;
  int frames = 8;
  int in_channels = 3;
  int in_h = 32, in_w = 32;
  std::vector<int> widths = {8, 16, 32};
  AttentionKind attention = AttentionKind::Gca;
  int r = 4;
  int heads = 4;
  int layers = 2;
  int token_dim = 64;
  int mlp_dim = 128;
  bool aux = true;
  FusionKind fusion = FusionKind::FrameDiff;
  bool pos_embed = true;

  struct StageDim {
    int c, h, w;
  };

  // Feature dims after each stage; every stage halves H and W (3x3 stride-2
  // conv with pad 1, so odd sizes round up).
  std::vector<StageDim> stage_dims() const {
    std::vector<StageDim> out;
    int h = in_h, w = in_w;
    for (int c : widths) {
      h = (h + 2 - 3) / 2 + 1;
      w = (w + 2 - 3) / 2 + 1;
      out.push_back({c, h, w});
    }
    return out;
  }

  int token_input_dim() const {
    auto dims = stage_dims();
    return dims.back().c * dims.back().h * dims.back().w;
  }

  void validate() const {
    if (num_classes < 2) throw ConfigError(cat("num_classes must be >= 2, got ", num_classes));
    if (frames < 1) throw ConfigError("frames must be >= 1");
    if (widths.empty()) throw ConfigError("at least one stage width required");
    if (in_h < (1 << static_cast<int>(widths.size())) ||
        in_w < (1 << static_cast<int>(widths.size())))
      throw ConfigError(cat("input ", in_h, "x", in_w, " too small for ", widths.size(),
                            " downsampling stages"));
    if (token_dim % heads != 0)
      throw ConfigError(cat("token_dim ", token_dim, " not divisible by heads ", heads));
    if (layers < 1 || heads < 1 || token_dim < 1 || mlp_dim < 1)
      throw ConfigError("transformer dims must be positive");
    if (attention != AttentionKind::None)
      for (int c : widths)
        if (c / r < 1)
          throw ConfigError(cat("reduction ratio ", r, " too large for stage width ", c));
  }

  static ModelConfig paper_preset() {
    ModelConfig c;
    c.in_h = c.in_w = 112;
    c.widths = {64, 128, 256, 512};
    c.frames = 16;
    c.r = 16;
    c.token_dim = 512;
    c.mlp_dim = 1024;
    return c;
  }
};

template <class S>
struct DFERModel {
  ModelConfig cfg;
  ParamSet<S> params;

  static DFERModel init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    DFERModel m;
    m.cfg = cfg;
    Rng rng(seed);
    auto dims = cfg.stage_dims();
    int cin = cfg.in_channels;
    for (size_t i = 0; i < cfg.widths.size(); ++i) {
      int cout = cfg.widths[i];
      std::string base = cat("stage", i, ".");
      m.params.add(base + "conv1.w",
                   Tensor<S>::randn({cout, cin, 3, 3}, rng, std::sqrt(2.0 / (cin * 9))));
      m.params.add(base + "conv1.b", Tensor<S>::zeros({cout}));
      m.params.add(base + "conv2.w",
                   Tensor<S>::randn({cout, cout, 3, 3}, rng, std::sqrt(2.0 / (cout * 9))));
      m.params.add(base + "conv2.b", Tensor<S>::zeros({cout}));
      m.params.add(base + "proj.w",
                   Tensor<S>::randn({cout, cin, 1, 1}, rng, std::sqrt(2.0 / cin)));
      m.params.add(base + "proj.b", Tensor<S>::zeros({cout}));
      if (cfg.attention != AttentionKind::None) {
        if (cfg.attention == AttentionKind::Gca) {
          auto blk = gca_block_init<S>(cout, dims[i].h, dims[i].w, cfg.r, rng);
          m.params.add(base + "attn.w1", std::move(blk.w1));
          m.params.add(base + "attn.w2", std::move(blk.w2));
          m.params.add(base + "attn.kernel", std::move(blk.kernel));
        } else {
          auto blk = se_block_init<S>(cout, cfg.r, rng);
          m.params.add(base + "attn.w1", std::move(blk.w1));
          m.params.add(base + "attn.w2", std::move(blk.w2));
        }
        if (cfg.aux) {
          m.params.add(base + "aux.w",
                       Tensor<S>::randn({cout, cfg.num_classes}, rng, 0.01));
          m.params.add(base + "aux.b", Tensor<S>::zeros({cfg.num_classes}));
        }
      }
      cin = cout;
    }
    int chw = cfg.token_input_dim();
    int d = cfg.token_dim;
    m.params.add("token.w", Tensor<S>::randn({chw, d}, rng, std::sqrt(1.0 / chw)));
    m.params.add("token.b", Tensor<S>::zeros({d}));
    if (cfg.pos_embed)
      m.params.add("pos", Tensor<S>::randn({cfg.frames, d}, rng, 0.02));
    int dh = d / cfg.heads;
    for (int l = 0; l < cfg.layers; ++l) {
      std::string base = cat("tf", l, ".");
      m.params.add(base + "ln1.g", Tensor<S>::full({d}, S(1)));
      m.params.add(base + "ln1.b", Tensor<S>::zeros({d}));
      for (int h = 0; h < cfg.heads; ++h) {
        std::string hb = cat(base, "head", h, ".");
        for (const char* nm : {"wq", "wk", "wv"})
          m.params.add(hb + nm, Tensor<S>::randn({d, dh}, rng, std::sqrt(1.0 / d)));
        // no key bias: softmax rows are shift-invariant, so it could never
        // receive gradient
        for (const char* nm : {"bq", "bv"})
          m.params.add(hb + nm, Tensor<S>::zeros({dh}));
      }
      m.params.add(base + "attn_out.w", Tensor<S>::randn({d, d}, rng, std::sqrt(1.0 / d)));
      m.params.add(base + "attn_out.b", Tensor<S>::zeros({d}));
      m.params.add(base + "ln2.g", Tensor<S>::full({d}, S(1)));
      m.params.add(base + "ln2.b", Tensor<S>::zeros({d}));
      m.params.add(base + "mlp.w1", Tensor<S>::randn({d, cfg.mlp_dim}, rng, std::sqrt(2.0 / d)));
      m.params.add(base + "mlp.b1", Tensor<S>::zeros({cfg.mlp_dim}));
      m.params.add(base + "mlp.w2",
                   Tensor<S>::randn({cfg.mlp_dim, d}, rng, std::sqrt(1.0 / cfg.mlp_dim)));
      m.params.add(base + "mlp.b2", Tensor<S>::zeros({d}));
    }
    m.params.add("head.w", Tensor<S>::randn({d, cfg.num_classes}, rng, 0.01));
    m.params.add("head.b", Tensor<S>::zeros({cfg.num_classes}));
    m.params.add("norm.mean", Tensor<S>::zeros({cfg.in_channels}), /*trainable=*/false);
    m.params.add("norm.std", Tensor<S>::full({cfg.in_channels}, S(1)), /*trainable=*/false);
    return m;
  }
};

// Rewrites every GCA site to the exact-identity configuration (uniform
// kernel, zero MLP), making the model equal the attention-free one.
template <class S>
void set_attention_identity(DFERModel<S>& m) {
  if (m.cfg.attention != AttentionKind::Gca)
    throw ContractError("set_attention_identity: model has no GCA sites");
  auto dims = m.cfg.stage_dims();
  for (size_t i = 0; i < m.cfg.widths.size(); ++i) {
    auto blk = gca_block_identity<S>(m.cfg.widths[i], dims[i].h, dims[i].w, m.cfg.r);
    m.params.find(cat("stage", i, ".attn.w1"))->value = std::move(blk.w1);
    m.params.find(cat("stage", i, ".attn.w2"))->value = std::move(blk.w2);
    m.params.find(cat("stage", i, ".attn.kernel"))->value = std::move(blk.kernel);
  }
}

template <class S>
struct BoundModel {
  const DFERModel<S>* model = nullptr;
  Tape<S>* tape = nullptr;
  std::vector<Val<S>> p;

  Val<S> operator[](const std::string& name) const {
    int i = model->params.index_of(name);
    if (i < 0) throw ContractError(cat("unknown parameter '", name, "'"));
    return p[static_cast<size_t>(i)];
  }
};

template <class S>
BoundModel<S> bind_model(Tape<S>& tape, const DFERModel<S>& model) {
  return {&model, &tape, model.params.bind(tape)};
}

template <class S>
struct TransformerTrace {
  // attention probabilities per layer and head, each T x T
  std::vector<std::vector<Tensor<S>>> attn;
};

namespace detail {
template <class S>
Val<S> linear(Val<S> x, Val<S> w, Val<S> b) {
  return add_bcast_last(matmul(x, w), b);
}

// Parameter-free normalization over everything but the frame axis. The
// backbone has no batch statistics, so this is what keeps stacked residual
// stages at unit scale and trainable with plain SGD. The large-ish eps keeps
// the curvature benign for finite-difference checks.
template <class S>
Val<S> frame_norm(Val<S> x) {
  const std::vector<int> shape = x.t().shape;
  int frames = shape[0];
  int inner = static_cast<int>(x.t().numel() / frames);
  return reshape(layer_norm_last(reshape(x, {frames, inner}), 1e-3), shape);
}
}  // namespace detail

template <class S>
struct BackboneOut {
  Val<S> features;
  std::vector<Val<S>> aux_rows;  // one 1 x K row per attention site
};

template <class S>
BackboneOut<S> backbone_forward_graph(BoundModel<S>& bm, Val<S> clip) {
  const ModelConfig& cfg = bm.model->cfg;
  const auto& cs = clip.t().shape;
  if (cs != std::vector<int>{cfg.frames, cfg.in_channels, cfg.in_h, cfg.in_w})
    throw ShapeError(cat("backbone: clip shape ", shape_str(cs), " does not match config ",
                         shape_str({cfg.frames, cfg.in_channels, cfg.in_h, cfg.in_w})));
  BackboneOut<S> out;
  Val<S> x = clip;
  for (size_t i = 0; i < cfg.widths.size(); ++i) {
    std::string base = cat("stage", i, ".");
    Val<S> h1 = relu(add_channel_bias(conv2d(x, bm[base + "conv1.w"], 2, 1),
                                      bm[base + "conv1.b"]));
    Val<S> h2 = add_channel_bias(conv2d(h1, bm[base + "conv2.w"], 1, 1),
                                 bm[base + "conv2.b"]);
    Val<S> sc = add_channel_bias(conv2d(x, bm[base + "proj.w"], 2, 0),
                                 bm[base + "proj.b"]);
    x = detail::frame_norm(relu(add(h2, sc)));
    if (cfg.attention != AttentionKind::None) {
      AttentionOut<S> att;
      if (cfg.attention == AttentionKind::Se)
        att = se_attention_graph(x, bm[base + "attn.w1"], bm[base + "attn.w2"]);
      else if (cfg.attention == AttentionKind::Cbam)
        att = cbam_attention_graph(x, bm[base + "attn.w1"], bm[base + "attn.w2"]);
      else
        att = gca_attention_graph(x, bm[base + "attn.w1"], bm[base + "attn.w2"],
                                  bm[base + "attn.kernel"]);
      x = att.x_tilde;
      if (cfg.aux) {
        Val<S> pooled = mean_axis(mean_axis(mean_axis(x, 3), 2), 0);  // C
        // normalized like the main head, and for the same reason
        Val<S> row = layer_norm_last(reshape(pooled, {1, x.t().dim(1)}), 1e-3);
        out.aux_rows.push_back(
            detail::linear(row, bm[base + "aux.w"], bm[base + "aux.b"]));
      }
    }
  }
  out.features = x;
  return out;
}

// kind=identity passes features through; kind=frame-diff emphasises change
// between adjacent frames: out_t = f_t + (f_t - f_{t-1}), with f_{-1} = f_0.
// Expressed as one constant T x T matrix applied to flattened frames.
template <class S>
Val<S> fuse_frames_graph(Tape<S>& tape, Val<S> features, FusionKind kind) {
  if (kind == FusionKind::Identity) return features;
  const auto& fs = features.t().shape;
  if (fs.empty()) throw ShapeError("fuse_frames: rank must be >= 1");
  int t = fs[0];
  int inner = static_cast<int>(features.t().numel() / t);
  Tensor<S> m = Tensor<S>::zeros({t, t});
  m.at(0, 0) = S(1);
  for (int i = 1; i < t; ++i) {
    m.at(i, i) = S(2);
    m.at(i, i - 1) = S(-1);
  }
  Val<S> flat = reshape(features, {t, inner});
  Val<S> fused = matmul(constant(tape, std::move(m)), flat);
  return reshape(fused, fs);
}

template <class S>
Tensor<S> fuse_frames(const Tensor<S>& features, FusionKind kind) {
  Tape<S> tape;
  return fuse_frames_graph(tape, constant(tape, features), kind).t();
}

template <class S>
Val<S> temporal_transformer_graph(BoundModel<S>& bm, Val<S> tokens,
                                  TransformerTrace<S>* trace = nullptr) {
  const ModelConfig& cfg = bm.model->cfg;
  if (tokens.t().rank() != 2 || tokens.t().dim(1) != cfg.token_dim)
    throw ShapeError(cat("transformer: tokens must be T x ", cfg.token_dim, ", got ",
                         shape_str(tokens.t().shape)));
  int dh = cfg.token_dim / cfg.heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Val<S> x = tokens;
  if (trace) trace->attn.assign(static_cast<size_t>(cfg.layers), {});
  for (int l = 0; l < cfg.layers; ++l) {
    std::string base = cat("tf", l, ".");
    Val<S> u = add_bcast_last(mul_bcast_last(layer_norm_last(x), bm[base + "ln1.g"]),
                              bm[base + "ln1.b"]);
    std::vector<Val<S>> heads_out;
    for (int h = 0; h < cfg.heads; ++h) {
      std::string hb = cat(base, "head", h, ".");
      Val<S> q = detail::linear(u, bm[hb + "wq"], bm[hb + "bq"]);
      Val<S> k = matmul(u, bm[hb + "wk"]);
      Val<S> v = detail::linear(u, bm[hb + "wv"], bm[hb + "bv"]);
      Val<S> probs = softmax_last(scalar_mul(matmul(q, k, false, true), scale));
      if (trace) trace->attn[static_cast<size_t>(l)].push_back(probs.t());
      heads_out.push_back(matmul(probs, v));
    }
    Val<S> o = concat_axis(heads_out, 1);
    x = add(x, detail::linear(o, bm[base + "attn_out.w"], bm[base + "attn_out.b"]));
    Val<S> u2 = add_bcast_last(mul_bcast_last(layer_norm_last(x), bm[base + "ln2.g"]),
                               bm[base + "ln2.b"]);
    Val<S> hidden = relu(detail::linear(u2, bm[base + "mlp.w1"], bm[base + "mlp.b1"]));
    x = add(x, detail::linear(hidden, bm[base + "mlp.w2"], bm[base + "mlp.b2"]));
  }
  return x;
}

template <class S>
Tensor<S> temporal_transformer(const DFERModel<S>& model, const Tensor<S>& tokens,
                               TransformerTrace<S>* trace = nullptr) {
  Tape<S> tape;
  auto bm = bind_model(tape, model);
  return temporal_transformer_graph(bm, constant(tape, tokens), trace).t();
}

template <class S>
struct ClipForward {
  Val<S> logits_row;              // 1 x K
  std::vector<Val<S>> aux_rows;   // 1 x K each
};

template <class S>
ClipForward<S> classify_clip_graph(BoundModel<S>& bm, Val<S> clip,
                                   TransformerTrace<S>* trace = nullptr) {
  const ModelConfig& cfg = bm.model->cfg;
  BackboneOut<S> bb = backbone_forward_graph(bm, clip);
  Val<S> fused = fuse_frames_graph(*bm.tape, bb.features, cfg.fusion);
  Val<S> tok = detail::linear(reshape(fused, {cfg.frames, cfg.token_input_dim()}),
                              bm["token.w"], bm["token.b"]);
  if (cfg.pos_embed) tok = add(tok, bm["pos"]);
  Val<S> enc = temporal_transformer_graph(bm, tok, trace);
  // parameter-free normalization keeps the head's input at unit scale; the
  // un-normalized residual stream otherwise grows with depth and destabilizes
  // plain SGD
  Val<S> pooled = layer_norm_last(reshape(mean_axis(enc, 0), {1, cfg.token_dim}), 1e-3);
  return {detail::linear(pooled, bm["head.w"], bm["head.b"]), std::move(bb.aux_rows)};
}

template <class S>
struct BatchForward {
  Val<S> logits;               // B x K
  std::vector<Val<S>> aux;     // B x K per attention site
};

template <class S>
BatchForward<S> classify_batch_graph(BoundModel<S>& bm, const std::vector<Val<S>>& clips) {
  if (clips.empty()) throw ContractError("classify_batch: empty batch");
  std::vector<Val<S>> rows;
  std::vector<std::vector<Val<S>>> aux_cols;
  for (auto clip : clips) {
    ClipForward<S> cf = classify_clip_graph(bm, clip);
    rows.push_back(cf.logits_row);
    aux_cols.resize(cf.aux_rows.size());
    for (size_t s = 0; s < cf.aux_rows.size(); ++s) aux_cols[s].push_back(cf.aux_rows[s]);
  }
  BatchForward<S> out;
  out.logits = rows.size() == 1 ? rows[0] : concat_axis(rows, 0);
  for (auto& col : aux_cols)
    out.aux.push_back(col.size() == 1 ? col[0] : concat_axis(col, 0));
  return out;
}

// Single-clip forward on a private tape; returns plain tensors.
template <class S>
std::pair<Tensor<S>, std::vector<Tensor<S>>> classify(const DFERModel<S>& model,
                                                      const Tensor<S>& clip,
                                                      TransformerTrace<S>* trace = nullptr) {
  Tape<S> tape;
  auto bm = bind_model(tape, model);
  ClipForward<S> cf = classify_clip_graph(bm, constant(tape, clip), trace);
  Tensor<S> logits = cf.logits_row.t();
  logits.shape = {model.cfg.num_classes};
  std::vector<Tensor<S>> aux;
  for (auto row : cf.aux_rows) {
    Tensor<S> a = row.t();
    a.shape = {model.cfg.num_classes};
    aux.push_back(std::move(a));
  }
  return {std::move(logits), std::move(aux)};
}

}  // namespace ialgca
