#pragma once

#include <functional>

#include "ialgca/gradcheck.hpp"
#include "ialgca/model.hpp"
#include "ialgca/trainer.hpp"

namespace ialgca {

struct SuiteResult {
  std::string name;
  double max_rel = 0.0;
  double tol = 1e-6;
  bool pass() const { return max_rel <= tol; }
};

namespace gradcheck_detail {

inline Tensord nudged_randn(const std::vector<int>& shape, Rng& rng, double floor_gap) {
  Tensord t = Tensord::randn(shape, rng);
  if (floor_gap > 0)
    for (int64_t i = 0; i < t.numel(); ++i)
      if (std::abs(t.data[i]) < floor_gap)
        t.data[i] = t.data[i] < 0 ? t.data[i] - floor_gap : t.data[i] + floor_gap;
  return t;
}

inline Tensord positive_randn(const std::vector<int>& shape, Rng& rng) {
  Tensord t = Tensord::randn(shape, rng);
  t.data = t.data.abs() + 0.25;
  return t;
}

// Spread entries along the last axis so max/gather selections cannot flip
// under the probe epsilon.
inline Tensord tie_free_randn(const std::vector<int>& shape, Rng& rng) {
  Tensord t = Tensord::randn(shape, rng);
  int k = shape.back();
  int64_t rows = t.numel() / k;
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < k; ++j) {
      bool again = true;
      while (again) {
        again = false;
        for (int j2 = 0; j2 < j; ++j2)
          if (std::abs(t.data[r * k + j] - t.data[r * k + j2]) < 1e-3) {
            t.data[r * k + j] += 5e-3;
            again = true;
          }
      }
    }
  return t;
}

using Builder =
    std::function<Val<double>(Tape<double>&, const std::vector<Val<double>>&)>;

// Contraction weights bounded away from zero, so no probed entry ends up with
// a gradient drowned in central-difference roundoff.
inline Tensord contraction_weight(const std::vector<int>& shape, Rng& rng) {
  Tensord w = Tensord::randn(shape, rng);
  for (int64_t i = 0; i < w.numel(); ++i)
    w.data[i] = w.data[i] < 0 ? w.data[i] - 0.3 : w.data[i] + 0.3;
  return w;
}

// One finite-difference case: inputs become parameters, the builder output is
// contracted against a fixed random weight to a scalar, and the analytic
// reverse sweep is compared entry-wise against central differences. Ops that
// are affine in every scalar input admit a large epsilon (central differences
// are exact for them); smooth nonlinear ops use the default 1e-5.
inline double run_case(std::vector<Tensord> inputs, const Builder& build, Rng& wrng,
                       double eps = 1e-5) {
  ParamSet<double> ps;
  for (size_t i = 0; i < inputs.size(); ++i) ps.add(cat("in", i), std::move(inputs[i]));

  Tensord weight;
  {
    Tape<double> probe;
    auto vals = ps.bind(probe);
    Val<double> y = build(probe, vals);
    weight = contraction_weight(y.t().shape, wrng);
  }

  auto scalar_loss = [&](Tape<double>& tape, const std::vector<Val<double>>& vals) {
    Val<double> y = build(tape, vals);
    Val<double> w = constant(tape, weight);
    return sum_all(mul(y, w));
  };

  GradCheckResult res;
  {
    Tape<double> tape;
    auto vals = ps.bind(tape);
    Val<double> loss = scalar_loss(tape, vals);
    auto grads = tape.backward(loss.id);
    auto fd = finite_diff_gradient(
        [&](const ParamSet<double>& p) {
          Tape<double> t2;
          auto v2 = p.bind(t2);
          return scalar_loss(t2, v2).t().data[0];
        },
        ps, eps);
    for (int i = 0; i < ps.size(); ++i)
      res.fold(ps[i].name, grads[static_cast<size_t>(i)], fd[ps[i].name]);
  }
  return res.max_rel;
}

// Checks a function of a double-precision model (optionally with extra free
// inputs). Only parameters matching `filter` are probed.
inline double run_model_case(
    const DFERModel<double>& model, std::vector<std::pair<std::string, Tensord>> extras,
    const std::function<Val<double>(BoundModel<double>&, const std::vector<Val<double>>&)>&
        build,
    const std::function<bool(const std::string&)>& filter = nullptr, double eps = 1e-5) {
  ParamSet<double> ps;
  for (int i = 0; i < model.params.size(); ++i) {
    const auto& p = model.params[i];
    bool probe = p.trainable && (!filter || filter(p.name));
    ps.add(p.name, p.value, probe);
  }
  int base = ps.size();
  for (auto& [name, tensor] : extras) ps.add(name, std::move(tensor), true);

  auto scalar_loss = [&](Tape<double>& tape, const std::vector<Val<double>>& vals) {
    BoundModel<double> bm{&model, &tape,
                          {vals.begin(), vals.begin() + base}};
    std::vector<Val<double>> ex(vals.begin() + base, vals.end());
    return build(bm, ex);
  };

  GradCheckResult res;
  Tape<double> tape;
  auto vals = ps.bind(tape);
  Val<double> loss = scalar_loss(tape, vals);
  auto grads = tape.backward(loss.id);
  auto fd = finite_diff_gradient(
      [&](const ParamSet<double>& p) {
        Tape<double> t2;
        auto v2 = p.bind(t2);
        return scalar_loss(t2, v2).t().data[0];
      },
      ps, eps);
  for (int i = 0; i < ps.size(); ++i) {
    if (!ps[i].trainable) continue;
    res.fold(ps[i].name, grads[static_cast<size_t>(i)], fd[ps[i].name]);
  }
  return res.max_rel;
}

}  // namespace gradcheck_detail

// Tiny-but-complete configuration used for the end-to-end check: two stages,
// GCA sites, aux heads, frame-diff fusion, one transformer layer.
inline ModelConfig gradcheck_model_config() {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.frames = 2;
  cfg.in_h = cfg.in_w = 8;
  cfg.widths = {4, 8};
  cfg.attention = AttentionKind::Gca;
  cfg.r = 2;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.token_dim = 16;
  cfg.mlp_dim = 32;
  cfg.aux = true;
  cfg.fusion = FusionKind::FrameDiff;
  return cfg;
}

inline std::vector<SuiteResult> gradcheck_primitives(int cases_per_op = 20) {
  using namespace gradcheck_detail;
  std::vector<SuiteResult> out;
  Rng wrng(99);

  auto run_op = [&](const std::string& name,
                    const std::function<double(int seed)>& one_case) {
    SuiteResult r;
    r.name = "primitive/" + name;
    for (int s = 0; s < cases_per_op; ++s) r.max_rel = std::max(r.max_rel, one_case(s));
    out.push_back(r);
  };

  run_op("matmul", [&](int s) {
    Rng rng(1000 + static_cast<uint64_t>(s));
    int m = 1 + s % 3, k = 2 + s % 2, n = 1 + (s / 2) % 3;
    bool ta = s % 2, tb = (s / 2) % 2;
    std::vector<int> sa = ta ? std::vector<int>{k, m} : std::vector<int>{m, k};
    std::vector<int> sb = tb ? std::vector<int>{n, k} : std::vector<int>{k, n};
    return run_case({Tensord::randn(sa, rng), Tensord::randn(sb, rng)},
                    [=](Tape<double>&, const std::vector<Val<double>>& v) {
                      return matmul(v[0], v[1], ta, tb);
                    },
                    wrng, 1e-2);
  });

  for (auto [nm, op] : {std::pair<const char*, Op>{"add", Op::Add},
                        {"sub", Op::Sub},
                        {"mul", Op::Mul}})
    run_op(nm, [&, op](int s) {
      Rng rng(2000 + static_cast<uint64_t>(s));
      std::vector<int> shape = s % 2 ? std::vector<int>{2, 3, 2} : std::vector<int>{3, 4};
      return run_case({Tensord::randn(shape, rng), Tensord::randn(shape, rng)},
                      [op](Tape<double>& t, const std::vector<Val<double>>& v) {
                        return Val<double>{&t, t.apply(op, {v[0].id, v[1].id})};
                      },
                      wrng, 1e-2);
    });

  run_op("scale_channels", [&](int s) {
    Rng rng(3000 + static_cast<uint64_t>(s));
    int t = 1 + s % 3, c = 2 + s % 2, h = 2 + s % 2;
    return run_case(
        {Tensord::randn({t, c, h, 2}, rng), Tensord::randn({t, c}, rng)},
        [](Tape<double>&, const std::vector<Val<double>>& v) {
          return scale_channels(v[0], v[1]);
        },
        wrng, 1e-2);
  });

  run_op("mul_bcast_last", [&](int s) {
    Rng rng(3100 + static_cast<uint64_t>(s));
    std::vector<int> shape = s % 2 ? std::vector<int>{2, 3, 4} : std::vector<int>{3, 5};
    return run_case(
        {Tensord::randn(shape, rng), Tensord::randn({shape.back()}, rng)},
        [](Tape<double>&, const std::vector<Val<double>>& v) {
          return mul_bcast_last(v[0], v[1]);
        },
        wrng, 1e-2);
  });

  run_op("add_bcast_last", [&](int s) {
    Rng rng(3200 + static_cast<uint64_t>(s));
    std::vector<int> shape = s % 2 ? std::vector<int>{2, 2, 3} : std::vector<int>{4, 3};
    return run_case(
        {Tensord::randn(shape, rng), Tensord::randn({shape.back()}, rng)},
        [](Tape<double>&, const std::vector<Val<double>>& v) {
          return add_bcast_last(v[0], v[1]);
        },
        wrng, 1e-2);
  });

  run_op("add_channel_bias", [&](int s) {
    Rng rng(3300 + static_cast<uint64_t>(s));
    int c = 2 + s % 3;
    return run_case(
        {Tensord::randn({2, c, 2, 3}, rng), Tensord::randn({c}, rng)},
        [](Tape<double>&, const std::vector<Val<double>>& v) {
          return add_channel_bias(v[0], v[1]);
        },
        wrng, 1e-2);
  });

  run_op("relu", [&](int s) {
    Rng rng(3400 + static_cast<uint64_t>(s));
    std::vector<int> shape = s % 2 ? std::vector<int>{2, 3, 2} : std::vector<int>{3, 4};
    return run_case({nudged_randn(shape, rng, 0.05)},
                    [](Tape<double>&, const std::vector<Val<double>>& v) {
                      return relu(v[0]);
                    },
                    wrng, 1e-2);
  });

  for (auto [nm, fn] : {std::pair<const char*, Val<double> (*)(Val<double>)>{
                            "sigmoid", &sigmoid<double>},
                        {"exp", &exp<double>}})
    run_op(nm, [&, fn](int s) {
      Rng rng(3500 + static_cast<uint64_t>(s));
      std::vector<int> shape = s % 2 ? std::vector<int>{2, 4} : std::vector<int>{5};
      return run_case({Tensord::randn(shape, rng)},
                      [fn](Tape<double>&, const std::vector<Val<double>>& v) {
                        return fn(v[0]);
                      },
                      wrng);
    });

  for (auto [nm, fn] : {std::pair<const char*, Val<double> (*)(Val<double>)>{
                            "sqrt", &sqrt<double>},
                        {"log", &log<double>}})
    run_op(nm, [&, fn](int s) {
      Rng rng(3600 + static_cast<uint64_t>(s));
      std::vector<int> shape = s % 2 ? std::vector<int>{2, 3} : std::vector<int>{4};
      return run_case({positive_randn(shape, rng)},
                      [fn](Tape<double>&, const std::vector<Val<double>>& v) {
                        return fn(v[0]);
                      },
                      wrng);
    });

  run_op("softmax_last", [&](int s) {
    Rng rng(3700 + static_cast<uint64_t>(s));
    std::vector<int> shape = s % 2 ? std::vector<int>{2, 5} : std::vector<int>{3, 4};
    return run_case({Tensord::randn(shape, rng)},
                    [](Tape<double>&, const std::vector<Val<double>>& v) {
                      return softmax_last(v[0]);
                    },
                    wrng);
  });

  run_op("mean_axis", [&](int s) {
    Rng rng(3800 + static_cast<uint64_t>(s));
    std::vector<int> shape{2, 3, 4};
    int axis = s % 3;
    return run_case({Tensord::randn(shape, rng)},
                    [axis](Tape<double>&, const std::vector<Val<double>>& v) {
                      return mean_axis(v[0], axis);
                    },
                    wrng, 1e-2);
  });

  run_op("weighted_spatial_sum", [&](int s) {
    Rng rng(3900 + static_cast<uint64_t>(s));
    int t = 1 + s % 3, c = 2 + s % 2, h = 2 + s % 2;
    return run_case(
        {Tensord::randn({t, c, h, 3}, rng), Tensord::randn({c, h, 3}, rng)},
        [](Tape<double>&, const std::vector<Val<double>>& v) {
          return weighted_spatial_sum(v[0], v[1]);
        },
        wrng, 1e-2);
  });

  run_op("conv2d", [&](int s) {
    Rng rng(4000 + static_cast<uint64_t>(s));
    int stride = 1 + s % 2, pad = s % 2, kk = (s % 3 == 2) ? 1 : 3;
    int ci = 1 + s % 2, co = 1 + (s / 2) % 2;
    return run_case(
        {Tensord::randn({2, ci, 5, 5}, rng), Tensord::randn({co, ci, kk, kk}, rng)},
        [stride, pad](Tape<double>&, const std::vector<Val<double>>& v) {
          return conv2d(v[0], v[1], stride, pad);
        },
        wrng, 1e-2);
  });

  run_op("layer_norm_last", [&](int s) {
    Rng rng(4100 + static_cast<uint64_t>(s));
    std::vector<int> shape = s % 2 ? std::vector<int>{2, 6} : std::vector<int>{3, 4};
    return run_case({Tensord::randn(shape, rng)},
                    [](Tape<double>&, const std::vector<Val<double>>& v) {
                      return layer_norm_last(v[0]);
                    },
                    wrng);
  });

  run_op("scalar_mul", [&](int s) {
    Rng rng(4200 + static_cast<uint64_t>(s));
    double c = (s % 2 ? -0.7 : 2.5) + 0.1 * s;
    return run_case({Tensord::randn({3, 4}, rng)},
                    [c](Tape<double>&, const std::vector<Val<double>>& v) {
                      return scalar_mul(v[0], c);
                    },
                    wrng, 1e-2);
  });

  run_op("concat_axis", [&](int s) {
    Rng rng(4300 + static_cast<uint64_t>(s));
    int axis = s % 2;
    std::vector<int> a = axis == 0 ? std::vector<int>{2, 3} : std::vector<int>{2, 2};
    std::vector<int> b = axis == 0 ? std::vector<int>{1, 3} : std::vector<int>{2, 3};
    return run_case({Tensord::randn(a, rng), Tensord::randn(b, rng)},
                    [axis](Tape<double>&, const std::vector<Val<double>>& v) {
                      return concat_axis<double>({v[0], v[1]}, axis);
                    },
                    wrng, 1e-2);
  });

  run_op("reshape", [&](int s) {
    Rng rng(4400 + static_cast<uint64_t>(s));
    return run_case({Tensord::randn({2, 6}, rng)},
                    [](Tape<double>&, const std::vector<Val<double>>& v) {
                      return reshape(v[0], {3, 2, 2});
                    },
                    wrng, 1e-2);
  });

  run_op("max_last", [&](int s) {
    Rng rng(4500 + static_cast<uint64_t>(s));
    return run_case({tie_free_randn({3, 5}, rng)},
                    [](Tape<double>&, const std::vector<Val<double>>& v) {
                      return max_last(v[0]);
                    },
                    wrng, 1e-4);
  });

  run_op("gather_last", [&](int s) {
    Rng rng(4600 + static_cast<uint64_t>(s));
    std::vector<int> idx = {s % 5, (s + 2) % 5, (s + 4) % 5};
    return run_case({Tensord::randn({3, 5}, rng)},
                    [idx](Tape<double>&, const std::vector<Val<double>>& v) {
                      return gather_last(v[0], idx);
                    },
                    wrng, 1e-2);
  });

  return out;
}

inline std::vector<SuiteResult> gradcheck_blocks(int cases = 5) {
  using namespace gradcheck_detail;
  std::vector<SuiteResult> out;
  Rng wrng(123);

  auto run_block = [&](const std::string& name, auto&& make_inputs, auto&& build) {
    SuiteResult r;
    r.name = "block/" + name;
    for (int s = 0; s < cases; ++s) {
      Rng rng(5000 + static_cast<uint64_t>(s));
      r.max_rel = std::max(r.max_rel, run_case(make_inputs(rng), build, wrng));
    }
    out.push_back(r);
  };

  // X 2x4x3x3, bottleneck 4/2 = 2
  auto se_inputs = [](Rng& rng) {
    return std::vector<Tensord>{Tensord::randn({2, 4, 3, 3}, rng),
                                Tensord::randn({2, 4}, rng, 0.7),
                                Tensord::randn({4, 2}, rng, 0.7)};
  };
  run_block("se", se_inputs, [](Tape<double>&, const std::vector<Val<double>>& v) {
    auto o = se_attention_graph(v[0], v[1], v[2]);
    return add(sum_all(o.x_tilde), sum_all(o.weights));
  });
  run_block("cbam",
            [](Rng& rng) {
              return std::vector<Tensord>{tie_free_randn({2, 4, 3, 3}, rng),
                                          Tensord::randn({2, 4}, rng, 0.7),
                                          Tensord::randn({4, 2}, rng, 0.7)};
            },
            [](Tape<double>&, const std::vector<Val<double>>& v) {
              auto o = cbam_attention_graph(v[0], v[1], v[2]);
              return add(sum_all(o.x_tilde), sum_all(o.weights));
            });
  run_block("gca",
            [](Rng& rng) {
              return std::vector<Tensord>{Tensord::randn({2, 4, 3, 3}, rng),
                                          Tensord::randn({2, 4}, rng, 0.7),
                                          Tensord::randn({4, 2}, rng, 0.7),
                                          Tensord::randn({4, 3, 3}, rng, 0.4)};
            },
            [](Tape<double>&, const std::vector<Val<double>>& v) {
              auto o = gca_attention_graph(v[0], v[1], v[2], v[3]);
              return add(sum_all(o.x_tilde), sum_all(o.weights));
            });
  return out;
}

inline std::vector<SuiteResult> gradcheck_losses(int cases = 5) {
  using namespace gradcheck_detail;
  std::vector<SuiteResult> out;
  Rng wrng(321);

  auto run_loss = [&](const std::string& name, auto&& make_inputs, auto&& build) {
    SuiteResult r;
    r.name = "loss/" + name;
    for (int s = 0; s < cases; ++s) {
      Rng rng(6000 + static_cast<uint64_t>(s));
      r.max_rel = std::max(r.max_rel, run_case(make_inputs(rng, s), build, wrng));
    }
    out.push_back(r);
  };

  std::vector<int> targets{1, 0, 3, 2};
  auto logits4x5 = [&](Rng& rng, int) {
    return std::vector<Tensord>{tie_free_randn({4, 5}, rng)};
  };
  run_loss("cross_entropy", logits4x5,
           [targets](Tape<double>&, const std::vector<Val<double>>& v) {
             return cross_entropy(v[0], targets);
           });
  run_loss("intensity_aware", logits4x5,
           [targets](Tape<double>&, const std::vector<Val<double>>& v) {
             return intensity_aware_loss(v[0], targets);
           });
  // near-tie: the two leading non-target logits exactly 1e-3 apart, far from
  // the rest, so the probe epsilon cannot flip the selection
  run_loss("intensity_aware_near_tie",
           [&](Rng& rng, int) {
             Tensord t = Tensord::from({2, 4}, {0.3, 0.9, 0.9 + 1e-3, -0.8,  //
                                                1.2, -0.5, 0.7, 0.7 + 1e-3});
             t.data += 0.01 * Tensord::randn({2, 4}, rng).data.abs();
             t.at(0, 2) = t.at(0, 1) + 1e-3;
             t.at(1, 3) = t.at(1, 2) + 1e-3;
             return std::vector<Tensord>{std::move(t)};
           },
           [](Tape<double>&, const std::vector<Val<double>>& v) {
             return intensity_aware_loss(v[0], {0, 0});
           });
  run_loss("combined",
           [&](Rng& rng, int) {
             return std::vector<Tensord>{tie_free_randn({4, 5}, rng),
                                         tie_free_randn({4, 5}, rng),
                                         tie_free_randn({4, 5}, rng)};
           },
           [targets](Tape<double>&, const std::vector<Val<double>>& v) {
             LossConfig cfg;
             return combined_loss(v[0], {v[1], v[2]}, targets, cfg);
           });
  return out;
}

inline std::vector<SuiteResult> gradcheck_model() {
  using namespace gradcheck_detail;
  std::vector<SuiteResult> out;
  ModelConfig cfg = gradcheck_model_config();
  DFERModel<double> model = DFERModel<double>::init(cfg, 42);
  Rng rng(7);

  {
    SuiteResult r;
    r.name = "model/fuse_frames";
    r.max_rel = run_case({Tensord::randn({3, 2, 2, 2}, rng)},
                         [](Tape<double>& t, const std::vector<Val<double>>& v) {
                           return fuse_frames_graph(t, v[0], FusionKind::FrameDiff);
                         },
                         rng);
    out.push_back(r);
  }
  {
    SuiteResult r;
    r.name = "model/transformer_layer";
    Tensord weight = Tensord::randn({cfg.frames, cfg.token_dim}, rng);
    r.max_rel = run_model_case(
        model, {{"tokens", Tensord::randn({cfg.frames, cfg.token_dim}, rng)}},
        [&](BoundModel<double>& bm, const std::vector<Val<double>>& ex) {
          Val<double> enc = temporal_transformer_graph(bm, ex[0]);
          return sum_all(mul(enc, constant(*bm.tape, weight)));
        },
        [](const std::string& name) { return name.rfind("tf0.", 0) == 0; });
    out.push_back(r);
  }
  {
    SuiteResult r;
    r.name = "model/full";
    r.tol = 1e-4;
    Tensord clip = Tensord::randn({cfg.frames, cfg.in_channels, cfg.in_h, cfg.in_w}, rng);
    std::vector<int> target{1};
    LossConfig lcfg;
    // deep composition: some conv-weight gradients sit near 3e-7 while the
    // loss is O(1), so the default 1e-5 step leaves too much cancellation
    // noise; 3e-5 balances cancellation against truncation
    r.max_rel = run_model_case(
        model, {},
        [&](BoundModel<double>& bm, const std::vector<Val<double>>&) {
          ClipForward<double> cf = classify_clip_graph(bm, constant(*bm.tape, clip));
          return combined_loss(cf.logits_row, cf.aux_rows, target, lcfg);
        },
        nullptr, 3e-5);
    out.push_back(r);
  }
  return out;
}

inline std::vector<SuiteResult> gradcheck_all() {
  std::vector<SuiteResult> out = gradcheck_primitives();
  for (auto& r : gradcheck_blocks()) out.push_back(r);
  for (auto& r : gradcheck_losses()) out.push_back(r);
  for (auto& r : gradcheck_model()) out.push_back(r);
  return out;
}

}  // namespace ialgca
