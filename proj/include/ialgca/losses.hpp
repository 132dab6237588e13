#pragma once

#include "ialgca/tape.hpp"

namespace ialgca {

struct LossConfig {
  double lambda = 0.1;      // weight of the intensity-aware term
  double aux_weight = 0.3;  // weight of each auxiliary-classifier CE term
  bool ial_on_aux = false;  // apply the intensity-aware term to aux heads too

  void validate() const {
    if (!(lambda >= 0) || !std::isfinite(lambda))
      throw ContractError(cat("lambda must be finite and >= 0, got ", lambda));
    if (!(aux_weight >= 0) || !std::isfinite(aux_weight))
      throw ContractError(cat("aux_weight must be finite and >= 0, got ", aux_weight));
  }
};

namespace detail {
template <class S>
void check_logits(Val<S> logits, const std::vector<int>& targets, const char* who) {
  const auto& t = logits.t();
  if (t.rank() != 2)
    throw ShapeError(cat(who, ": logits must be B x K, got ", shape_str(t.shape)));
  int k = t.dim(1);
  if (k < 2) throw ContractError(cat(who, ": needs K >= 2 classes, got ", k));
  if (static_cast<int>(targets.size()) != t.dim(0))
    throw ContractError(cat(who, ": ", targets.size(), " targets for batch of ", t.dim(0)));
  for (int tgt : targets)
    if (tgt < 0 || tgt >= k)
      throw ContractError(cat(who, ": target ", tgt, " out of range [0,", k, ")"));
}
}  // namespace detail

// Mean over the batch of -log softmax(logits)[target].
template <class S>
Val<S> cross_entropy(Val<S> logits, const std::vector<int>& targets) {
  detail::check_logits(logits, targets, "cross_entropy");
  Val<S> picked = gather_last(log(softmax_last(logits)), targets);
  return scalar_mul(mean_all(picked), -1.0);
}

// Per sample the largest non-target logit (ties to the lowest index) is
// selected as a hard competitor, and the loss is the two-way cross-entropy
// between the target logit and that competitor. Gradient therefore reaches
// exactly two logits per sample.
template <class S>
Val<S> intensity_aware_loss(Val<S> logits, const std::vector<int>& targets) {
  detail::check_logits(logits, targets, "intensity_aware_loss");
  const Tensor<S>& lt = logits.t();
  int b = lt.dim(0), k = lt.dim(1);
  std::vector<int> rival(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    int best = -1;
    for (int j = 0; j < k; ++j) {
      if (j == targets[static_cast<size_t>(i)]) continue;
      if (best < 0 || lt.at(i, j) > lt.at(i, best)) best = j;
    }
    rival[static_cast<size_t>(i)] = best;
  }
  Val<S> xt = reshape(gather_last(logits, targets), {b, 1});
  Val<S> xm = reshape(gather_last(logits, rival), {b, 1});
  Val<S> pair = concat_axis<S>({xt, xm}, 1);  // B x 2
  return cross_entropy(pair, std::vector<int>(static_cast<size_t>(b), 0));
}

// L = CE(main) + lambda * IAL(main) + aux_weight * sum CE(aux_i).
// With lambda == 0 and no aux heads this builds exactly the CE graph.
template <class S>
Val<S> combined_loss(Val<S> logits, const std::vector<Val<S>>& aux_logits,
                     const std::vector<int>& targets, const LossConfig& cfg) {
  cfg.validate();
  Val<S> total = cross_entropy(logits, targets);
  if (cfg.lambda > 0)
    total = add(total, scalar_mul(intensity_aware_loss(logits, targets), cfg.lambda));
  if (cfg.aux_weight > 0) {
    for (auto aux : aux_logits) {
      Val<S> term = cross_entropy(aux, targets);
      if (cfg.ial_on_aux && cfg.lambda > 0)
        term = add(term, scalar_mul(intensity_aware_loss(aux, targets), cfg.lambda));
      total = add(total, scalar_mul(term, cfg.aux_weight));
    }
  }
  return total;
}

}  // namespace ialgca
