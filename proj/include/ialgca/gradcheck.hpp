#pragma once

#include <cstring>
#include <functional>
#include <map>
#include <string>

#include "ialgca/param.hpp"

namespace ialgca {

namespace detail {
// FNV-1a over the raw parameter bytes; detects state mutation by the probed
// function, which would invalidate the central differences.
template <class S>
uint64_t param_checksum(const ParamSet<S>& params) {
  uint64_t h = 1469598103934665603ull;
  for (int i = 0; i < params.size(); ++i) {
    const auto& d = params[i].value.data;
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(d.data());
    for (size_t b = 0; b < static_cast<size_t>(d.size()) * sizeof(S); ++b) {
      h ^= bytes[b];
      h *= 1099511628211ull;
    }
  }
  return h;
}
}  // namespace detail

// Central-difference gradients of a scalar-valued function of the parameter
// set. The function must be deterministic and must not mutate the parameters;
// both are checked and violations raise OracleError.
inline std::map<std::string, Tensord> finite_diff_gradient(
    const std::function<double(const ParamSet<double>&)>& f, ParamSet<double>& params,
    double epsilon = 1e-5) {
  if (!(epsilon > 0)) throw ContractError(cat("finite_diff_gradient: epsilon must be > 0"));
  uint64_t sum0 = detail::param_checksum(params);
  double base0 = f(params);
  double base1 = f(params);
  if (std::memcmp(&base0, &base1, sizeof(double)) != 0)
    throw OracleError("probed function is non-deterministic across evaluations");
  if (detail::param_checksum(params) != sum0)
    throw OracleError("probed function mutated the parameter state");

  std::map<std::string, Tensord> grads;
  for (int i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    Tensord g = Tensord::zeros(p.value.shape);
    for (int64_t j = 0; j < p.value.numel(); ++j) {
      double old = p.value.data[j];
      p.value.data[j] = old + epsilon;
      double up = f(params);
      p.value.data[j] = old - epsilon;
      double down = f(params);
      p.value.data[j] = old;
      g.data[j] = (up - down) / (2.0 * epsilon);
    }
    grads[p.name] = std::move(g);
  }
  if (detail::param_checksum(params) != sum0)
    throw OracleError("parameter state changed while probing");
  return grads;
}

// Worst relative disagreement between an analytic gradient map and the
// central-difference oracle.
struct GradCheckResult {
  double max_rel = 0.0;
  std::string worst;  // "param[j]" of the worst entry

  void fold(const std::string& name, const Tensord& analytic, const Tensord& numeric) {
    if (!analytic.same_shape(numeric))
      throw ContractError(cat("gradcheck: shape mismatch for '", name, "'"));
    for (int64_t j = 0; j < analytic.numel(); ++j) {
      double e = rel_err(analytic.data[j], numeric.data[j]);
      if (e > max_rel) {
        max_rel = e;
        worst = cat(name, "[", j, "]");
      }
    }
  }
};

}  // namespace ialgca
