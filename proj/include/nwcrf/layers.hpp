#pragma once

#include <string>

#include "nwcrf/autodiff.hpp"
#include "nwcrf/tensor.hpp"

namespace nwcrf {

template <class T>
struct ConvParamsT {
  T kernel;  // [k x k x Cin x Cout]
  T bias;    // [Cout]
};

template <class T>
struct LinearParamsT {
  T weight;  // [in x out]
  T bias;    // [out]
};

using ConvParams = ConvParamsT<Tensor>;
using ConvVars = ConvParamsT<Var>;
using LinearParams = LinearParamsT<Tensor>;
using LinearVars = LinearParamsT<Var>;

inline ConvVars lift(Tape& t, const ConvParams& p) {
  return ConvVars{t.leaf(p.kernel), t.leaf(p.bias)};
}
inline LinearVars lift(Tape& t, const LinearParams& p) {
  return LinearVars{t.leaf(p.weight), t.leaf(p.bias)};
}

inline Var conv2d(Var input, const ConvVars& p, int64_t stride = 1) {
  return conv2d(input, p.kernel, p.bias, stride);
}
inline Var linear(Var x, const LinearVars& p) { return linear(x, p.weight, p.bias); }

// Weights uniform in +-sqrt(1/fan_in), biases zero; every tensor gets its own
// stream keyed by (seed, name) so layouts can change without reshuffling
// unrelated draws.
inline Tensor init_weight(Extents extents, int64_t fan_in, uint64_t seed, const std::string& name) {
  Rng rng(mix_seed(seed, name));
  double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  Tensor t(std::move(extents));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

inline ConvParams init_conv(int64_t k, int64_t cin, int64_t cout, uint64_t seed,
                            const std::string& name) {
  return ConvParams{init_weight({k, k, cin, cout}, k * k * cin, seed, name + ".kernel"),
                    Tensor({cout})};
}

inline LinearParams init_linear(int64_t in, int64_t out, uint64_t seed, const std::string& name) {
  return LinearParams{init_weight({in, out}, in, seed, name + ".weight"), Tensor({out})};
}

template <class F>
void visit_params(ConvParams& p, const std::string& prefix, F&& f) {
  f(prefix + ".kernel", p.kernel);
  f(prefix + ".bias", p.bias);
}

template <class F>
void visit_params(LinearParams& p, const std::string& prefix, F&& f) {
  f(prefix + ".weight", p.weight);
  f(prefix + ".bias", p.bias);
}

// visit_vars mirrors visit_params member for member so tape gradients can be
// paired with parameter tensors by position.
template <class F>
void visit_vars(ConvVars& p, F&& f) {
  f(p.kernel);
  f(p.bias);
}

template <class F>
void visit_vars(LinearVars& p, F&& f) {
  f(p.weight);
  f(p.bias);
}

}  // namespace nwcrf
