#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "satmark/ndiff/ops.hpp"

namespace satmark::ndiff {

using NamedParams = std::vector<std::pair<std::string, TensorF*>>;
using ConstNamedParams = std::vector<std::pair<std::string, const TensorF*>>;

// Parameters live in float; forward passes can run in any scalar type. In
// float the parameters are bound as leaves (gradients accumulate into them),
// otherwise they are cast and recorded as constants.
template <typename Scalar>
Var<Scalar> bind(Tape<Scalar>& tape, TensorF& p) {
  if constexpr (std::is_same_v<Scalar, float>)
    return tape.leaf(p);
  else
    return tape.constant(p.cast<Scalar>());
}

template <typename Scalar>
Var<Scalar> bind(Tape<Scalar>& tape, const TensorF& p) {
  if constexpr (std::is_same_v<Scalar, float>)
    return tape.constant(p);
  else
    return tape.constant(p.cast<Scalar>());
}

struct Conv2d {
  TensorF weight;  // [out, in, k, k]
  TensorF bias;    // [out]
  int stride = 1;
  int padding = 0;

  Conv2d() = default;
  // He-normal weights scaled by `gain`, zero bias. Padding is "same" for stride 1.
  Conv2d(int in, int out, int k, int stride_, Rng& rng, double gain = 1.0)
      : weight(TensorF::normal({out, in, k, k}, rng, gain * std::sqrt(2.0 / (in * k * k)))),
        bias(TensorF::zeros({out})),
        stride(stride_),
        padding((k - 1) / 2) {}

  static Conv2d zeros(int in, int out, int k) {
    Conv2d c;
    c.weight = TensorF::zeros({out, in, k, k});
    c.bias = TensorF::zeros({out});
    c.padding = (k - 1) / 2;
    return c;
  }

  template <typename Scalar, typename Self>
  static Var<Scalar> apply(Self& self, const Var<Scalar>& x) {
    auto& tape = x.tape();
    return conv2d(x, bind(tape, self.weight), bind(tape, self.bias), self.stride, self.padding);
  }
  template <typename Scalar>
  Var<Scalar> operator()(const Var<Scalar>& x) {
    return apply<Scalar>(*this, x);
  }
  template <typename Scalar>
  Var<Scalar> operator()(const Var<Scalar>& x) const {
    return apply<Scalar>(*this, x);
  }

  void collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".weight", &weight);
    out.emplace_back(prefix + ".bias", &bias);
  }
  void collect(const std::string& prefix, ConstNamedParams& out) const {
    out.emplace_back(prefix + ".weight", &weight);
    out.emplace_back(prefix + ".bias", &bias);
  }
};

struct Linear {
  TensorF weight;  // [out, in]
  TensorF bias;    // [out]

  Linear() = default;
  Linear(int in, int out, Rng& rng, double gain = 1.0)
      : weight(TensorF::normal({out, in}, rng, gain * std::sqrt(1.0 / in))), bias(TensorF::zeros({out})) {}

  static Linear zeros(int in, int out) {
    Linear l;
    l.weight = TensorF::zeros({out, in});
    l.bias = TensorF::zeros({out});
    return l;
  }

  template <typename Scalar, typename Self>
  static Var<Scalar> apply(Self& self, const Var<Scalar>& x) {
    auto& tape = x.tape();
    return linear(x, bind(tape, self.weight), bind(tape, self.bias));
  }
  template <typename Scalar>
  Var<Scalar> operator()(const Var<Scalar>& x) {
    return apply<Scalar>(*this, x);
  }
  template <typename Scalar>
  Var<Scalar> operator()(const Var<Scalar>& x) const {
    return apply<Scalar>(*this, x);
  }

  void collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".weight", &weight);
    out.emplace_back(prefix + ".bias", &bias);
  }
  void collect(const std::string& prefix, ConstNamedParams& out) const {
    out.emplace_back(prefix + ".weight", &weight);
    out.emplace_back(prefix + ".bias", &bias);
  }
};

inline void set_requires_grad(const NamedParams& params, bool on) {
  for (auto& [name, p] : params) p->requires_grad = on;
}

}  // namespace satmark::ndiff
