#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "tracformer/tensor.hpp"

namespace tftest {

// |a-b| relative to the larger magnitude, floored so near-zero entries are
// compared absolutely.
inline double rel_err(double a, double b, double floor = 1e-2) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Central finite differences against the tape gradient, entry by entry.
// `forward` must recompute the scalar loss from the current contents of
// `inputs`; it runs under no tape for the FD evaluations.
inline double max_grad_rel_err(std::vector<tracformer::Tensor<double>*> inputs,
                               const std::function<tracformer::Tensor<double>()>& forward, double h = 1e-5) {
  using namespace tracformer;
  Tape<double> tape;
  std::vector<Tensor<double>> analytic;
  {
    TapeGuard<double> guard(tape);
    for (auto* in : inputs) tape.watch(*in);
    Tensor<double> loss = forward();
    tape.backward(loss);
    for (auto* in : inputs) analytic.push_back(tape.grad(*in));
  }

  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    Tensor<double>& in = *inputs[i];
    for (size_t j = 0; j < in.size(); ++j) {
      const double saved = in[j];
      in[j] = saved + h;
      const double fp = forward()[0];
      in[j] = saved - h;
      const double fm = forward()[0];
      in[j] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_err(analytic[i][j], fd));
    }
  }
  return worst;
}

inline tracformer::Tensor<double> random_tensor(std::vector<int> shape, tracformer::Rng& rng, double scl = 1.0) {
  tracformer::Tensor<double> t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * scl;
  return t;
}

template <typename S>
tracformer::Tensor<S> random_tensor_s(std::vector<int> shape, tracformer::Rng& rng, double scl = 1.0) {
  tracformer::Tensor<S> t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(rng.normal() * scl);
  return t;
}

inline std::vector<int> random_tokens(int T, int V, tracformer::Rng& rng, int lowest = 0) {
  std::vector<int> out(static_cast<size_t>(T));
  for (auto& t : out) t = lowest + static_cast<int>(rng.uniform_int(V - lowest));
  return out;
}

}  // namespace tftest
