#pragma once

#include <string>

#include "lvf/model.hpp"
#include "lvf/rng.hpp"
#include "lvf/tensor.hpp"

namespace lvf::test {

inline Tensor rand_t(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(static_cast<size_t>(shape_size(s)));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(s), std::move(d));
}

inline Tensor dot_with(const Tensor& t, const Tensor& w) {
  return sum_all(mul(t, w));
}

// Replace every parameter with small random values so gradient flow is not
// blocked by the zero-init layers; gains stay near 1 for norm stability.
inline void randomize_params(ParamStore& store, uint64_t seed, double amp = 0.2) {
  Rng rng(seed);
  for (auto& it : store.items) {
    bool is_gain = it.first.find("gain") != std::string::npos ||
                   it.first.find("norm") != std::string::npos;
    for (auto& v : it.second.data()) v = rng.uniform(-amp, amp) + (is_gain ? 1.0 : 0.0);
  }
}

inline bool same_values(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.size(); ++i)
    if (a.data()[static_cast<size_t>(i)] != b.data()[static_cast<size_t>(i)])
      return false;
  return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double d = std::abs(a.data()[static_cast<size_t>(i)] -
                        b.data()[static_cast<size_t>(i)]);
    if (d > m) m = d;
  }
  return m;
}

}  // namespace lvf::test
