#pragma once

#include <string>
#include <vector>

#include "whc/rng.hpp"
#include "whc/tensor.hpp"

namespace whc {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

/// Parameter factory. Each tensor draws from its own sub-stream keyed by its
/// full name, so values do not depend on construction order.
///
/// Policy: weights ~ Normal(0, 0.02), biases 0, layer-norm gain 1 / shift 0.
template <typename T>
class Initializer {
 public:
  static constexpr double kWeightStd = 0.02;

  explicit Initializer(std::uint64_t seed) : seed_(seed) {}

  Tensor<T> normal(const std::string& name, Shape shape, double stddev = kWeightStd) const {
    SplitMix64 rng(substream_seed(seed_, name));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>(std::move(shape), std::move(v), true);
  }

  Tensor<T> zeros(Shape shape) const { return Tensor<T>::zeros(std::move(shape), true); }
  Tensor<T> ones(Shape shape) const { return Tensor<T>::full(std::move(shape), T(1), true); }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
};

/// Collects (name, tensor) pairs from any params struct exposing
/// `visit(prefix, F)`.
template <typename T, typename P>
ParamList<T> named_parameters(P& params, const std::string& prefix = "") {
  ParamList<T> out;
  params.visit(prefix, [&](const std::string& name, Tensor<T>& t) { out.push_back({name, t}); });
  return out;
}

template <typename T>
std::size_t parameter_count(const ParamList<T>& list) {
  std::size_t n = 0;
  for (const auto& p : list) n += p.tensor.numel();
  return n;
}

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace whc
