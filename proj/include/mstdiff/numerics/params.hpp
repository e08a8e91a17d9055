#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <unordered_map>
#include <vector>

#include "mstdiff/numerics/autodiff.hpp"
#include "mstdiff/numerics/rng.hpp"
#include "mstdiff/numerics/tensor.hpp"

namespace mstdiff {

/// Ordered, named collection of trainable tensors.
template <class T>
class ParamSet {
 public:
  std::size_t add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    index_[name] = values_.size();
    names_.push_back(name);
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  std::size_t size() const noexcept { return values_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::string& name(std::size_t i) const { return names_.at(i); }

  Tensor<T>& operator[](std::size_t i) { return values_.at(i); }
  const Tensor<T>& operator[](std::size_t i) const { return values_.at(i); }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LookupError("unknown parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) { return values_[index(name)]; }
  const Tensor<T>& at(const std::string& name) const { return values_[index(name)]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  /// Leaf variables on `tape`, one per parameter, in order.
  std::vector<ad::Var<T>> bind(ad::Tape<T>& tape) const {
    std::vector<ad::Var<T>> out;
    out.reserve(values_.size());
    for (const auto& v : values_) out.push_back(tape.leaf(v));
    return out;
  }

  /// Gradients of bound leaves (zeros where the loss did not reach).
  std::vector<Tensor<T>> gradients(ad::Tape<T>& tape, const std::vector<ad::Var<T>>& bound) const {
    std::vector<Tensor<T>> out;
    out.reserve(bound.size());
    for (std::size_t i = 0; i < bound.size(); ++i) {
      if (tape.has_grad(bound[i].id))
        out.push_back(tape.grad(bound[i].id));
      else
        out.push_back(Tensor<T>(values_[i].shape()));
    }
    return out;
  }

  /// FNV-1a over names, shapes and raw bytes. Used to assert frozen weights.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (std::size_t i = 0; i < values_.size(); ++i) {
      mix(names_[i].data(), names_[i].size());
      for (auto d : values_[i].shape()) mix(&d, sizeof d);
      mix(values_[i].data().data(), values_[i].size() * sizeof(T));
    }
    return h;
  }

  bool all_finite() const {
    for (const auto& v : values_)
      if (!v.all_finite()) return false;
    return true;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (std::size_t i = 0; i < values_.size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gaussian init scaled by 1/sqrt(fan_in).
template <class T>
Tensor<T> init_weight(Shape shape, Rng& rng, double gain = 1.0) {
  Tensor<T> out(std::move(shape));
  const double fan_in = static_cast<double>(out.rows());
  const double sd = gain / std::sqrt(fan_in);
  for (auto& v : out.storage()) v = static_cast<T>(rng.normal() * sd);
  return out;
}

template <class T>
Tensor<T> init_normal(Shape shape, Rng& rng, double sd) {
  Tensor<T> out(std::move(shape));
  for (auto& v : out.storage()) v = static_cast<T>(rng.normal() * sd);
  return out;
}

template <class T>
double global_norm(const std::vector<Tensor<T>>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (auto v : g.data()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

/// Adaptive moment estimation with optional global gradient-norm clipping.
template <class T>
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // <= 0 disables clipping
  };

  Adam() = default;
  explicit Adam(Options opt) : opt_(opt) {}

  const Options& options() const noexcept { return opt_; }
  std::int64_t steps() const noexcept { return t_; }

  /// Applies one update; returns the pre-clip gradient norm.
  double step(ParamSet<T>& params, std::vector<Tensor<T>> grads) {
    if (grads.size() != params.size()) throw ShapeError("Adam: gradient count mismatch");
    if (m_.empty()) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_.emplace_back(params[i].shape());
        v_.emplace_back(params[i].shape());
      }
    }
    const double norm = global_norm(grads);
    if (!std::isfinite(norm)) throw NumericError("Adam: non-finite gradient norm");
    double factor = 1.0;
    if (opt_.clip_norm > 0 && norm > opt_.clip_norm) factor = opt_.clip_norm / norm;
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      auto& m = m_[i];
      auto& v = v_[i];
      const auto& g = grads[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = static_cast<double>(g[k]) * factor;
        m[k] = static_cast<T>(opt_.beta1 * m[k] + (1 - opt_.beta1) * gk);
        v[k] = static_cast<T>(opt_.beta2 * v[k] + (1 - opt_.beta2) * gk * gk);
        const double mh = m[k] / bc1, vh = v[k] / bc2;
        p[k] = static_cast<T>(p[k] - opt_.lr * mh / (std::sqrt(vh) + opt_.eps));
      }
    }
    return norm;
  }

 private:
  Options opt_;
  std::int64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace mstdiff
