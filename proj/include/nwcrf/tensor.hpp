#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "nwcrf/errors.hpp"

namespace nwcrf {

using Extents = std::vector<int64_t>;

inline std::string extents_str(const Extents& e) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < e.size(); ++i) os << (i ? "," : "") << e[i];
  os << ")";
  return os.str();
}

inline int64_t extents_numel(const Extents& e) {
  int64_t n = 1;
  for (int64_t d : e) n *= d;
  return n;
}

// Dense row-major n-d array of doubles. The single numeric carrier of the
// whole project; shapes are checked at operation boundaries, not per access.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Extents extents) : extents_(std::move(extents)) {
    validate_extents();
    data_.assign(static_cast<size_t>(extents_numel(extents_)), 0.0);
  }

  Tensor(Extents extents, std::vector<double> data)
      : extents_(std::move(extents)), data_(std::move(data)) {
    validate_extents();
    if (static_cast<int64_t>(data_.size()) != extents_numel(extents_))
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match extents " + extents_str(extents_));
  }

  static Tensor full(Extents extents, double v) {
    Tensor t(std::move(extents));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor identity(int64_t n) {
    Tensor t({n, n});
    for (int64_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  int64_t rank() const { return static_cast<int64_t>(extents_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  const Extents& extents() const { return extents_; }
  int64_t extent(int64_t i) const { return extents_[static_cast<size_t>(i)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * extents_[1] + j)]; }
  double at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * extents_[1] + j)]; }

  double& at(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * extents_[1] + j) * extents_[2] + k)];
  }
  double at(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * extents_[1] + j) * extents_[2] + k)];
  }

  double& at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return data_[static_cast<size_t>(((i * extents_[1] + j) * extents_[2] + k) * extents_[3] + l)];
  }
  double at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return data_[static_cast<size_t>(((i * extents_[1] + j) * extents_[2] + k) * extents_[3] + l)];
  }

  bool same_extents(const Tensor& o) const { return extents_ == o.extents_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Tensor reshaped(Extents extents) const {
    if (extents_numel(extents) != numel())
      throw ShapeError("reshape " + extents_str(extents_) + " -> " + extents_str(extents) +
                       " changes element count");
    return Tensor(std::move(extents), data_);
  }

 private:
  void validate_extents() const {
    for (int64_t d : extents_)
      if (d <= 0) throw ShapeError("nonpositive extent in " + extents_str(extents_));
  }

  Extents extents_;
  std::vector<double> data_;
};

inline void require_same_extents(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_extents(b))
    throw ShapeError(std::string(op) + ": extents " + extents_str(a.extents()) + " vs " +
                     extents_str(b.extents()));
}

// ---- plain (non-differentiable) tensor math, used by oracles, metrics and
// ---- the optimizer

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  require_same_extents(a, b, "add");
  Tensor out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  require_same_extents(a, b, "sub");
  Tensor out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
  return out;
}

inline Tensor operator*(double c, const Tensor& a) {
  Tensor out = a;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_extents(a, b, "max_abs_diff");
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_extents(b)) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<size_t>(a.numel())) == 0;
}

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// mappings below avoid std distributions, whose output is
// implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds, modulo-free enough for desk-scale ranges
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(gen_() % span);
  }

  double normal() {
    // Box-Muller on explicit uniform bits
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  std::mt19937_64 gen_;
};

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t mix_seed(uint64_t seed, const std::string& name) {
  uint64_t z = seed ^ fnv1a(name);
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace nwcrf
