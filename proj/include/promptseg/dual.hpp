#pragma once

// Forward-mode dual numbers with a fixed number of tangent directions. Used
// for small closed-form functions of a handful of inputs (box parameterization
// and GIoU) whose branchy derivatives are easy to get wrong by hand.

#include <algorithm>
#include <array>

namespace promptseg {

template <int N>
struct Dual {
  double v = 0;
  std::array<double, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: constants promote implicitly

  static Dual seed(double value, int direction) {
    Dual x(value);
    x.d[direction] = 1.0;
    return x;
  }

  friend Dual operator+(Dual a, const Dual& b) {
    a.v += b.v;
    for (int i = 0; i < N; ++i) a.d[i] += b.d[i];
    return a;
  }
  friend Dual operator-(Dual a, const Dual& b) {
    a.v -= b.v;
    for (int i = 0; i < N; ++i) a.d[i] -= b.d[i];
    return a;
  }
  friend Dual operator*(const Dual& a, const Dual& b) {
    Dual r(a.v * b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
  }
  friend Dual operator/(const Dual& a, const Dual& b) {
    Dual r(a.v / b.v);
    for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
    return r;
  }
  friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
  friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
};

inline double value_of(double x) { return x; }
template <int N>
double value_of(const Dual<N>& x) {
  return x.v;
}

template <class T>
T min_of(const T& a, const T& b) {
  return value_of(b) < value_of(a) ? b : a;
}
template <class T>
T max_of(const T& a, const T& b) {
  return value_of(b) > value_of(a) ? b : a;
}
template <class T>
T clamp_to(const T& x, const T& lo, const T& hi) {
  return min_of(max_of(x, lo), hi);
}

}  // namespace promptseg
