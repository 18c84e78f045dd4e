#pragma once

#include <array>
#include <cmath>
#include <cstddef>

namespace difftraffic {

/// Two-component column vector. Used for (rho, y) cell states, (p, v)
/// vehicle states and their adjoints.
struct Vec2 {
  std::array<double, 2> v{0.0, 0.0};

  constexpr Vec2() = default;
  constexpr Vec2(double a, double b) : v{a, b} {}

  constexpr double& operator[](std::size_t i) { return v[i]; }
  constexpr double operator[](std::size_t i) const { return v[i]; }

  constexpr Vec2& operator+=(const Vec2& o) {
    v[0] += o.v[0];
    v[1] += o.v[1];
    return *this;
  }
  constexpr Vec2& operator-=(const Vec2& o) {
    v[0] -= o.v[0];
    v[1] -= o.v[1];
    return *this;
  }
  constexpr Vec2& operator*=(double s) {
    v[0] *= s;
    v[1] *= s;
    return *this;
  }

  friend constexpr Vec2 operator+(Vec2 a, const Vec2& b) { return a += b; }
  friend constexpr Vec2 operator-(Vec2 a, const Vec2& b) { return a -= b; }
  friend constexpr Vec2 operator*(double s, Vec2 a) { return a *= s; }
  friend constexpr Vec2 operator*(Vec2 a, double s) { return a *= s; }
  friend constexpr bool operator==(const Vec2&, const Vec2&) = default;

  constexpr double dot(const Vec2& o) const { return v[0] * o.v[0] + v[1] * o.v[1]; }
  double norm() const { return std::hypot(v[0], v[1]); }
  double max_abs() const { return std::fmax(std::fabs(v[0]), std::fabs(v[1])); }
};

/// Row-major 2x2 matrix.
struct Mat2 {
  std::array<double, 4> m{0.0, 0.0, 0.0, 0.0};

  constexpr Mat2() = default;
  constexpr Mat2(double a00, double a01, double a10, double a11) : m{a00, a01, a10, a11} {}

  static constexpr Mat2 identity() { return {1.0, 0.0, 0.0, 1.0}; }
  static constexpr Mat2 zero() { return {}; }
  /// Matrix whose columns are `c0` and `c1`.
  static constexpr Mat2 from_columns(const Vec2& c0, const Vec2& c1) {
    return {c0[0], c1[0], c0[1], c1[1]};
  }
  static constexpr Mat2 from_rows(const Vec2& r0, const Vec2& r1) {
    return {r0[0], r0[1], r1[0], r1[1]};
  }

  constexpr double& operator()(std::size_t r, std::size_t c) { return m[2 * r + c]; }
  constexpr double operator()(std::size_t r, std::size_t c) const { return m[2 * r + c]; }

  constexpr Vec2 row(std::size_t r) const { return {m[2 * r], m[2 * r + 1]}; }
  constexpr Vec2 col(std::size_t c) const { return {m[c], m[2 + c]}; }

  constexpr Mat2 transposed() const { return {m[0], m[2], m[1], m[3]}; }

  constexpr Mat2& operator+=(const Mat2& o) {
    for (std::size_t i = 0; i < 4; ++i) m[i] += o.m[i];
    return *this;
  }
  constexpr Mat2& operator-=(const Mat2& o) {
    for (std::size_t i = 0; i < 4; ++i) m[i] -= o.m[i];
    return *this;
  }
  constexpr Mat2& operator*=(double s) {
    for (auto& x : m) x *= s;
    return *this;
  }

  friend constexpr Mat2 operator+(Mat2 a, const Mat2& b) { return a += b; }
  friend constexpr Mat2 operator-(Mat2 a, const Mat2& b) { return a -= b; }
  friend constexpr Mat2 operator*(double s, Mat2 a) { return a *= s; }
  friend constexpr Mat2 operator*(Mat2 a, double s) { return a *= s; }
  friend constexpr bool operator==(const Mat2&, const Mat2&) = default;

  friend constexpr Mat2 operator*(const Mat2& a, const Mat2& b) {
    return {a.m[0] * b.m[0] + a.m[1] * b.m[2], a.m[0] * b.m[1] + a.m[1] * b.m[3],
            a.m[2] * b.m[0] + a.m[3] * b.m[2], a.m[2] * b.m[1] + a.m[3] * b.m[3]};
  }
  friend constexpr Vec2 operator*(const Mat2& a, const Vec2& x) {
    return {a.m[0] * x[0] + a.m[1] * x[1], a.m[2] * x[0] + a.m[3] * x[1]};
  }

  /// Computes `transpose(*this) * x` without forming the transpose.
  constexpr Vec2 transpose_times(const Vec2& x) const {
    return {m[0] * x[0] + m[2] * x[1], m[1] * x[0] + m[3] * x[1]};
  }

  double max_abs() const {
    double r = 0.0;
    for (double x : m) r = std::fmax(r, std::fabs(x));
    return r;
  }
};

}  // namespace difftraffic
