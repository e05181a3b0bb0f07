#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>

// Contract checks. A failed precondition is a programming error, not a
// recoverable condition, so it aborts with the failing expression.
#define IESRGS_EXPECTS(cond, msg)                                                   \
  do {                                                                              \
    if (!(cond)) {                                                                  \
      std::fprintf(stderr, "iesrgs: contract violation: %s (%s) at %s:%d\n", msg,   \
                   #cond, __FILE__, __LINE__);                                      \
      std::abort();                                                                 \
    }                                                                               \
  } while (0)

namespace iesrgs {

struct Vec2 {
  double x{0}, y{0};

  constexpr double& operator[](int i) { return i == 0 ? x : y; }
  constexpr double operator[](int i) const { return i == 0 ? x : y; }
};

struct Vec3 {
  double x{0}, y{0}, z{0};

  constexpr double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  constexpr double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }

  constexpr Vec3& operator+=(const Vec3& o) {
    x += o.x; y += o.y; z += o.z;
    return *this;
  }
  constexpr Vec3& operator-=(const Vec3& o) {
    x -= o.x; y -= o.y; z -= o.z;
    return *this;
  }
  constexpr Vec3& operator*=(double s) {
    x *= s; y *= s; z *= s;
    return *this;
  }
  friend constexpr Vec3 operator+(Vec3 a, const Vec3& b) { return a += b; }
  friend constexpr Vec3 operator-(Vec3 a, const Vec3& b) { return a -= b; }
  friend constexpr Vec3 operator*(Vec3 a, double s) { return a *= s; }
  friend constexpr Vec3 operator*(double s, Vec3 a) { return a *= s; }
  friend constexpr bool operator==(const Vec3&, const Vec3&) = default;
};

constexpr double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

/// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{};

  constexpr double& operator()(int r, int c) { return m[r * 3 + c]; }
  constexpr double operator()(int r, int c) const { return m[r * 3 + c]; }

  static constexpr Mat3 identity() {
    Mat3 I;
    I(0, 0) = I(1, 1) = I(2, 2) = 1.0;
    return I;
  }
  static constexpr Mat3 diag(const Vec3& d) {
    Mat3 D;
    D(0, 0) = d.x; D(1, 1) = d.y; D(2, 2) = d.z;
    return D;
  }

  constexpr Mat3 transposed() const {
    Mat3 t;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  constexpr double det() const {
    const auto& a = *this;
    return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
           a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
           a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
  }

  /// Inverse via the adjugate. Caller guarantees det != 0.
  constexpr Mat3 inverse() const {
    const auto& a = *this;
    const double inv_det = 1.0 / det();
    Mat3 r;
    r(0, 0) = (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) * inv_det;
    r(0, 1) = (a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2)) * inv_det;
    r(0, 2) = (a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1)) * inv_det;
    r(1, 0) = (a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2)) * inv_det;
    r(1, 1) = (a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0)) * inv_det;
    r(1, 2) = (a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2)) * inv_det;
    r(2, 0) = (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0)) * inv_det;
    r(2, 1) = (a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1)) * inv_det;
    r(2, 2) = (a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0)) * inv_det;
    return r;
  }

  constexpr Mat3& operator+=(const Mat3& o) {
    for (int i = 0; i < 9; ++i) m[i] += o.m[i];
    return *this;
  }
  constexpr Mat3& operator*=(double s) {
    for (auto& v : m) v *= s;
    return *this;
  }
  friend constexpr Mat3 operator+(Mat3 a, const Mat3& b) { return a += b; }
  friend constexpr Mat3 operator-(Mat3 a, const Mat3& b) {
    for (int i = 0; i < 9; ++i) a.m[i] -= b.m[i];
    return a;
  }
  friend constexpr Mat3 operator*(Mat3 a, double s) { return a *= s; }
  friend constexpr Mat3 operator*(const Mat3& a, const Mat3& b) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
        r(i, j) = s;
      }
    return r;
  }
  friend constexpr Vec3 operator*(const Mat3& a, const Vec3& v) {
    return {a(0, 0) * v.x + a(0, 1) * v.y + a(0, 2) * v.z,
            a(1, 0) * v.x + a(1, 1) * v.y + a(1, 2) * v.z,
            a(2, 0) * v.x + a(2, 1) * v.y + a(2, 2) * v.z};
  }
  friend constexpr bool operator==(const Mat3&, const Mat3&) = default;
};

/// Symmetric 2x2 matrix [[a, b], [b, c]].
struct Sym2 {
  double a{0}, b{0}, c{0};

  constexpr double det() const { return a * c - b * b; }
  constexpr Sym2 inverse() const {
    const double inv = 1.0 / det();
    return {c * inv, -b * inv, a * inv};
  }
  /// Largest eigenvalue.
  double max_eigenvalue() const {
    const double mid = 0.5 * (a + c);
    const double disc = std::sqrt(std::max(0.0, mid * mid - det()));
    return mid + disc;
  }
};

/// Unit quaternion (w, x, y, z) for rotations.
struct Quat {
  double w{1}, x{0}, y{0}, z{0};

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  Quat normalized() const {
    const double n = norm();
    return {w / n, x / n, y / n, z / n};
  }
  friend constexpr Quat operator*(const Quat& a, const Quat& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
  }
  friend constexpr bool operator==(const Quat&, const Quat&) = default;

  static Quat from_axis_angle(const Vec3& axis, double angle) {
    const double n = iesrgs::norm(axis);
    const double s = std::sin(0.5 * angle) / n;
    return {std::cos(0.5 * angle), axis.x * s, axis.y * s, axis.z * s};
  }
};

/// Rotation matrix of an already-normalized quaternion.
constexpr Mat3 rotation_matrix(const Quat& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 R;
  R(0, 0) = 1 - 2 * (y * y + z * z);
  R(0, 1) = 2 * (x * y - w * z);
  R(0, 2) = 2 * (x * z + w * y);
  R(1, 0) = 2 * (x * y + w * z);
  R(1, 1) = 1 - 2 * (x * x + z * z);
  R(1, 2) = 2 * (y * z - w * x);
  R(2, 0) = 2 * (x * z - w * y);
  R(2, 1) = 2 * (y * z + w * x);
  R(2, 2) = 1 - 2 * (x * x + y * y);
  return R;
}

/// Pulls a gradient w.r.t. rotation_matrix(q) back onto q's components.
constexpr Quat rotation_matrix_vjp(const Quat& q, const Mat3& g) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Quat d;
  d.w = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  d.x = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) +
             z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2));
  d.y = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
             w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2));
  d.z = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) +
             y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
  return d;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double softplus(double x) {
  return x > 20.0 ? x : std::log1p(std::exp(x));
}
inline double softplus_inverse(double y) {
  return y > 20.0 ? y : std::log(std::expm1(y));
}

}  // namespace iesrgs
