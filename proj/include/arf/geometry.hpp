#pragma once

#include <array>
#include <cmath>

namespace arf {

template <typename T>
struct Vec3 {
  T x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}

  T& operator[](int i) { return (&x)[i]; }
  T operator[](int i) const { return (&x)[i]; }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(T s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(T s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }

  T dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  T norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const { T n = norm(); return {x / n, y / n, z / n}; }
};

using Vec3f = Vec3<float>;
using Vec3d = Vec3<double>;

// Row-major 3x3 matrix.
template <typename T>
struct Mat3 {
  std::array<T, 9> m{};

  static Mat3 identity() {
    Mat3 r;
    r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    return r;
  }
  static Mat3 zero() { return Mat3{}; }
  static Mat3 diagonal(T a, T b, T c) {
    Mat3 r;
    r.m = {a, 0, 0, 0, b, 0, 0, 0, c};
    return r;
  }
  static Mat3 from_columns(const Vec3<T>& c0, const Vec3<T>& c1, const Vec3<T>& c2) {
    Mat3 r;
    r.m = {c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z};
    return r;
  }

  T& operator()(int r, int c) { return m[r * 3 + c]; }
  T operator()(int r, int c) const { return m[r * 3 + c]; }

  Vec3<T> operator*(const Vec3<T>& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        T s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    return r;
  }
  Mat3 operator+(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] + o.m[i];
    return r;
  }
  Mat3 operator-(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] - o.m[i];
    return r;
  }
  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
  Vec3<T> column(int c) const { return {m[c], m[3 + c], m[6 + c]}; }

  T max_abs() const {
    T v = 0;
    for (T e : m) v = std::max(v, std::abs(e));
    return v;
  }
};

using Mat3f = Mat3<float>;
using Mat3d = Mat3<double>;

struct Aabb {
  Vec3f min{-1.f, -1.f, -1.f};
  Vec3f max{1.f, 1.f, 1.f};

  bool contains(const Vec3f& p) const {
    return p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y &&
           p.z >= min.z && p.z <= max.z;
  }
  Vec3f extent() const { return max - min; }
};

}  // namespace arf
