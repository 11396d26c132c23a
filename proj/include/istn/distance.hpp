#pragma once

// Exact Euclidean distance transform (separable lower-envelope algorithm of
// Felzenszwalb & Huttenlocher), used for signed distance encodings and ASD.

#include <cmath>
#include <limits>
#include <vector>

#include "istn/image.hpp"

namespace istn {

namespace detail {

inline void edt_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[k]) {
      v[k] = q;
      z[k + 1] = inf;
    } else {
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = inf;
    }
  }
  if (k < 0) {
    std::fill(d.begin(), d.end(), inf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double dq = q - v[j];
    d[q] = dq * dq + f[v[j]];
  }
}

}  // namespace detail

/// Euclidean distance (pixels) from each pixel centre to the nearest pixel
/// where `seeds` is true; +inf everywhere when there are no seeds.
inline Image distance_to(const std::vector<bool>& seeds, Shape2 shape) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const int h = shape.height, w = shape.width;
  Image sq(shape);
  for (std::size_t i = 0; i < shape.size(); ++i) sq[i] = seeds[i] ? 0.0 : inf;
  const int n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  for (int x = 0; x < w; ++x) {
    f.assign(h, 0.0);
    d.assign(h, 0.0);
    for (int y = 0; y < h; ++y) f[y] = sq(y, x);
    detail::edt_1d(f, d, v, z);
    for (int y = 0; y < h; ++y) sq(y, x) = d[y];
  }
  for (int y = 0; y < h; ++y) {
    f.assign(w, 0.0);
    d.assign(w, 0.0);
    for (int x = 0; x < w; ++x) f[x] = sq(y, x);
    detail::edt_1d(f, d, v, z);
    for (int x = 0; x < w; ++x) sq(y, x) = std::sqrt(d[x]);
  }
  return sq;
}

}  // namespace istn
