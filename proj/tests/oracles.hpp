#pragma once

// Reference implementations written independently of the library, in long
// double and with different formulas where possible.

#include <cmath>
#include <numbers>
#include <random>
#include <vector>

namespace oracle {

inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) s += static_cast<long double>(p[i]) * (std::log(static_cast<long double>(p[i])) -
                                                          std::log(static_cast<long double>(q[i])));
  return static_cast<double>(s);
}

inline double js(const std::vector<double>& p, const std::vector<double>& q) {
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const long double a = p[i], b = q[i], m = (a + b) / 2;
    if (a > 0) s += a * std::log2(a / m);
    if (b > 0) s += b * std::log2(b / m);
  }
  return static_cast<double>(s / 2);
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  long double m = z[0];
  for (double x : z) m = std::max<long double>(m, x);
  long double s = 0;
  for (double x : z) s += std::exp(x - m);
  std::vector<double> out;
  for (double x : z) out.push_back(static_cast<double>(std::exp(x - m) / s));
  return out;
}

inline std::vector<double> normalize(const std::vector<double>& r, double eps) {
  long double mean = 0, sq = 0;
  for (double x : r) mean += x;
  mean /= r.size();
  for (double x : r) sq += (x - mean) * (x - mean);
  const long double sd = std::sqrt(sq / r.size());
  std::vector<double> out;
  for (double x : r) out.push_back(sd == 0 ? 0.0 : static_cast<double>((x - mean) / (sd + eps)));
  return out;
}

// Clockwise quarter turn written as a gather: new[i][j] = old[k-1-j][i].
inline std::vector<int> rotate90(const std::vector<int>& g, int k) {
  std::vector<int> out(g.size());
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) out[i * k + j] = g[(k - 1 - j) * k + i];
  return out;
}

inline std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n) {
  std::gamma_distribution<double> g(1.0, 1.0);
  std::vector<double> p(n);
  double s = 0;
  for (double& x : p) s += (x = g(rng) + 1e-6);
  for (double& x : p) x /= s;
  return p;
}

}  // namespace oracle
