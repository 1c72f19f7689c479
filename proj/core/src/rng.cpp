#include "cradle/rng.hpp"

#include <cmath>

#include "cradle/errors.hpp"

namespace cradle {

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(splitmix64(a) ^ (0x9e3779b97f4a7c15ULL + b));
}

Rng Rng::substream(std::uint64_t seed, std::uint64_t stream) {
  return Rng(mix_seed(seed, stream));
}

double Rng::uniform() {
  // 53-bit mantissa shifted into (0,1): never returns an endpoint.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

double Rng::gamma(double shape, double scale) {
  if (shape <= 0.0 || scale <= 0.0) throw NumericError("gamma: nonpositive shape or scale");
  if (shape < 1.0) {
    // Boost to shape+1, then scale back by u^(1/shape).
    const double u = uniform();
    return gamma(shape + 1.0, scale) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v * scale;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v * scale;
  }
}

long long Rng::poisson(double mean) {
  if (mean < 0.0) throw NumericError("poisson: negative mean");
  long long total = 0;
  // Additivity keeps the multiplication method's product above underflow.
  while (mean > 400.0) {
    total += poisson(400.0);
    mean -= 400.0;
  }
  const double limit = std::exp(-mean);
  double prod = 1.0;
  long long k = 0;
  do {
    prod *= uniform();
    ++k;
  } while (prod > limit);
  return total + k - 1;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw NumericError("below: n must be positive");
  const std::uint64_t bound = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= bound);
  return x % n;
}

Eigen::ArrayXXd Rng::normal_array(Eigen::Index rows, Eigen::Index cols) {
  Eigen::ArrayXXd out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = normal();
  return out;
}

Eigen::ArrayXXd Rng::uniform_array(Eigen::Index rows, Eigen::Index cols) {
  Eigen::ArrayXXd out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = uniform();
  return out;
}

}  // namespace cradle
