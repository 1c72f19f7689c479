#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>

namespace cradle {

/// Seeded random stream with portable samplers. All transforms (normal,
/// gamma, poisson) are implemented in-repo so that a given seed produces the
/// same stream on every platform; std distributions are not used.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent stream derived from (seed, stream) by splitmix64 mixing.
  static Rng substream(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on the open interval (0,1).
  double uniform();
  double normal();                              // standard normal (Box-Muller)
  double gamma(double shape, double scale);     // Marsaglia-Tsang
  long long poisson(double mean);
  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  Eigen::ArrayXXd normal_array(Eigen::Index rows, Eigen::Index cols);
  Eigen::ArrayXXd uniform_array(Eigen::Index rows, Eigen::Index cols);

  /// Deterministic Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// splitmix64 finalizer; used for deriving substream seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace cradle
