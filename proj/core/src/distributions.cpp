#include "cradle/distributions.hpp"

#include <cmath>

#include "cradle/errors.hpp"

namespace cradle {

Var normal_rsample(const Var& mean, const Var& scale, const Array& noise) {
  if (noise.rows() != mean.rows() || noise.cols() != mean.cols())
    throw NumericError("normal_rsample: noise shape mismatch");
  return mean + scale * Var::constant(noise);
}

Var normal_kl(const Var& mean_q, const Var& scale_q, const Var& mean_p, const Var& scale_p) {
  if ((scale_q.value() <= 0.0).any() || (scale_p.value() <= 0.0).any())
    throw NumericError("normal_kl: nonpositive scale");
  Var term = log(scale_p / scale_q) +
             (square(scale_q) + square(mean_q - mean_p)) / (2.0 * square(scale_p)) - 0.5;
  return sum(term);
}

Var bernoulli_kl(const Var& q_prob, const Var& p_prob) {
  const auto in_open = [](const Array& a) { return (a > 0.0).all() && (a < 1.0).all(); };
  if (!in_open(q_prob.value()) || !in_open(p_prob.value()))
    throw NumericError("bernoulli_kl: probabilities must lie in (0,1)");
  Var q = q_prob, p = p_prob;
  return sum(q * log(q / p) + (1.0 - q) * log((1.0 - q) / (1.0 - p)));
}

Var gamma_poisson_log_prob(const Array& x, const Var& mean, const Var& inv_dispersion) {
  if ((x < 0.0).any()) throw NumericError("gamma_poisson_log_prob: negative count");
  if ((x != x.round()).any()) throw NumericError("gamma_poisson_log_prob: non-integer count");
  if ((mean.value() <= 0.0).any()) throw NumericError("gamma_poisson_log_prob: nonpositive mean");
  if (inv_dispersion.value().size() != 1 || inv_dispersion.scalar() <= 0.0)
    throw NumericError("gamma_poisson_log_prob: inverse dispersion must be a positive scalar");

  Var xc = Var::constant(x);
  Array xg = x.unaryExpr([](double v) { return std::lgamma(v + 1.0); });
  const Var& th = inv_dispersion;
  Var ll = lgamma(xc + th) - lgamma(th) - Var::constant(xg) +
           th * (log(th) - log(th + mean)) + xc * (log(mean) - log(th + mean));
  return sum(ll);
}

Var relaxed_bernoulli_rsample(const Var& logits, double temperature, const Array& uniform_noise,
                              bool hard) {
  if (temperature <= 0.0) throw NumericError("relaxed_bernoulli_rsample: temperature <= 0");
  if ((uniform_noise <= 0.0).any() || (uniform_noise >= 1.0).any())
    throw NumericError("relaxed_bernoulli_rsample: noise must lie in (0,1)");
  Array logistic = (uniform_noise.log() - (1.0 - uniform_noise).log());
  Var y = sigmoid((logits + Var::constant(logistic)) / temperature);
  return hard ? straight_through_round(y) : y;
}

long long gamma_poisson_sample(double mean, double inv_dispersion, Rng& rng) {
  if (mean < 0.0 || inv_dispersion <= 0.0)
    throw NumericError("gamma_poisson_sample: invalid parameters");
  if (mean == 0.0) return 0;
  const double lambda = rng.gamma(inv_dispersion, mean / inv_dispersion);
  return rng.poisson(lambda);
}

}  // namespace cradle
