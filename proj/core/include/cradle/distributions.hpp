#pragma once

#include "cradle/rng.hpp"
#include "cradle/tensor.hpp"

namespace cradle {

/// mean + scale * noise; differentiable in mean and scale.
Var normal_rsample(const Var& mean, const Var& scale, const Array& noise);

/// Sum over all entries of KL[N(mean_q, scale_q) || N(mean_p, scale_p)]
/// for diagonal Gaussians. Scales must be strictly positive.
Var normal_kl(const Var& mean_q, const Var& scale_q, const Var& mean_p, const Var& scale_p);

/// Sum over all entries of KL[Bern(q) || Bern(p)]. Probabilities must lie in
/// the open interval (0,1); callers clamp at the boundary.
Var bernoulli_kl(const Var& q_prob, const Var& p_prob);

/// Sum over all entries of the Gamma-Poisson (negative binomial) log pmf with
/// mean `mean` and inverse dispersion `inv_dispersion` (scalar, shared across
/// entries). x must hold nonnegative integers.
Var gamma_poisson_log_prob(const Array& x, const Var& mean, const Var& inv_dispersion);

/// Concrete (relaxed Bernoulli) reparameterized sample:
/// sigmoid((logits + log u - log(1-u)) / temperature), u in (0,1).
/// With hard=true the forward pass rounds to {0,1} and gradients pass through
/// the relaxed sample (straight-through).
Var relaxed_bernoulli_rsample(const Var& logits, double temperature, const Array& uniform_noise,
                              bool hard = false);

/// Draws from the Gamma-Poisson with the same parameterization as the log pmf.
long long gamma_poisson_sample(double mean, double inv_dispersion, Rng& rng);

}  // namespace cradle
