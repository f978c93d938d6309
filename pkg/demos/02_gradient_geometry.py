"""
What the likelihood asks of means and variances
===============================================

Three one-dimensional triplets: one correctly ordered, one wrongly ordered
and one where positive and negative are equally far from the anchor. For
each we print the descent direction of the negative log-likelihood on every
mean and variance, then the triplet probability as a function of the margin.
"""

import numpy as np

from bayes_triplet import GaussianEmbedding, Triplet, nll_gradients, tau_moments, triplet_probability


def triplet(mus, variances):
    return Triplet(*(GaussianEmbedding(np.array([m]), v) for m, v in zip(mus, variances)))


scenarios = {
    "correct": ([0.0, -0.5, 2.0], [0.1, 0.1, 0.1]),
    "wrong": ([0.0, -2.0, 0.5], [0.1, 0.1, 0.1]),
    "equal": ([0.0, -1.0, 1.0], [0.1, 0.3, 0.1]),
}

# %% Descent directions
# A negative entry means descent moves the quantity left (or shrinks the
# variance); the positive always moves toward the anchor and the negative away.
print(f"{'scenario':>8} {'P(tau<0)':>9} | {'-dmu_a':>8} {'-dmu_p':>8} {'-dmu_n':>8} | {'-dvar_a':>8} {'-dvar_p':>8} {'-dvar_n':>8}")
for name, (mus, variances) in scenarios.items():
    t = triplet(mus, variances)
    g = nll_gradients(t)
    p = triplet_probability(tau_moments(t))
    row = [-g.d_mu_a[0], -g.d_mu_p[0], -g.d_mu_n[0], -g.d_var_a, -g.d_var_p, -g.d_var_n]
    print(f"{name:>8} {p:9.4f} | " + " ".join(f"{v:8.3f}" for v in row[:3]) + " | " + " ".join(f"{v:8.3f}" for v in row[3:]))

# In the correctly ordered case every variance shrinks: being confident about
# a satisfied constraint raises its probability. In the wrong case descent
# grows variance instead, hedging against a violated constraint.

# %% Probability against the margin
print("\nP(tau < -m) for the correct scenario")
mo = tau_moments(triplet(*scenarios["correct"]))
for m in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0):
    print(f"  m={m:4.1f}  {triplet_probability(mo, m):.4f}")
