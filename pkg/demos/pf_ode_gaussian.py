"""Push noise through the probability-flow ODE with an exact Gaussian score.

For data N(0, 1) the noised marginal at time t is N(0, 1 + sigma(t)^2), so
the score is known in closed form and the sampler can be checked against it.
"""

import math

import numpy as np
from scipy import stats

from hhoi.diffusion import NoiseSchedule
from hhoi.sampler import pf_ode_sample

sched = NoiseSchedule()


def score(x, t):
    return -x / (1.0 + sched.sigma(t) ** 2)


# the deterministic trajectory from x(1) = 10 shrinks by sqrt((1 + s_eps^2) / (1 + s_max^2))
x_eps = pf_ode_sample(score, sched, steps=500, x1=np.array([10.0]))[0]
exact = 10.0 * math.sqrt((1 + sched.sigma(sched.eps) ** 2) / (1 + sched.sigma_max**2))
print(f"x(1)=10 -> x(eps)={x_eps:.6f}  closed form {exact:.6f}")

for steps in (10, 50, 500):
    draws = pf_ode_sample(score, sched, np.random.default_rng(0), steps=steps, shape=(10_000,))
    sd = math.sqrt(1 + sched.sigma(sched.eps) ** 2)
    ks = stats.kstest(draws, stats.norm(0, sd).cdf).statistic
    print(f"{steps:4d} RK4 steps: sample std {draws.std():.4f}, KS vs N(0,{sd:.4f}^2) = {ks:.4f}")
