# %% [markdown]
# # Finding the saddle point without noise
#
# The noiseless iteration doubles as an oracle for the saddle point. A
# smaller regularisation weight and a larger step than the private run
# make it settle in under a million steps.

# %%
import numpy as np

from dpsaddle import config

cfg = config.seven_agent_preset()
ref = config.reference_point(cfg)
print("converged:", ref.converged, "after", ref.iterations, "steps")
print("x_hat  =", np.round(ref.x_hat, 4))
print("mu_hat =", np.round(ref.mu_hat, 4))

# %% [markdown]
# Complementary slackness: active constraints are (numerically) zero, the
# second one is slack and its multiplier is exactly zero.

# %%
g = cfg.problem.constraint_values(ref.x_hat)
print("g(x_hat)          =", g)
print("mu_hat * g(x_hat) =", ref.mu_hat * g)

# %% [markdown]
# Agent 5 only appears in the slack constraint, so stationarity forces
# 6 (x5 + 3)^5 = 0, i.e. x5 = -3. The sixth-order valley is so flat that
# any finite run stops short of it: the gradient at x5 = -2.9 is about 6e-5.

# %%
for x5 in (-2.8, -2.9, -2.95):
    print(x5, cfg.problem.objective_gradient(5, x5))
