# %% [markdown]
# # How much noise does privacy cost?
#
# Each agent receives a perturbed copy of its column of the constraint
# Jacobian, and the cloud perturbs the constraint values it uses for the
# multiplier update. The noise scale is the Lipschitz constant of the
# released map times the adjacency bound B times a constant kappa that
# depends only on (epsilon, delta).

# %%
import math

import numpy as np

from dpsaddle import config, privacy

cfg = config.seven_agent_preset()
print("kappa(0.05, ln 3) =", privacy.kappa(0.05, math.log(3)))

# %% [markdown]
# Lipschitz constants come from a grid search over the box. Only the
# variables a column actually depends on are sampled, so the constant
# columns (agents 1, 2 and 4) cost nothing and get no noise.

# %%
partials, kg = privacy.lipschitz_table(cfg.problem, grid_points_per_axis=201)
for i, k in enumerate(partials, start=1):
    print(f"agent {i}: K = {k:9.4f}")
print(f"constraint map: K_g = {kg:.3f}")

# %% [markdown]
# The resulting variances. Agents 6 and 7 pay for the quartic terms of the
# second constraint; the multiplier channel pays for everything at once.

# %%
cal = privacy.calibrate(partials, kg, cfg.privacy)
print(np.round(cal.variances, 4))
print("variance of the constraint-value noise:", round(cal.sigma_g**2, 4))
