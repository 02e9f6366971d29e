# %% [markdown]
# # Who sees what: the cloud/agent message exchange
#
# Agents never talk to each other. Every round the cloud sends agent i its
# perturbed Jacobian column and the current multipliers, the agent replies
# with its new state, and the cloud updates the multipliers from perturbed
# constraint values.

# %%
import io
import json

import numpy as np

from dpsaddle import config
from dpsaddle.cloudsim import run_simulation
from dpsaddle.saddle import run

cfg = config.seven_agent_preset()
cal = config.calibration(cfg)
log = io.StringIO()
sim = run_simulation(cfg.problem, cfg.schedule, cal, cfg.init, 3, seed=1, round_log=log)

# %% [markdown]
# The first round, as it would appear on the wire. `audit` fields are for
# inspection only; agents receive `payload`.

# %%
for line in log.getvalue().splitlines()[:3]:
    rec = json.loads(line)
    print(rec["direction"], rec["sender"], "->", rec["recipient"], rec["payload"])

# %% [markdown]
# In aggregate the exchange is the centralised iteration. Feeding the
# simulator's noise back into the centralised solver reproduces it bit for bit.

# %%
sim = run_simulation(cfg.problem, cfg.schedule, cal, cfg.init, 5000, seed=1, stride=500)
rep = run(cfg.problem, cfg.schedule, cal, cfg.init, 5000, stride=500, replay=sim.noise_log)
print("identical states:", np.array_equal(sim.x, rep.x) and np.array_equal(sim.mu, rep.mu))
