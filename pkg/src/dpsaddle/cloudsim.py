"""
Message-level simulation of the cloud architecture.

Agents never talk to each other. Each round the cloud sends agent ``i`` a
privatised copy of ``dg/dx_i`` together with the current multipliers; the
agent updates its own state and reports it back, while the cloud updates the
multipliers from a privatised evaluation of ``g``. Rounds are synchronous and
lossless, so the aggregate iteration is the centralised one in
:mod:`dpsaddle.saddle`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import expr as ex
from .privacy import GaussianMechanism, NoiseCalibration
from .problem import Problem
from .saddle import NoiseLog, ReferencePoint, RunTrace, SaddleState, make_mechanisms
from .schedule import Schedule

__all__ = [
    "CloudToAgentMsg",
    "AgentToCloudMsg",
    "AgentNode",
    "CloudNode",
    "RoundLog",
    "SimulationError",
    "run_round",
    "run_simulation",
    "build_network",
]


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CloudToAgentMsg:
    k: int
    recipient: int
    partial: tuple  # privatised dg/dx_i, length m
    mu: tuple  # multipliers mu^c(k)


@dataclass(frozen=True)
class AgentToCloudMsg:
    k: int
    sender: int
    x: float  # x_i(k+1)


class AgentNode:
    """Agent ``i``: its own objective, its own state and the public schedule/bounds."""

    def __init__(self, agent_id: int, objective: ex.Expression, x0: float, schedule: Schedule, lower: float, upper: float):
        others = ex.variables(objective) - {agent_id}
        if others:
            raise SimulationError(f"agent {agent_id}'s objective references other agents' states")
        self.id = agent_id
        self.objective = objective
        self.schedule = schedule
        self.lower = float(lower)
        self.upper = float(upper)
        self.x = float(x0)
        dfi = ex.differentiate(objective, agent_id)
        self._df = ex.compile_functions([dfi], agent_id)
        self._pad = [0.0] * agent_id

    def derivative(self, xi: float) -> float:
        pt = self._pad
        pt[self.id - 1] = xi
        return self._df(pt)[0]

    def initial_message(self) -> AgentToCloudMsg:
        return AgentToCloudMsg(-1, self.id, self.x)

    def update(self, msg: CloudToAgentMsg) -> AgentToCloudMsg:
        if msg.recipient != self.id:
            raise SimulationError(f"agent {self.id} received a message for agent {msg.recipient}")
        gam = self.schedule.gamma_at(msg.k)
        al = self.schedule.alpha_at(msg.k)
        xi = self.x
        a = self.derivative(xi)
        for c, mu in zip(msg.partial, msg.mu):
            a = a + c * mu
        v = xi - gam * (a + al * xi)
        self.x = self.lower if v < self.lower else (self.upper if v > self.upper else v)
        return AgentToCloudMsg(msg.k, self.id, self.x)


class CloudNode:
    """Trusted aggregator holding ``g``, all columns, ``x^c`` and ``mu^c``."""

    def __init__(
        self,
        problem: Problem,
        schedule: Schedule,
        mu0: Sequence[float],
        partial_mechs: Sequence[GaussianMechanism],
        g_mech: GaussianMechanism,
    ):
        self.problem = problem
        self.schedule = schedule
        self.n, self.m = problem.n, problem.m
        self.mu = [float(v) for v in mu0]
        self.xc: list | None = None
        self.partial_mechs = list(partial_mechs)
        self.g_mech = g_mech
        if len(self.partial_mechs) != self.n:
            raise SimulationError("the cloud needs one partial mechanism per agent")
        self._kernel = ex.compile_functions(list(problem.constraints) + [e for row in problem.jacobian_exprs for e in row], problem.n)

    def install(self, msgs: Iterable[AgentToCloudMsg]):
        got = {msg.sender: msg.x for msg in msgs}
        missing = [i for i in range(1, self.n + 1) if i not in got]
        if missing:
            raise SimulationError(f"missing state from agent(s) {missing}; round aborted")
        self.xc = [float(got[i]) for i in range(1, self.n + 1)]

    def _evaluate(self):
        vals = self._kernel(self.xc)
        m, n = self.m, self.n
        g = vals[:m]
        jac = vals[m:]
        cols = [[float(jac[j * n + i]) for j in range(m)] for i in range(n)]
        return [float(v) for v in g], cols

    def outbound(self, k: int):
        """Privatised columns for every agent; returns ``(messages, raw columns, noises, raw g)``."""
        if self.xc is None:
            raise SimulationError("the cloud has not received the agents' states")
        g, cols = self._evaluate()
        mu = tuple(self.mu)
        msgs, noises = [], []
        for i in range(1, self.n + 1):
            w = self.partial_mechs[i - 1].draw().tolist()
            noises.append(w)
            noisy = tuple(c + wj for c, wj in zip(cols[i - 1], w))
            msgs.append(CloudToAgentMsg(k, i, noisy, mu))
        return msgs, cols, noises, g

    def update_multipliers(self, k: int, g: Sequence[float]):
        wg = self.g_mech.draw().tolist()
        gam = self.schedule.gamma_at(k)
        al = self.schedule.alpha_at(k)
        new = []
        for mu_j, g_j, w_j in zip(self.mu, g, wg):
            d = mu_j + gam * ((g_j + w_j) - al * mu_j)
            new.append(d if d > 0.0 else 0.0)
        self.mu = new
        return wg


@dataclass
class RoundLog:
    """Everything that crossed the network in one round, plus the noises drawn."""

    k: int
    to_agents: list
    to_cloud: list
    raw_columns: list
    partial_noise: list
    g_noise: list
    mu_next: list

    def records(self) -> list[dict]:
        out = []
        for msg, raw, w in zip(self.to_agents, self.raw_columns, self.partial_noise):
            out.append(
                {
                    "k": self.k,
                    "direction": "cloud->agent",
                    "sender": "cloud",
                    "recipient": msg.recipient,
                    "payload": {"partial": list(msg.partial), "mu": list(msg.mu)},
                    "audit": {"raw_partial": raw, "noise": w},
                }
            )
        for msg in self.to_cloud:
            out.append(
                {
                    "k": self.k,
                    "direction": "agent->cloud",
                    "sender": msg.sender,
                    "recipient": "cloud",
                    "payload": {"x": msg.x},
                }
            )
        out.append(
            {
                "k": self.k,
                "direction": "cloud-internal",
                "sender": "cloud",
                "recipient": "cloud",
                "payload": {"mu_next": list(self.mu_next)},
                "audit": {"g_noise": list(self.g_noise)},
            }
        )
        return out


def run_round(cloud: CloudNode, agents: Sequence[AgentNode], k: int) -> RoundLog:
    """One synchronous round: broadcast, local updates, multiplier update, state upload.

    Nodes are updated in place.
    """
    msgs, raw, noises, g = cloud.outbound(k)
    by_id = {a.id: a for a in agents}
    replies = []
    for msg in msgs:
        agent = by_id.get(msg.recipient)
        if agent is None:
            raise SimulationError(f"no agent {msg.recipient}; round aborted")
        replies.append(agent.update(msg))
    # the cloud updates mu from x^c(k) while the agents compute x(k+1)
    wg = cloud.update_multipliers(k, g)
    cloud.install(replies)
    return RoundLog(k, msgs, replies, raw, noises, wg, list(cloud.mu))


def build_network(problem: Problem, schedule: Schedule, cal: NoiseCalibration, init: SaddleState, seed: int):
    partial, gmech = make_mechanisms(cal, problem.m, seed)
    cloud = CloudNode(problem, schedule, init.mu, partial, gmech)
    agents = [
        AgentNode(i, problem.objectives[i - 1], init.x[i - 1], schedule, problem.domain.lower[i - 1], problem.domain.upper[i - 1])
        for i in range(1, problem.n + 1)
    ]
    cloud.install(a.initial_message() for a in agents)
    return cloud, agents


def run_simulation(
    problem: Problem,
    schedule: Schedule,
    cal: NoiseCalibration,
    init: SaddleState,
    rounds: int,
    seed: int = 0,
    stride: int = 1,
    reference: ReferencePoint | None = None,
    round_log=None,
    keep_logs: bool = False,
) -> RunTrace:
    """Simulate ``rounds`` rounds and return a trace in the centralised format.

    The trace's ``noise_log`` holds every noise drawn, so the run can be
    replayed through :func:`dpsaddle.saddle.run`. ``round_log`` may be an open
    text file receiving one JSON record per message. With ``keep_logs`` the
    :class:`RoundLog` objects are attached to the trace as ``round_logs``.
    """
    init.validate(problem)
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    if stride < 1:
        raise ValueError("stride must be positive")
    cloud, agents = build_network(problem, schedule, cal, init, seed)
    ks, xs, mus = [init.k], [list(cloud.xc)], [list(cloud.mu)]
    W = np.zeros((rounds, problem.n, problem.m))
    G = np.zeros((rounds, problem.m))
    logs = []
    for r in range(rounds):
        k = init.k + r
        log = run_round(cloud, agents, k)
        W[r] = log.partial_noise
        G[r] = log.g_noise
        if round_log is not None:
            for rec in log.records():
                round_log.write(json.dumps(rec) + "\n")
        if keep_logs:
            logs.append(log)
        if (r + 1) % stride == 0 or r + 1 == rounds:
            ks.append(k + 1)
            xs.append(list(cloud.xc))
            mus.append(list(cloud.mu))
    trace = RunTrace(stride, np.array(ks), np.array(xs), np.array(mus), reference, seed, NoiseLog(W, G))
    if keep_logs:
        trace.round_logs = logs
    return trace
