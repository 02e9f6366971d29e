"""Acceptance gate: one marked test group per criterion, summarised at the end of the run."""

import math

import numpy as np
import pytest

from dpsaddle import config as cf
from dpsaddle import expr as ex
from dpsaddle import privacy as pv
from dpsaddle.cloudsim import run_simulation
from dpsaddle.saddle import ReferencePoint, SaddleState, run, run_batch
from conftest import CONSTRAINTS, OBJECTIVES

LN3 = math.log(3.0)
X_HAT = np.array([7.591, -4.769, 0.178, -0.822, -2.863, 1.790, 1.340])
MU_HAT = np.array([1.8139, 0.0, 0.6409, 2.7314])
TARGET = ReferencePoint(X_HAT, MU_HAT)


def criterion(number, title):
    return pytest.mark.criterion(number, title)


@pytest.fixture(scope="module")
def cfg():
    return cf.seven_agent_preset()


@pytest.fixture(scope="module")
def oracle(cfg):
    return cf.reference_point(cfg)


# 1 -------------------------------------------------------------------------

C1 = criterion(1, "calibration constants: kappa and sigma^2 table")


@C1
def test_kappa():
    assert abs(pv.kappa(0.05, LN3) - 1.7565) <= 1e-3


@C1
@pytest.mark.parametrize("K, var", [(2.0, 12.3406), (100.08, 30900.7580), (472.567, 688971.6017)])
def test_sigma_squared(K, var):
    pp = pv.PrivacyParams(LN3, 0.05, np.ones(7))
    s = pv.calibrate_sigma(K, pp)
    assert abs(s * s / var - 1) <= 1e-3


# 2 -------------------------------------------------------------------------

C2 = criterion(2, "Lipschitz table at 201 points per referenced axis")


@pytest.fixture(scope="module")
def lipschitz(cfg):
    return pv.lipschitz_table(cfg.problem, 201)


@C2
def test_lipschitz_columns(lipschitz):
    partials, _ = lipschitz
    assert partials[[0, 1, 3]].tolist() == [0.0, 0.0, 0.0]
    assert partials[[2, 4]].tolist() == [2.0, 2.0]
    assert abs(partials[5] / 100.08 - 1) <= 0.01
    assert abs(partials[6] / 100.08 - 1) <= 0.01


@C2
def test_lipschitz_g(lipschitz):
    _, kg = lipschitz
    assert abs(kg / 472.567 - 1) <= 0.01


# 3 -------------------------------------------------------------------------

C3 = criterion(3, "reference saddle point within 5e-2 per component")


@C3
def test_reference_converges(oracle):
    assert oracle.converged


@C3
def test_reference_multipliers(oracle):
    err = np.abs(oracle.mu_hat - MU_HAT)
    assert np.all(err <= 5e-2), f"mu components off by {err.round(4).tolist()}"


@C3
def test_reference_states(oracle):
    err = np.abs(oracle.x_hat - X_HAT)
    bad = {f"x{i + 1}": (round(float(oracle.x_hat[i]), 4), round(float(err[i]), 4)) for i in np.flatnonzero(err > 5e-2)}
    assert not bad, f"components beyond 5e-2 (value, error): {bad}"


# 4 -------------------------------------------------------------------------

C4 = criterion(4, "mean-square convergence over 10 seeds and target error bands")
CHECKPOINTS = (20_000, 200_000, 500_000)


@pytest.fixture(scope="module")
def seed_runs(cfg):
    cal = cf.calibration(cfg)
    return run_batch(cfg.problem, cfg.schedule, cal, cfg.init, 500_000, list(range(10)), 10_000, TARGET)


def _at(traces, k, attr):
    return np.array([getattr(t, attr)[t.at(k)] for t in traces])


@C4
def test_mean_square_error_decreases(seed_runs):
    msq = [float(np.mean(_at(seed_runs, k, "err_x") ** 2)) for k in CHECKPOINTS]
    assert msq[0] > msq[1] > msq[2], f"seed-averaged squared errors {msq}"


@C4
@pytest.mark.parametrize(
    "k, attr, target",
    [(200_000, "err_x", 0.4839), (200_000, "err_mu", 0.5459), (500_000, "err_x", 0.2612), (500_000, "err_mu", 0.2123)],
)
def test_median_error_band(seed_runs, k, attr, target):
    med = float(np.median(_at(seed_runs, k, attr)))
    assert target / 3 <= med <= target * 3, f"median {attr} at k={k} is {med:.4f}, target {target}"


# 5 -------------------------------------------------------------------------

C5 = criterion(5, "cloud simulation bit-identical to replayed centralised run")


@C5
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_replay_bit_identical(cfg, seed):
    cal = cf.calibration(cfg)
    sim = run_simulation(cfg.problem, cfg.schedule, cal, cfg.init, 10_000, seed=seed)
    rep = run(cfg.problem, cfg.schedule, cal, cfg.init, 10_000, seed=seed, replay=sim.noise_log)
    assert np.array_equal(sim.k, rep.k)
    assert np.array_equal(sim.x, rep.x)
    assert np.array_equal(sim.mu, rep.mu)


# 6 -------------------------------------------------------------------------

C6 = criterion(6, "feasibility along runs and complementarity at the reference")


@C6
def test_feasible_every_logged_step(cfg, seed_runs):
    cal = cf.calibration(cfg)
    dense = run(cfg.problem, cfg.schedule, cal, cfg.init, 100_000, seed=123, stride=1)
    for tr in [dense, *seed_runs]:
        assert np.all(tr.x >= cfg.problem.domain.lower) and np.all(tr.x <= cfg.problem.domain.upper)
        assert np.all(tr.mu >= 0.0)


@C6
def test_complementarity(cfg, oracle):
    g = cfg.problem.constraint_values(oracle.x_hat)
    assert oracle.mu_hat[1] == 0.0
    assert np.all(np.abs(oracle.mu_hat * g) <= 1e-2), (oracle.mu_hat * g).tolist()


# 7 -------------------------------------------------------------------------

C7 = criterion(7, "symbolic partials match central differences")


@C7
@pytest.mark.parametrize("text", OBJECTIVES + CONSTRAINTS)
def test_partials_against_differences(text):
    rng = np.random.default_rng(77)
    e = ex.parse(text, 7)
    ds = [ex.differentiate(e, i) for i in range(1, 8)]
    h = 1e-5
    for p in rng.uniform(-10, 10, size=(100, 7)):
        for i in range(7):
            up, dn = p.copy(), p.copy()
            up[i] += h
            dn[i] -= h
            fd = (ex.evaluate(e, up) - ex.evaluate(e, dn)) / (2 * h)
            d = ex.evaluate(ds[i], p)
            assert abs(fd - d) <= 1e-5 * max(1.0, abs(d)), (text, i + 1, p.tolist(), d, fd)


# 8 -------------------------------------------------------------------------

C8 = criterion(8, "noise variance and zero-sigma mechanisms")


@C8
def test_empirical_variance():
    var = 12.3406
    mech = pv.GaussianMechanism(math.sqrt(var), 4, pv.substream(2024, "partial", 3))
    w = mech.draw_many(100_000)
    assert np.all(np.abs(w.var(axis=0, ddof=1) / var - 1) <= 0.03)


@C8
def test_zero_sigma_exact_zeros(cfg):
    cal = cf.calibration(cfg)
    tr = run(cfg.problem, cfg.schedule, cal, cfg.init, 5000, seed=5, log_noise=True)
    zero = np.flatnonzero(cal.sigma_partial == 0)
    assert zero.tolist() == [0, 1, 3]
    assert np.all(tr.noise_log.partial[:, zero, :] == 0.0)
    assert np.any(tr.noise_log.partial[:, 2, :] != 0.0)


# 9 -------------------------------------------------------------------------

C9 = criterion(9, "saddle inequalities at the reference for 1000 samples")


@C9
def test_saddle_inequalities(cfg, oracle):
    rng = np.random.default_rng(909)
    p = cfg.problem
    centre = p.lagrangian_value(oracle.x_hat, oracle.mu_hat)
    xs = rng.uniform(p.domain.lower, p.domain.upper, size=(1000, 7))
    mus = rng.uniform(0.0, 10.0, size=(1000, 4))
    worst_mu = max(p.lagrangian_value(oracle.x_hat, mu) - centre for mu in mus)
    worst_x = max(centre - p.lagrangian_value(x, oracle.mu_hat) for x in xs)
    assert worst_mu <= 1e-6, worst_mu
    assert worst_x <= 1e-6, worst_x
