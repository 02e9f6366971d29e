import copy
import json
import subprocess
import sys

import numpy as np
import pytest

from dpsaddle import cli
from dpsaddle import config as cf
from dpsaddle import privacy as pv
from dpsaddle import saddle


def small_raw(**run):
    raw = json.loads(cf.preset_text())
    raw["privacy"]["lipschitz"] = {"partial": [0, 0, 2, 0, 2, 100.02, 100.02], "g": 472.67}
    raw["reference"] = {"x_hat": [7.591, -4.769, 0.178, -0.822, -2.863, 1.790, 1.340], "mu_hat": [1.8139, 0, 0.6409, 2.7314]}
    raw["run"].update({"iterations": 2000, "stride": 500}, **run)
    return raw


def write(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


def test_preset_shape(preset):
    assert (preset.n, preset.m) == (7, 4)
    assert preset.problem.domain.lower.tolist() == [-10.0] * 7
    assert preset.problem.domain.upper.tolist() == [10.0] * 7
    assert preset.privacy.delta == 0.05 and preset.privacy.epsilon == pytest.approx(np.log(3))
    assert preset.schedule.gamma_bar == 0.0005 and preset.schedule.alpha_bar == 0.2


def test_preset_file_loads(tmp_path):
    p = tmp_path / "preset.json"
    p.write_text(cf.preset_text())
    cfg = cf.load_config(p)
    assert cfg.n == 7 and cfg.iterations == 500_000


def test_bad_exponents_rejected(tmp_path):
    raw = small_raw()
    raw["schedule"].update(c1=0.2, c2=0.3)
    with pytest.raises(cf.ConfigError) as info:
        cf.load_config(write(tmp_path, raw))
    assert [p for p, _ in info.value.errors] == ["schedule"]


def test_missing_objective_named(tmp_path):
    raw = small_raw()
    del raw["objectives"][2:]
    with pytest.raises(cf.ConfigError) as info:
        cf.load_config(write(tmp_path, raw))
    assert "objectives[2]" in str(info.value)
    assert "agent 3" in str(info.value)


def test_errors_listed_exhaustively(tmp_path):
    raw = small_raw()
    raw["schedule"]["c2"] = 0.9
    raw["constraints"][1] = "x1 + * 2"
    raw["privacy"]["delta"] = 1.5
    raw["init"]["x0"] = [0.0] * 6
    raw["run"]["mode"] = "turbo"
    raw["bogus"] = 1
    with pytest.raises(cf.ConfigError) as info:
        cf.load_config(write(tmp_path, raw))
    paths = {p for p, _ in info.value.errors}
    assert {"schedule", "constraints[1]", "privacy", "init.x0", "run.mode", "bogus"} <= paths


def test_objective_locality_reported(tmp_path):
    raw = small_raw()
    raw["objectives"][0] = "x1^2 + x2"
    with pytest.raises(cf.ConfigError, match="objective 1"):
        cf.load_config(write(tmp_path, raw))


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{ not json")
    with pytest.raises(cf.ConfigError, match="malformed"):
        cf.load_config(p)


def test_numeric_strings_and_scalar_vectors(tmp_path):
    raw = small_raw()
    raw["schedule"]["c1"] = "1/3"
    raw["domain"] = {"lower": -10, "upper": 10}
    raw["privacy"]["b"] = 1
    cfg = cf.load_config(write(tmp_path, raw))
    assert cfg.schedule.c1 == 1 / 3
    assert cfg.privacy.b.tolist() == [1.0] * 7


def test_sigma_override_below_floor(tmp_path):
    raw = small_raw()
    raw["privacy"]["sigma"] = {"g": 1.0}
    cfg = cf.load_config(write(tmp_path, raw))
    with pytest.raises(pv.PrivacyError):
        cf.calibration(cfg)


def test_csv_rows_for_stride(tmp_path, monkeypatch):
    # the row count depends only on the recording plan, so a cheap problem stands in
    raw = small_raw(iterations=500_000, stride=10_000, mode="noiseless")
    raw["objectives"] = ["x1^2"] + [f"x{i}^2" for i in range(2, 8)]
    raw["constraints"] = ["x1 - 1"]
    raw["m"] = 1
    raw["privacy"]["lipschitz"] = {"partial": [0] * 7, "g": 1.0}
    raw["init"]["mu0"] = [0.0]
    raw["reference"] = {"x_hat": [0.0] * 7, "mu_hat": [0.0]}
    cfg = cf.load_config(write(tmp_path, raw))
    out = tmp_path / "trace.csv"
    _, summary = cf.run_experiment(cfg, out)
    lines = out.read_text().splitlines()
    assert lines[0] == "k,err_x,err_mu"
    assert len(lines) - 1 == 51
    assert [int(l.split(",")[0]) for l in lines[1:3]] == [0, 10_000]
    assert summary.final_k == 500_000


def test_full_state_columns_and_precision(tmp_path):
    cfg = cf.load_config(write(tmp_path, small_raw()))
    out = tmp_path / "t.csv"
    trace, summary = cf.run_experiment(cfg, out, full_state=True)
    header, *rows = out.read_text().splitlines()
    assert header.split(",") == ["k", "err_x", "err_mu"] + [f"x_{i}" for i in range(1, 8)] + [f"mu_{j}" for j in range(1, 5)]
    last = rows[-1].split(",")
    assert float(last[1]) == trace.err_x[-1]
    assert np.array_equal(np.array(last[3:10], dtype=float), trace.x[-1])
    assert summary.err_x >= 0 and summary.err_mu >= 0


def test_summary_contents(tmp_path):
    cfg = cf.load_config(write(tmp_path, small_raw(seed=7)))
    _, summary = cf.run_experiment(cfg)
    d = json.loads(summary.to_json())
    assert d["seed"] == 7 and d["final_k"] == 2000
    assert d["calibration"]["kappa"] == pytest.approx(pv.kappa(0.05, np.log(3)))
    assert len(d["calibration"]["variance_partial"]) == 7
    assert d["lipschitz"]["source"] == "config"
    assert d["reference"]["x_hat"][0] == 7.591
    assert d["wall_clock_seconds"] >= 0


def test_round_trip_reproduces_trace_bytes(tmp_path):
    cfg = cf.load_config(write(tmp_path, small_raw(seed=3)))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _, summary = cf.run_experiment(cfg, a, full_state=True)
    again = cfg.replace_run(seed=summary.seed)
    cf.run_experiment(again, b, full_state=True)
    assert a.read_bytes() == b.read_bytes()


def test_modes_agree_where_they_should(tmp_path):
    raw = small_raw(seed=2)
    central = cf.run_experiment(cf.parse_config(copy.deepcopy(raw)))[0]
    raw["run"]["mode"] = "cloudsim"
    log = tmp_path / "rounds.jsonl"
    sim = cf.run_experiment(cf.parse_config(copy.deepcopy(raw)), round_log=log)[0]
    assert np.array_equal(central.x, sim.x) and np.array_equal(central.mu, sim.mu)
    assert len(log.read_text().splitlines()) == 2000 * 15
    raw["run"]["mode"] = "noiseless"
    quiet = cf.run_experiment(cf.parse_config(raw))[0]
    assert not np.array_equal(quiet.x, central.x)


def test_reference_from_file(tmp_path):
    ref = {"x_hat": [1.0] * 7, "mu_hat": [0.5] * 4}
    (tmp_path / "ref.json").write_text(json.dumps(ref))
    raw = small_raw()
    raw["reference"] = {"file": "ref.json"}
    cfg = cf.load_config(write(tmp_path, raw))
    assert cf.reference_point(cfg).x_hat.tolist() == [1.0] * 7


def test_batch_matches_single_runs(tmp_path):
    cfg = cf.parse_config(small_raw())
    results = cf.run_experiment_batch(cfg, [4, 5], str(tmp_path / "s{seed}.csv"))
    for s, (tr, summary) in zip([4, 5], results):
        single, _ = cf.run_experiment(cfg.replace_run(seed=s), tmp_path / f"one{s}.csv")
        assert (tmp_path / f"s{s}.csv").read_bytes() == (tmp_path / f"one{s}.csv").read_bytes()
        assert summary.seed == s


@pytest.fixture(scope="module")
def calibrate_only():
    cfg = cf.seven_agent_preset()
    return cf.calibration(cfg)


def test_preset_calibration_table(calibrate_only):
    var = calibrate_only.variances
    assert var[[0, 1, 3]].tolist() == [0.0, 0.0, 0.0]
    assert var[2] == pytest.approx(12.3406, rel=1e-3)
    assert var[4] == pytest.approx(12.3406, rel=1e-3)
    assert calibrate_only.sigma_g**2 == pytest.approx(688971.6017, rel=1e-3)


@pytest.mark.xfail(
    strict=True,
    reason="the grid estimate for columns 6 and 7 is sqrt(10^4 + 4) = 100.02, not the tabulated 100.08, "
    "so their variance lands 0.13% below the table",
)
def test_preset_calibration_far_columns(calibrate_only):
    assert calibrate_only.variances[5] == pytest.approx(30900.7580, rel=1e-3)


# --- command line


def forbid_randomness(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("random stream touched")

    monkeypatch.setattr(pv, "substream", boom)
    monkeypatch.setattr(saddle, "substream", boom)
    monkeypatch.setattr(saddle, "run", boom)
    monkeypatch.setattr(cf.saddle, "run", boom)
    monkeypatch.setattr(cf, "run_simulation", boom)


def test_calibrate_and_lipschitz_touch_no_rng(monkeypatch, capsys):
    forbid_randomness(monkeypatch)
    assert cli.main(["calibrate"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["kappa"] == pytest.approx(1.7565, abs=1e-3)
    assert cli.main(["lipschitz", "--grid", "21"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["partial"][:5] == [0.0, 0.0, 2.0, 0.0, 2.0]


def test_seven_agent_preset_verbatim(capsys):
    assert cli.main(["paper-preset"]) == 0
    assert capsys.readouterr().out == cf.preset_text()


def test_solve_cli(tmp_path, capsys):
    cfgp = write(tmp_path, small_raw())
    out = tmp_path / "trace.csv"
    assert cli.main(["solve", "--config", str(cfgp), "--iters", "300", "--stride", "100", "--seed", "4", "--out", str(out), "--full-state"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["final_k"] == 300 and summary["seed"] == 4
    assert len(out.read_text().splitlines()) == 5


def test_seed_range_cli(tmp_path, capsys):
    cfgp = write(tmp_path, small_raw())
    assert cli.main(["solve", "--config", str(cfgp), "--iters", "100", "--seeds", "3..5", "--out", str(tmp_path / "r.csv")]) == 0
    summaries = json.loads(capsys.readouterr().out)
    assert [s["seed"] for s in summaries] == [3, 4, 5]
    assert sorted(p.name for p in tmp_path.glob("r-seed*.csv")) == ["r-seed3.csv", "r-seed4.csv", "r-seed5.csv"]


def test_simulate_cli_round_log(tmp_path, capsys):
    cfgp = write(tmp_path, small_raw())
    log = tmp_path / "log.jsonl"
    assert cli.main(["simulate", "--config", str(cfgp), "--iters", "10", "--round-log", str(log)]) == 0
    assert json.loads(capsys.readouterr().out)["mode"] == "cloudsim"
    assert len(log.read_text().splitlines()) == 150


def test_reference_cli_small(tmp_path, capsys):
    raw = small_raw()
    raw["reference"] = {"schedule": raw["schedule"], "tol": 2e-3, "max_iters": 1000}
    cfgp = write(tmp_path, raw)
    code = cli.main(["reference", "--config", str(cfgp)])
    out = json.loads(capsys.readouterr().out)
    assert code == 0 and out["converged"] and len(out["g"]) == 4


def test_reference_cli_failure_exit_code(tmp_path, capsys):
    raw = small_raw()
    raw["reference"] = {"tol": 1e-12, "max_iters": 10}
    code = cli.main(["reference", "--config", str(write(tmp_path, raw))])
    assert code == 3
    assert "did not converge" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    raw = small_raw()
    raw["schedule"].update(c1=0.2, c2=0.3)
    assert cli.main(["solve", "--config", str(write(tmp_path, raw))]) == 2
    assert "schedule" in capsys.readouterr().err


def test_bad_seed_range():
    with pytest.raises(SystemExit):
        cli.main(["solve", "--seeds", "5..2"])


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "dpsaddle", "paper-preset"], capture_output=True, text=True, check=True)
    assert json.loads(res.stdout)["n"] == 7


def test_preflight_quiet_on_preset(preset):
    assert cf.preflight(preset) == []


def test_preflight_warns(tmp_path):
    raw = small_raw()
    raw["objectives"][1] = "-(x2 + 4)^4"
    raw["constraints"][0] = "x1 + x2 + x3 + 100"
    cfg = cf.parse_config(raw)
    with pytest.warns(RuntimeWarning):
        msgs = cf.preflight(cfg)
    assert any("strictly feasible" in m for m in msgs)
    assert any("f2" in m for m in msgs)
