import numpy as np
import pytest
from hypothesis import strategies as st

from dpsaddle import expr as ex
from dpsaddle.config import seven_agent_preset

OBJECTIVES = [
    "(x1 - 9)^2 + x1",
    "(x2 + 4)^4",
    "(x3 - 1)^8",
    "x4^2 + (x4 + 6)",
    "(x5 + 3)^6",
    "(x6 - 7)^2",
    "(x7 - 5)^2",
]
CONSTRAINTS = [
    "x1 + x2 + x3 - 3",
    "x5^2 + (1/12)*x6^4 + (1/12)*x7^4 - 20",
    "x3^2 + x4 + x6 - 1",
    "x6^2 + x7^2 - 5",
]


@pytest.fixture(scope="session")
def preset():
    return seven_agent_preset()


@pytest.fixture(scope="session")
def seven_agent(preset):
    return preset.problem


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def expressions(n_vars=3, max_leaves=12):
    """Random expression trees that are smooth on ``[-2, 2]^n``.

    Quotients only divide by ``1 + (.)^2`` or a constant away from zero.
    """
    leaves = st.one_of(
        st.integers(1, n_vars).map(ex.Var),
        st.floats(-3, 3, allow_nan=False, allow_infinity=False).map(lambda v: ex.Const(round(v, 3))),
    )

    def extend(children):
        safe_den = children.map(lambda d: ex.Add(ex.Const(1.0), ex.Pow(d, 2)))
        nonzero = st.sampled_from([0.5, 2.0, -4.0, 12.0]).map(ex.Const)
        return st.one_of(
            st.builds(ex.Add, children, children),
            st.builds(ex.Sub, children, children),
            st.builds(ex.Mul, children, children),
            st.builds(ex.Neg, children),
            st.builds(ex.Pow, children, st.integers(0, 4)),
            st.builds(ex.Div, children, st.one_of(safe_den, nonzero)),
        )

    return st.recursive(leaves, extend, max_leaves=max_leaves)


def points(n_vars=3, lo=-2.0, hi=2.0):
    return st.lists(st.floats(lo, hi, allow_nan=False), min_size=n_vars, max_size=n_vars)


# --- per-criterion report for the acceptance gate

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "ran": False, "notes": []})
    if rep.failed:
        entry["ok"] = False
        crash = getattr(rep.longrepr, "reprcrash", None)
        msg = crash.message.splitlines()[0] if crash is not None else rep.longreprtext.strip().splitlines()[-1]
        entry["notes"].append(f"{item.name}: {msg}")
    if rep.when == "call":
        entry["ran"] = True


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        tr.write_line(f"criterion {number}: {status}  {e['title']}")
        for note in e["notes"]:
            tr.write_line(f"    {note}")
