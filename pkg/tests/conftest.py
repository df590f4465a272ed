import numpy as np
import pytest

from uqgate.cohort import Cohort, PredictionRecord
from uqgate.simulator import SimConfig, generate

_ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(id, title): exit criterion of the build")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        crit, title = marker.args
        _ACCEPTANCE.append((crit, title, "PASS" if rep.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, title, status in sorted(_ACCEPTANCE, key=lambda r: int(r[0].lstrip("#"))):
        terminalreporter.write_line(f"{status}  {crit:>3}  {title}")


def make_record(rid, split="test", label=0, base=(0.5, 0.5), mc=None, tta=None, alphas=None):
    return PredictionRecord(id=rid, split=split, label=label, base_probs=list(base),
                            mc_probs=mc, tta_probs=tta, alphas=alphas)


@pytest.fixture
def small_sim():
    return generate(SimConfig(n_validation=60, n_test=60, n_calibration=60, n_samples=40, seed=7))


@pytest.fixture
def tiny_cohort():
    return Cohort((
        make_record("a", "calibration", 0, (0.95, 0.05)),
        make_record("b", "calibration", 0, (0.85, 0.15)),
        make_record("c", "calibration", 1, (0.35, 0.65)),
    ))


def rng(seed=0):
    return np.random.default_rng(seed)


def two_clusters(seed: int, n: int = 200, gap: float = 2.0, spread: float = 0.5):
    """Linearly separable 2-D data: class c centred at (-1)^(c+1) * (gap, gap)."""
    g = np.random.default_rng(seed)
    y = np.arange(n) % 2
    centres = np.where(y[:, None] == 1, gap, -gap)
    return centres + spread * g.standard_normal((n, 2)), y
