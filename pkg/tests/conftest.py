import numpy as np
import pytest
from scipy.special import ndtr

from mvblow.core import DecayProfile, Measure1D, ModelParams, profile_measure
from mvblow.volterra import SolverGrid, volterra_solve

L1_EXACT = 2.0 * ndtr(-1.0)


def two_block(alpha: float, allow_excess: bool = True) -> Measure1D:
    """Density 1/alpha on (0, alpha) and 2/alpha on (2 alpha, 3 alpha); total mass 3."""
    return Measure1D([(0.0, alpha, "const", [1.0 / alpha]),
                      (2 * alpha, 3 * alpha, "const", [2.0 / alpha])], allow_excess=allow_excess)


def closed_form_delta(t, x0=1.0, sigma=1.0, drift=0.0):
    """Hitting probability of 0 by time t for x0 + drift*s + sigma*B_s."""
    t = np.maximum(np.asarray(t, dtype=float), 1e-300)
    s = sigma * np.sqrt(t)
    return ndtr((-x0 - drift * t) / s) + np.exp(-2.0 * drift * x0 / sigma**2) * ndtr((-x0 + drift * t) / s)


@pytest.fixture(scope="session")
def bench_params():
    return ModelParams(0.5, profile_measure(DecayProfile(1.0, 0.5, 1.0, 0.5)))


@pytest.fixture(scope="session")
def bench_reference(bench_params):
    L, _ = volterra_solve(bench_params, SolverGrid(1.0, 1000))
    return L


@pytest.fixture(scope="session")
def delta1_alpha0():
    return ModelParams(0.0, Measure1D.dirac(1.0))


def random_const_measure(rng, k_max=4, lo=0.05, hi=2.0):
    k = int(rng.integers(1, k_max + 1))
    e = np.sort(rng.uniform(lo, hi, 2 * k))
    w = rng.exponential(size=k)
    w /= w.sum()
    return Measure1D([(e[2 * j], e[2 * j + 1], "const", [w[j] / (e[2 * j + 1] - e[2 * j])]) for j in range(k)])


REPORT_LINES = []


def report(name: str, passed: bool, detail: str = ""):
    tag = "PASS" if passed else "FAIL"
    line = f"[{tag}] {name}" + (f": {detail}" if detail else "")
    REPORT_LINES.append(line)
    print("\n" + line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if REPORT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in REPORT_LINES:
            terminalreporter.write_line(line)

