import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import L1_EXACT, closed_form_delta
from mvblow.cascade import physical_jump
from mvblow.core import Coefficient, Measure1D, ModelParams, SpaceTimeDrift
from mvblow.particle import BLOCK, ParticleState, cascade_step, convergence_study, simulate


def deterministic_drift(alpha):
    return ModelParams(alpha, Measure1D.dirac(1.0), drift=Coefficient(-1.0), sigma=Coefficient(0.0),
                       sigma_bounds=(0.0, 1e3))


def boxed(positions, N, width=1e-9):
    """Oracle measure: each particle as a box of mass 1/N ending at its position (defaults at 0+)."""
    p = np.maximum(positions, width)
    locs, counts = np.unique(p, return_counts=True)
    return Measure1D([(x - width, x, "const", [c / N / width]) for x, c in zip(locs, counts)], allow_excess=True)


class TestCascadeStep:
    def test_no_defaults(self):
        x = np.array([0.5, 1.0, 2.0])
        n, y, alive, rounds = cascade_step(x, np.ones(3, bool), 0.7, 3)
        assert n == 0 and rounds == [] and np.array_equal(y, x) and alive.all()

    def test_hand_trace(self):
        n, y, alive, rounds = cascade_step(np.array([-0.1, 0.05, 5.0]), np.ones(3, bool), 0.3, 3)
        assert n == 2 and rounds == [1, 1]
        assert alive.tolist() == [False, False, True]
        assert y[2] == pytest.approx(4.8)

    def test_inputs_untouched(self):
        x = np.array([-0.1, 0.05, 5.0])
        a = np.ones(3, bool)
        cascade_step(x, a, 0.3, 3)
        assert x.tolist() == [-0.1, 0.05, 5.0] and a.all()

    def test_bridge_recheck_after_shift(self):
        # one default moves particle 1 from 0.06 to 0.02, raising its crossing probability past u
        var, start, u = 1e-3, 0.05, 0.05
        bridge = (np.array([1]), np.array([start]), np.array([u]), var)
        assert np.exp(-2 * start * 0.06 / var) < u < np.exp(-2 * start * 0.02 / var)
        n_plain, *_ = cascade_step(np.array([-0.1, 0.06]), np.ones(2, bool), 0.0, 2, bridge)
        n_shift, *_ = cascade_step(np.array([-0.1, 0.06]), np.ones(2, bool), 0.08, 2, bridge)
        assert n_plain == 1 and n_shift == 2

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(5, 300), st.floats(0.1, 4.0))
    def test_matches_physical_jump_of_empirical_measure(self, seed, N, alpha):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-0.05, 1.0, N)
        n, *_ = cascade_step(x, np.ones(N, bool), alpha, N)
        oracle = physical_jump(boxed(x, N), alpha)
        assert abs(n / N - oracle) <= 2.0 / N


class TestSimulate:
    def test_deterministic_drift_alpha0(self):
        dt = 1e-3
        L, _ = simulate(deterministic_drift(0.0), 200, dt, 1.5)
        k = np.argmax(L.values > 0)
        assert L.values[k] == 1.0
        assert abs(L.grid[k] - 1.0) <= dt + 1e-12

    def test_deterministic_drift_alpha_positive(self):
        L, reports = simulate(deterministic_drift(0.8), 500, 1e-3, 1.5)
        assert len(L.jumps) == 1 and L.jumps[0][1] == pytest.approx(1.0)
        assert len(reports) == 1 and reports[0].post_measure.total_mass == 0.0

    def test_alpha0_reflection_value(self, delta1_alpha0):
        L, _ = simulate(delta1_alpha0, 100_000, 1e-4, 1.0, seed=0, crossing="bridge")
        assert L.values[-1] == pytest.approx(L1_EXACT, abs=5e-3)

    def test_losses_match_alive_count(self, delta1_alpha0):
        L, _ = simulate(delta1_alpha0, 1000, 1e-2, 1.0, seed=3)
        assert np.allclose(L.values * 1000, np.round(L.values * 1000))

    def test_reproducible(self, bench_params):
        a, _ = simulate(bench_params, 2000, 1e-2, 0.5, seed=4, crossing="bridge")
        b, _ = simulate(bench_params, 2000, 1e-2, 0.5, seed=4, crossing="bridge")
        assert np.array_equal(a.values, b.values)

    def test_thread_count_irrelevant(self, bench_params):
        N = 2 * BLOCK + 10
        a, _ = simulate(bench_params, N, 5e-2, 0.3, seed=2, crossing="bridge", threads=1)
        b, _ = simulate(bench_params, N, 5e-2, 0.3, seed=2, crossing="bridge", threads=3)
        assert np.array_equal(a.values, b.values)

    def test_single_particle(self, delta1_alpha0):
        L, _ = simulate(delta1_alpha0, 1, 1e-2, 3.0, seed=5)
        assert set(np.unique(L.values)) <= {0.0, 1.0}

    def test_drifted_closed_form(self):
        p = ModelParams(0.0, Measure1D.dirac(1.0), drift=Coefficient(-0.5))
        L, _ = simulate(p, 100_000, 1e-3, 1.0, seed=6, crossing="bridge")
        assert L.values[-1] == pytest.approx(float(closed_form_delta(1.0, drift=-0.5)), abs=5e-3)

    def test_spatial_drift(self):
        # b(t, x) = -x pulls particles toward 0; bounded above by 0 on x >= 0
        drift = SpaceTimeDrift(lambda t, x: -x, upper=0.0)
        plain = ModelParams(0.5, Measure1D.uniform(0.5, 1.5))
        pulled = ModelParams(0.5, Measure1D.uniform(0.5, 1.5), drift=drift)
        a, _ = simulate(plain, 5000, 1e-2, 1.0, seed=1)
        b, _ = simulate(pulled, 5000, 1e-2, 1.0, seed=1)
        assert b.values[-1] > a.values[-1]
        assert np.all(np.diff(b.values) >= 0) and b.values[-1] <= 1.0

    def test_invalid(self, delta1_alpha0):
        with pytest.raises(ValueError):
            simulate(delta1_alpha0, 0, 1e-2, 1.0)
        with pytest.raises(ValueError):
            simulate(delta1_alpha0, 10, 1e-2, 1.0, crossing="exact")

    def test_state_helpers(self):
        s = ParticleState(np.array([0.5, 1.0, 2.0, 3.0]), np.array([True, False, True, True]))
        assert s.N == 4 and s.losses_so_far == pytest.approx(0.25)


class TestConvergenceStudy:
    def test_distances_decrease(self, delta1_alpha0):
        ref = lambda t: closed_form_delta(t)  # noqa: E731
        rows = convergence_study(delta1_alpha0, [1000, 10_000, 100_000], 1e-3, 1.0, reps=4, seed=2,
                                 reference=ref, crossing="bridge")
        d = [r["mean_sup_distance"] for r in rows]
        assert d[0] > d[1] > d[2]
        for r in rows:
            assert r["ci_low"] <= r["mean_sup_distance"] <= r["ci_high"]

    def test_reproducible(self, delta1_alpha0):
        ref = lambda t: closed_form_delta(t)  # noqa: E731
        a = convergence_study(delta1_alpha0, [500], 1e-2, 1.0, reps=1, seed=9, reference=ref)
        b = convergence_study(delta1_alpha0, [500], 1e-2, 1.0, reps=1, seed=9, reference=ref)
        assert a[0]["distances"] == b[0]["distances"]
