import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvblow.analysis import (blowup_threshold, contraction_ratio, contraction_test, deleted_measure, envelope_study,
                             epsilon_deleted_solve, explosion_time, exponent_study, h1_norm, minimality_check,
                             monte_carlo_minimality, random_S_path)
from mvblow.core import LossPath, Measure1D
from mvblow.particle import simulate
from mvblow.volterra import SRegion, SolverGrid, check_S_membership


class TestBlowupThreshold:
    @pytest.mark.parametrize("alpha,expected", [(2.5, True), (2.0, False)])
    def test_dirac(self, alpha, expected):
        assert blowup_threshold(Measure1D.dirac(1.0), alpha) is expected

    def test_uniform_below(self):
        assert blowup_threshold(Measure1D.uniform(0, 2), 1.9) is False

    def test_rejects_excess(self):
        with pytest.raises(ValueError):
            blowup_threshold(Measure1D([(0, 1, "const", [2.0])], allow_excess=True), 1.0)


class TestEnvelope:
    def test_deleted_measure_mass(self, bench_params):
        mu, m_eps, shift = deleted_measure(bench_params.initial, 0.5, 0.01)
        assert m_eps == pytest.approx(bench_params.initial.cdf(0.01))
        assert mu.total_mass + m_eps == pytest.approx(1.0, abs=1e-12)
        assert shift == pytest.approx(0.5 * m_eps + 0.0025)
        # survivors start at eps - shift, which is at least eps / 2
        assert 0.01 - shift >= 0.005
        assert mu.cdf(0.01 - shift - 1e-12) == pytest.approx(0.0, abs=1e-14)
        assert mu.cdf(0.01 - shift + 1e-3) > 0

    def test_eps_too_large(self):
        with pytest.raises(ValueError):
            deleted_measure(Measure1D.uniform(0, 1), 1.0, 0.5)

    def test_initial_value(self, bench_params):
        L = epsilon_deleted_solve(bench_params, 0.01, SolverGrid(0.1, 100))
        assert L.values[0] == pytest.approx(bench_params.initial.cdf(0.01), abs=1e-15)

    def test_study(self, bench_params):
        s = envelope_study(bench_params, [0.02, 0.01, 0.005], SolverGrid(1.0, 600))
        assert all(s.above.values())
        assert s.gaps_decreasing
        g = [s.gaps[e] for e in s.epsilons]
        for a, b in zip(g, g[1:]):
            assert b / a == pytest.approx(0.5, abs=0.1)
        # nested ordering: smaller epsilon sits between L and the larger one
        t = s.lower.grid
        assert np.all(s.uppers[0.005](t) <= s.uppers[0.02](t) + 1e-9)
        assert len(s.to_rows()) == 3

    def test_epsilon_order_enforced(self, bench_reference):
        from mvblow.analysis import EnvelopeStudy
        with pytest.raises(ValueError):
            EnvelopeStudy([0.01, 0.02], bench_reference, {})


class TestH1Norm:
    def test_linear(self):
        t = np.linspace(0, 1, 101)
        L = LossPath(t, 0.3 * t)
        for s in (0.25, 0.5, 1.0):
            assert h1_norm(L, s) == pytest.approx(0.3 * math.sqrt(s), rel=1e-12)

    def test_jump_gives_inf(self):
        L = LossPath([0, 0.5, 1.0], [0.0, 0.6, 0.7], jumps=[(1, 0.5)])
        assert h1_norm(L, 1.0) == math.inf and h1_norm(L, 0.25) < math.inf
        assert explosion_time(L) == 0.5

    def test_outside_grid(self):
        with pytest.raises(ValueError):
            h1_norm(LossPath([0, 1.0], [0.0, 0.1]), 2.0)

    def test_solver_output_under_S_bound(self, bench_reference):
        member, _, A = check_S_membership(bench_reference, SRegion(0.25, 1.0, 1.0))
        for s in (0.1, 0.5, 1.0):
            bound = A * math.sqrt(s ** 0.5 / 0.5)
            assert h1_norm(bench_reference, s) <= bound * (1 + 1e-9)
        assert explosion_time(bench_reference) == math.inf

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=3, max_size=20))
    def test_monotone_in_t(self, incs):
        t = np.linspace(0, 1, len(incs) + 1)
        v = np.concatenate([[0.0], np.cumsum(incs)])
        L = LossPath(t, v / max(v[-1], 1.0))
        norms = [h1_norm(L, s) for s in t]
        assert np.all(np.diff(norms) >= -1e-12)


class TestMinimality:
    def test_self(self, bench_reference):
        r = minimality_check(bench_reference, bench_reference)
        assert r["max_excess"] == 0.0 and r["passed"]

    def test_detects_shortfall(self, bench_reference):
        L = bench_reference
        low = LossPath(L.grid, np.maximum(L.values - 0.01 * (L.grid > 0.5), 0.0), validate=False)
        r = minimality_check(L, low)
        assert not r["passed"] and r["max_excess"] == pytest.approx(0.01) and r["worst_time"] > 0.5

    def test_envelope_passes(self, bench_params, bench_reference):
        up = epsilon_deleted_solve(bench_params, 0.01, SolverGrid(1.0, 600))
        assert minimality_check(bench_reference, up)["passed"]

    def test_monte_carlo_statistic(self):
        ref = LossPath([0, 1.0], [0.0, 0.5])
        paths = [LossPath([0, 1.0], [0.0, v]) for v in (0.49, 0.51, 0.5, 0.52)]
        r = monte_carlo_minimality(ref, paths)
        assert r["passed"] and r["max_mean_excess"] == 0.0
        paths = [LossPath([0, 1.0], [0.0, v]) for v in (0.40, 0.41, 0.39, 0.40)]
        assert not monte_carlo_minimality(ref, paths)["passed"]

    def test_particle_50_reps(self, bench_params, bench_reference):
        paths = [simulate(bench_params, 100_000, 1e-3, 0.2, seed=11, rep=r, crossing="bridge")[0]
                 for r in range(50)]
        r = monte_carlo_minimality(bench_reference, paths)
        assert r["passed"], r


class TestExponentStudy:
    def test_beta_half(self):
        rows = exponent_study([0.5], 0.5, SolverGrid(1.0, 1000))
        assert rows[0]["slope"] == pytest.approx(-0.25, abs=0.1) and not rows[0]["flagged"]

    def test_beta_near_one(self):
        rows = exponent_study([0.9], 0.5, SolverGrid(1.0, 1000))
        assert rows[0]["slope"] == pytest.approx(-0.05, abs=0.1)

    def test_alpha0_control(self):
        a, = exponent_study([0.5], 0.0, SolverGrid(1.0, 1000))
        b, = exponent_study([0.5], 0.5, SolverGrid(1.0, 1000))
        assert a["slope"] == pytest.approx(b["slope"], abs=0.1)

    def test_beta_range(self):
        with pytest.raises(ValueError):
            exponent_study([1.0], 0.5, SolverGrid(1.0, 100))


class TestContraction:
    def test_random_path_in_region(self):
        reg = SRegion(0.3, 1.0, 0.5)
        t = SolverGrid(0.5, 200).times
        rng = np.random.default_rng(0)
        for _ in range(10):
            L = random_S_path(reg, t, rng)
            assert check_S_membership(L, reg)[0]

    def test_identical_pair(self, bench_params):
        g = SolverGrid(0.2, 50)
        L = random_S_path(SRegion(0.3, 1.0, 0.2), g.times, np.random.default_rng(1))
        assert contraction_ratio(bench_params, g, L, L) == 0.0

    def test_small_window(self, bench_params):
        r = contraction_test(bench_params, SRegion(0.3, 1.0, 0.1), n_pairs=10)
        assert r["max_ratio"] <= 0.55 and len(r["ratios"]) == 10
