"""End-to-end acceptance checks.  Each test prints one [PASS]/[FAIL] line, repeated in the terminal summary."""
import time

import numpy as np
import pytest

from conftest import L1_EXACT, random_const_measure, report, two_block
from mvblow.analysis import (blowup_threshold, contraction_test, contraction_window, envelope_study, exponent_study,
                             monte_carlo_minimality)
from mvblow.cascade import fragile_sequence, jump_solution_set, physical_jump
from mvblow.core import ModelParams
from mvblow.particle import convergence_study, simulate
from mvblow.pde import THREE_BUMP_ALPHA, pde_solve, three_bump_measure
from mvblow.volterra import SRegion, SolverGrid, volterra_solve
from test_cascade import random_family


def timed(fn, *a, **k):
    t0 = time.perf_counter()
    out = fn(*a, **k)
    return out, time.perf_counter() - t0


def test_c1_alpha0_closed_form(delta1_alpha0):
    (Lv, _), tv = timed(volterra_solve, delta1_alpha0, SolverGrid(1.0, 1000))
    (Ln, _), tn = timed(simulate, delta1_alpha0, 100_000, 1e-3, 1.0, seed=0, crossing="bridge")
    (Lp, _, _), tp = timed(pde_solve, delta1_alpha0, 1.0, dt=1e-3, h=1e-3, smooth=1e-2)
    errs = {"volterra": abs(Lv(1.0) - L1_EXACT), "particle": abs(Ln(1.0) - L1_EXACT),
            "pde": abs(Lp(1.0) - L1_EXACT)}
    tol = {"volterra": 1e-3, "particle": 5e-3, "pde": 1e-3}
    secs = {"volterra": tv, "particle": tn, "pde": tp}
    ok = all(errs[k] <= tol[k] and secs[k] < 30 for k in errs)
    detail = ", ".join(f"{k} err {errs[k]:.2e} in {secs[k]:.1f}s" for k in errs)
    assert report("C1 alpha=0 closed form L(1) = 2 Phi(-1)", ok, detail)


def test_c2_example_jump_set():
    mu = two_block(0.5)
    sols = jump_solution_set(mu, 0.5, 4.0)
    jump = physical_jump(mu, 0.5)
    flat = np.ravel(sols)
    ok = len(sols) == 2 and np.allclose(flat, [0.0, 1.0, 3.0, 3.0], atol=1e-6, rtol=0) and abs(jump - 1.0) <= 1e-6
    assert report("C2 solution set [0,1] u {3}, physical jump 1", ok, f"set {sols}, jump {jump:.9f}")


def test_c3_fragile_example():
    mu = two_block(0.5)
    vals = {e: fragile_sequence(mu, 0.5, e)[0] for e in (0.9, 0.5, 0.1)}
    ok = all(abs(v - 1.0) <= 1e-9 for v in vals.values())
    assert report("C3 fragile limit 1 for eps in {0.9, 0.5, 0.1}", ok, str(vals))


def test_c4_fragile_vs_physical():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    bad = []
    for i in range(200):
        mu, alpha = random_family(rng)
        jump = physical_jump(mu, alpha)
        err = abs(fragile_sequence(mu, alpha, 1e-5)[0] - jump)
        if err > 1e-4:
            # alpha * density at the crossing; the eps bias grows like 1 / (1 - slope)
            slope = alpha * float(mu.density(alpha * jump + 1e-12))
            bad.append((i, round(alpha, 4), round(slope, 4), float(err)))
    secs = time.perf_counter() - t0
    ok = not bad and secs < 60
    assert report("C4 |f_inf(eps=1e-5) - physical jump| <= 1e-4 on 200 measures", ok,
                  f"{200 - len(bad)}/200 within tolerance in {secs:.1f}s; failures (index, alpha, alpha*density, error): {bad}")


def test_c5_supercritical_jumps():
    rng = np.random.default_rng(11)
    misses = []
    for i in range(20):
        mu = random_const_measure(rng)
        alpha = 2.0 * mu.mean() * rng.uniform(1.05, 2.0)
        assert blowup_threshold(mu, alpha)
        L, _ = volterra_solve(ModelParams(alpha, mu), SolverGrid(4.0, 800))
        if not L.jumps or L.left_limit(L.jumps[0][0]) >= 1 - 1e-3:
            misses.append(i)
    assert report("C5 alpha > 2 m0 forces a jump before L = 1 - 1e-3", not misses,
                  f"{20 - len(misses)}/20 samples jumped; misses {misses}")


def test_c6_contraction(bench_params):
    t0, _ = contraction_window(bench_params)
    r = contraction_test(bench_params, SRegion(0.3, 1.0, t0), n_pairs=50)
    ok = r["max_ratio"] <= 0.55 and len(r["ratios"]) == 50
    assert report("C6 contraction ratio <= 0.55 on 50 pairs", ok,
                  f"t0 {t0:g}, max ratio {r['max_ratio']:.3f}, mean {r['mean_ratio']:.3f}")


@pytest.mark.parametrize("beta", [0.25, 0.5, 0.75])
def test_c7_exponent(beta):
    rows, secs = timed(exponent_study, [beta], 0.5, SolverGrid(1.0, 1000))
    row = rows[0]
    ok = not row["flagged"] and abs(row["slope"] + (1 - beta) / 2) <= 0.1 and secs < 300
    assert report(f"C7 exponent beta={beta}", ok,
                  f"slope {row['slope']:.4f}, expected {-(1 - beta) / 2:.3f}, {secs:.1f}s")


def test_c8_envelope(bench_params):
    s = envelope_study(bench_params, [0.02, 0.01, 0.005], SolverGrid(1.0, 600))
    g = [s.gaps[e] for e in s.epsilons]
    ok = all(s.above.values()) and s.gaps_decreasing and g[-1] <= 2 * g[0] / 4
    assert report("C8 envelope above L with shrinking gaps", ok,
                  f"gaps {[f'{v:.3e}' for v in g]}, above {list(s.above.values())}")


def test_c9_conservation_max_principle(bench_params, delta1_alpha0):
    runs = {
        "benchmark": pde_solve(bench_params, 1.0, dt=1e-3, h=1e-3),
        "delta alpha=0": pde_solve(delta1_alpha0, 1.0, dt=1e-3, h=1e-3, smooth=1e-2),
        "three bumps": pde_solve(ModelParams(THREE_BUMP_ALPHA, three_bump_measure()), 2.0, dt=2e-3, h=2e-3,
                                 x_max=9.0),
    }
    ok, parts = True, []
    for name, (_, heat, _) in runs.items():
        good = heat["balance_max"] <= 1e-5 and heat["sup_max"] <= heat["sup_initial"] * (1 + 1e-8)
        ok &= good
        parts.append(f"{name}: balance {heat['balance_max']:.1e}, sup {heat['sup_max']:.4g}/{heat['sup_initial']:.4g}")
    assert report("C9 conservation and maximum principle", ok, "; ".join(parts))


def test_c10_propagation_of_chaos(bench_params, bench_reference):
    rows = convergence_study(bench_params, [1_000, 10_000, 100_000], 1e-3, 1.0, reps=20, seed=3,
                             reference=bench_reference, crossing="bridge", keep_paths=True)
    d = [r["mean_sup_distance"] for r in rows]
    mins = [monte_carlo_minimality(bench_reference, r["paths"]) for r in rows]
    L, _, _ = pde_solve(ModelParams(THREE_BUMP_ALPHA, three_bump_measure()), 2.0, dt=2e-3, h=2e-3, x_max=9.0)
    ok = d[0] > d[1] > d[2] and all(m["passed"] for m in mins) and len(L.jumps) == 2
    detail = (f"mean sup distances {[f'{v:.4f}' for v in d]}, minimality z {[round(m['worst_z'], 2) for m in mins]}, "
              f"three-bump jumps at {[round(t, 3) for t in L.jump_times]}")
    assert report("C10 propagation of chaos, minimality, two blow-ups", ok, detail)
