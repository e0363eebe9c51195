"""Finite particle system with within-step contagion cascades."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cascade import CascadeReport
from .core import LossPath, Measure1D, ModelParams, counter_stream, default_jump_threshold, sample

__all__ = ["ParticleState", "cascade_step", "simulate", "convergence_study", "BLOCK"]

# particles are grouped in fixed blocks; each (seed, rep, step, block) owns a stream,
# so the draws do not depend on how blocks are spread over threads
BLOCK = 65536


@dataclass
class ParticleState:
    positions: np.ndarray
    alive: np.ndarray
    time: float = 0.0

    @property
    def N(self) -> int:
        return len(self.positions)

    @property
    def losses_so_far(self) -> float:
        return 1.0 - self.alive.sum() / self.N


def cascade_step(positions, alive, alpha: float, N: int, bridge=None):
    """Resolve defaults after a diffusion step.

    Particles at or below zero default; every default pushes the surviving
    particles down by alpha/N, and the loop repeats until no new default.
    ``bridge=(idx, start, u, var)`` adds the in-step crossing test for the
    particles ``idx``: kill when ``u < exp(-2 start end / var)``, re-checked
    against the shifted end point every round.
    Returns ``(defaults, positions, alive, rounds)`` where ``rounds`` holds the
    defaults of each pass.  Inputs are not modified.
    """
    x = np.array(positions, dtype=float)
    alive = np.array(alive, dtype=bool)
    rounds = []

    def fresh_defaults():
        fresh = alive & (x <= 0)
        if bridge is not None:
            idx, start, u, var = bridge
            hit = u < np.exp(-2.0 * start * np.maximum(x[idx], 0.0) / var)
            fresh[idx[hit & alive[idx]]] = True
        return fresh

    fresh = fresh_defaults()
    while True:
        n = int(fresh.sum())
        if n == 0:
            break
        rounds.append(n)
        alive &= ~fresh
        x[alive] -= alpha * n / N
        fresh = fresh_defaults()
    return sum(rounds), x, alive, rounds


def _threads(threads):
    if threads is None:
        threads = int(os.environ.get("MVBLOW_THREADS", "1") or 1)
    return max(1, int(threads))


def _initial_positions(mu: Measure1D, N: int, seed: int, rep: int, pool):
    blocks = range(0, N, BLOCK)

    def draw(b0):
        return sample(mu, counter_stream(seed, rep, 0, b0 // BLOCK), min(BLOCK, N - b0))

    return np.concatenate(list(pool.map(draw, blocks)))


def simulate(params: ModelParams, N: int, dt: float, horizon: float, seed: int = 0, rep: int = 0,
             crossing: str = "endpoint", jump_scale: float = 0.1, jump_threshold: float | None = None,
             threads: int | None = None, report_bins: int = 200):
    """Euler–Maruyama particle system; returns ``(LossPath, reports)``.

    ``crossing="endpoint"`` detects defaults at step ends only; ``"bridge"``
    also kills a particle with the Brownian-bridge probability of having
    crossed zero inside the step.
    """
    if N <= 0:
        raise ValueError("N must be positive")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if crossing not in ("endpoint", "bridge"):
        raise ValueError("crossing must be 'endpoint' or 'bridge'")
    n_steps = int(math.ceil(horizon / dt - 1e-9))
    times = np.minimum(np.arange(n_steps + 1) * dt, horizon)
    thr = jump_threshold if jump_threshold is not None else default_jump_threshold(dt, jump_scale)
    alpha = params.alpha
    sig, drift = params.sigma, params.drift
    nthreads = _threads(threads)
    pool = ThreadPoolExecutor(nthreads) if nthreads > 1 else None
    pmap = pool.map if pool else map

    class _Pool:
        map = staticmethod(pmap)

    x = _initial_positions(params.initial, N, seed, rep, _Pool)
    alive = np.ones(N, bool)
    n_dead = 0
    values = np.zeros(n_steps + 1)
    jumps, reports = [], []
    starts = list(range(0, N, BLOCK))
    z = np.empty(N)

    def b1_of(b0):
        return min(b0 + BLOCK, N)

    for k in range(1, n_steps + 1):
        t0, t1 = times[k - 1], times[k]
        h = t1 - t0
        if n_dead == N:
            values[k] = 1.0
            continue

        def draw(b0, k=k):
            counter_stream(seed, rep, k, b0 // BLOCK, kind="sfc64").standard_normal(out=z[b0:b1_of(b0)])

        for _ in pmap(draw, starts):
            pass
        var = float(sig.integral_sq(t1) - sig.integral_sq(t0))
        if params.spatial_drift:
            x_new = x + drift(t0, x) * h + math.sqrt(var) * z
        else:
            x_new = x + (float(drift.integral(t1) - drift.integral(t0)) + math.sqrt(var) * z)
        bridge = _bridge_draws(x, x_new, alive, var, seed, rep, k) if crossing == "bridge" else None
        # defaulted particles keep their default position
        x = np.where(alive, x_new, x)
        if bridge is not None or np.any(alive & (x <= 0)):
            total, x, alive, rounds = cascade_step(x, alive, alpha, N, bridge)
            n_dead += total
            if total / N > thr:
                jumps.append((k, total / N))
                reports.append(_report(t1, rounds, N, x[alive], report_bins))
        values[k] = n_dead / N
    if pool:
        pool.shutdown()
    return LossPath(times, values, jumps, jump_threshold=thr, validate=False), reports


def _bridge_draws(x, x_new, alive, var, seed, rep, k):
    # only particles with min(x, x_new)^2 < 40 var have a crossing probability above e^-20
    near = np.flatnonzero(alive & (np.minimum(x, x_new) < math.sqrt(40.0 * var)) & (x > 0))
    if not len(near):
        return None
    # uniforms come from a per-block stream, in particle order, so thread layout does not matter
    u = np.empty(len(near))
    blocks = near // BLOCK
    cuts = np.flatnonzero(np.diff(blocks)) + 1
    for lo, hi in zip(np.r_[0, cuts], np.r_[cuts, len(near)]):
        u[lo:hi] = counter_stream(seed, rep, k, int(blocks[lo]), 1, kind="sfc64").random(hi - lo)
    return near, x[near], u, var


def _report(t, rounds, N, survivors, bins):
    cum = np.cumsum(rounds) / N
    seed = rounds[0] / N
    trace = list(cum[1:] - seed) if len(rounds) > 1 else [0.0]
    if len(survivors):
        hi = float(survivors.max()) * (1 + 1e-12) + 1e-12
        edges = np.linspace(0.0, hi, bins + 1)
        counts, _ = np.histogram(survivors, edges)
        post = Measure1D.from_table(edges, np.append(counts / N / np.diff(edges), 0.0), kind="const")
    else:
        post = Measure1D.empty()
    return CascadeReport(time=float(t), epsilon_used=seed, trace=trace, jump_size=float(cum[-1] - seed),
                         iterations=len(rounds), post_measure=post, seed=seed,
                         notes=["empirical cascade; post measure is a histogram of survivors"])


def convergence_study(params: ModelParams, N_list, dt: float, horizon: float, reps: int, seed: int,
                      reference: LossPath, crossing: str = "endpoint", t_max: float | None = None,
                      n_boot: int = 2000, keep_paths: bool = False):
    """Mean sup-distance of L^N to ``reference`` per N, with a bootstrap 95% interval."""
    rows = []
    for N in N_list:
        dist, paths = [], []
        for r in range(reps):
            L, _ = simulate(params, int(N), dt, horizon, seed=seed, rep=int(N) * 1000 + r, crossing=crossing)
            mask = L.grid <= (t_max if t_max is not None else horizon) + 1e-12
            ref = reference(L.grid[mask])
            dist.append(float(np.max(np.abs(L.values[mask] - ref))))
            if keep_paths:
                paths.append(L)
        dist = np.array(dist)
        boot = np.random.default_rng(seed).choice(dist, size=(n_boot, len(dist))).mean(axis=1)
        row = {
            "N": int(N),
            "mean_sup_distance": float(dist.mean()),
            "ci_low": float(np.quantile(boot, 0.025)),
            "ci_high": float(np.quantile(boot, 0.975)),
            "se": float(dist.std(ddof=1) / math.sqrt(len(dist))) if len(dist) > 1 else float("nan"),
            "distances": dist.tolist(),
        }
        if keep_paths:
            row["paths"] = paths
        rows.append(row)
    return rows
