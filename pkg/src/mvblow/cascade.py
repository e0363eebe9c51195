"""Cascade resolution: fragile iteration, minimal jump sizes and post-jump restarts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .core import Measure1D, NumericalError

__all__ = [
    "CascadeReport",
    "FragileDivergence",
    "fragile_sequence",
    "physical_jump",
    "jump_solution_set",
    "resolve_blowup",
]

TOL_STRICT = 1e-12
BISECT_TOL = 1e-9


class FragileDivergence(NumericalError):
    """The fragile iteration did not settle within ``n_max`` steps."""

    def __init__(self, message, trace):
        super().__init__(message, {"trace": list(trace)})
        self.trace = list(trace)


def _require_atomless(mu: Measure1D):
    if not mu.is_atomless:
        raise ValueError("cascade operations need an atomless measure")


def fragile_sequence(mu: Measure1D, alpha: float, epsilon: float, tol: float = 1e-14,
                     n_max: int = 200_000):
    """Iterate f_{n+1} = mu(0, alpha*eps + alpha*f_n] from f_0 = mu(0, alpha*eps].

    Returns ``(f_inf, trace)`` where ``f_inf`` is the first iterate whose
    successor moves by less than ``tol``.
    """
    _require_atomless(mu)
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    f = mu.cdf(alpha * epsilon)
    trace = [f]
    for _ in range(n_max):
        nxt = mu.cdf(alpha * epsilon + alpha * f)
        trace.append(nxt)
        if nxt - f < tol:
            return f, trace
        f = nxt
    raise FragileDivergence(f"fragile sequence did not converge in {n_max} steps", trace)


def _scan_grid(mu: Measure1D, alpha: float, x_hi: float, n_uniform: int = 4001) -> np.ndarray:
    a, b, c, _, _ = mu.arrays()
    pts = [np.geomspace(1e-14 * max(x_hi, 1.0), x_hi, 600), np.linspace(0.0, x_hi, n_uniform)]
    if len(a):
        pts.append(a / alpha)
        pts.append(b / alpha)
        curved = np.any(c[:, 1:] != 0.0, axis=1)
        if np.any(curved):
            s = np.linspace(0.0, 1.0, 9)[1:-1]
            pts.append(((a[curved, None] + s * (b - a)[curved, None]) / alpha).ravel())
    x = np.concatenate(pts)
    x = x[(x >= 0) & (x <= x_hi)]
    return np.unique(np.concatenate([[0.0], x]))


def _g(mu, alpha):
    return lambda x: mu.cdf(alpha * x) - x


def physical_jump(mu: Measure1D, alpha: float, tol_strict: float = TOL_STRICT) -> float:
    """inf{x >= 0 : mu(0, alpha x) < x}, by a sign scan followed by bisection."""
    _require_atomless(mu)
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if mu.total_mass <= 0:
        return 0.0
    x_hi = mu.total_mass * (1 + 1e-9) + 1e-9
    x = _scan_grid(mu, alpha, x_hi)
    g = mu.cdf(alpha * x) - x
    hit = np.nonzero(g[1:] <= -tol_strict)[0]
    if not len(hit):
        return float(x_hi)
    i = hit[0] + 1
    lo, hi = x[i - 1], x[i]
    gf = _g(mu, alpha)
    while hi - lo > BISECT_TOL * 1e-2:
        mid = 0.5 * (lo + hi)
        if gf(mid) <= -tol_strict:
            hi = mid
        else:
            lo = mid
    return 0.0 if hi < BISECT_TOL else float(hi)


def jump_solution_set(mu: Measure1D, alpha: float, x_max: float, tol: float = 1e-10):
    """All x in [0, x_max] with mu(0, alpha x] = x, as closed intervals ``(lo, hi)``.

    Isolated solutions are returned as degenerate intervals ``(x, x)``.
    """
    if not x_max > 0:
        raise ValueError("x_max must be positive")
    x = _scan_grid(mu, alpha, x_max, n_uniform=20001)
    gf = _g(mu, alpha)
    g = mu.cdf(alpha * x) - x
    zero = np.abs(g) <= tol
    out = []

    i, n = 0, len(x)
    while i < n:
        if zero[i]:
            j = i
            while j + 1 < n and zero[j + 1]:
                j += 1
            lo, hi = x[i], x[j]
            # push edges out to where |g| leaves the tolerance
            if i > 0:
                lo = _edge(gf, x[i - 1], x[i], tol)
            if j + 1 < n:
                hi = _edge(gf, x[j + 1], x[j], tol)
            out.append((float(lo), float(hi)))
            i = j + 1
        else:
            i += 1
    # sign changes between non-zero neighbours
    for k in np.nonzero((g[:-1] * g[1:] < 0) & ~zero[:-1] & ~zero[1:])[0]:
        r = brentq(gf, x[k], x[k + 1], xtol=1e-14, rtol=4 * np.finfo(float).eps)
        out.append((r, r))
    # touching points missed by the grid
    for k in range(1, n - 1):
        if zero[k - 1] or zero[k] or zero[k + 1]:
            continue
        for sgn in (1.0, -1.0):
            gk = sgn * g[k]
            if gk < 0 and gk >= sgn * g[k - 1] and gk >= sgn * g[k + 1] and gk > -1e-3:
                res = minimize_scalar(lambda y: -sgn * gf(y), bounds=(x[k - 1], x[k + 1]),
                                      method="bounded", options={"xatol": 1e-13})
                if abs(gf(res.x)) <= tol:
                    out.append((float(res.x), float(res.x)))
    result = []
    for lo, hi in _merge(out, 10 * tol):
        if hi - lo < 1e-7:
            lo = hi = 0.5 * (lo + hi)
        if hi < 1e-9:
            lo = hi = 0.0
        result.append((lo, hi))
    return result


def _edge(gf, outside, inside, tol):
    # bisection for the boundary of {|g| <= tol}
    lo, hi = outside, inside
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if abs(gf(mid)) <= tol:
            hi = mid
        else:
            lo = mid
        if abs(hi - lo) < 1e-13:
            break
    return hi


def _merge(items, gap):
    items = sorted(items)
    merged = []
    for lo, hi in items:
        if merged and lo <= merged[-1][1] + gap:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


@dataclass
class CascadeReport:
    time: float
    epsilon_used: float
    trace: list
    jump_size: float
    iterations: int
    post_measure: Measure1D
    pre_mass: float = float("nan")
    notes: list = field(default_factory=list)
    seed: float = 0.0

    @property
    def total_loss(self) -> float:
        """Loss added by this event: the seed plus the absorbed jump."""
        return self.seed + self.jump_size

    def to_dict(self, include_measure: bool = True) -> dict:
        d = {
            "time": self.time,
            "epsilon_used": self.epsilon_used,
            "trace": [float(v) for v in self.trace],
            "jump_size": self.jump_size,
            "iterations": self.iterations,
            "seed": self.seed,
            "pre_mass": self.pre_mass,
            "post_mass": self.post_measure.total_mass,
            "notes": list(self.notes),
        }
        if include_measure:
            d["post_measure"] = self.post_measure.to_dict()
        return d


def resolve_blowup(mu: Measure1D, alpha: float, time: float = 0.0, epsilon: float | None = None,
                   match_tol: float = 1e-6, seed: float | None = None) -> CascadeReport:
    """Minimal jump for ``mu`` plus the fragile trace that explains it.

    Without an explicit ``epsilon`` the trace is recorded at the largest
    epsilon on the ladder 1e-1, 1e-2, ... whose fragile limit matches the
    physical jump to ``match_tol``.

    With ``seed`` (a loss already absorbed outside ``mu``, e.g. the fresh
    defaults of a time step) the jump is the seeded cascade instead: the mass
    of ``mu`` absorbed by the fragile iteration at epsilon = seed.  The
    post-jump measure is then shifted by alpha*(seed + jump).
    """
    _require_atomless(mu)
    jump = physical_jump(mu, alpha)
    notes = []
    if seed is not None:
        if seed <= 0:
            raise ValueError("seed must be positive")
        f_inf, trace = fragile_sequence(mu, alpha, seed)
        notes.append(f"seeded cascade; physical jump of the pre-measure is {jump:.6g}")
        post = mu.shift_truncate(alpha * (seed + f_inf))
        return CascadeReport(time=float(time), epsilon_used=float(seed), trace=list(trace),
                             jump_size=float(f_inf), iterations=len(trace) - 1, post_measure=post,
                             pre_mass=mu.total_mass, notes=notes, seed=float(seed))
    ladder = [epsilon] if epsilon is not None else [10.0 ** (-k) for k in range(1, 13)]
    best = None
    for eps in ladder:
        try:
            f_inf, trace = fragile_sequence(mu, alpha, eps)
        except NumericalError as err:
            notes.append(f"eps={eps:g}: {err}")
            continue
        best = (eps, f_inf, trace)
        if abs(f_inf - jump) <= match_tol:
            break
    if best is None:
        raise NumericalError("fragile iteration failed on every epsilon", {"notes": notes})
    eps, f_inf, trace = best
    if abs(f_inf - jump) > match_tol:
        notes.append(f"fragile limit {f_inf:.3g} differs from jump {jump:.3g} at eps={eps:g}")
    post = mu.shift_truncate(alpha * jump) if jump > 0 else mu
    return CascadeReport(time=float(time), epsilon_used=float(eps), trace=list(trace),
                         jump_size=float(jump), iterations=len(trace) - 1, post_measure=post,
                         pre_mass=mu.total_mass, notes=notes)
