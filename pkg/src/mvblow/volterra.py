"""Deterministic route: the first-kind Volterra equation for the loss, its fixed-point map and Picard iteration."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import brentq
from scipy.special import ndtr

from .cascade import CascadeReport, resolve_blowup
from .core import (Coefficient, LossPath, Measure1D, ModelParams, NumericalError,
                   counter_stream, default_jump_threshold, gaussian_tail_integral, sample)

__all__ = [
    "SolverGrid",
    "SRegion",
    "Kernel",
    "generalized_kernel",
    "gamma_map",
    "volterra_solve",
    "solve_measure",
    "picard",
    "residual",
    "residual_profile",
    "check_S_membership",
    "density_cdf_at",
    "fit_window",
]


@dataclass(frozen=True)
class SolverGrid:
    """Graded time grid t_k = (k*step)^(1/(1-gamma_grid)) on [0, t0]."""

    t0: float
    n: int
    gamma_grid: float = 0.5

    def __post_init__(self):
        if not (self.t0 > 0 and self.n >= 1 and 0 <= self.gamma_grid < 1):
            raise ValueError("need t0 > 0, n >= 1 and 0 <= gamma_grid < 1")

    @property
    def power(self) -> float:
        return 1.0 / (1.0 - self.gamma_grid)

    @property
    def step(self) -> float:
        return self.t0 ** (1.0 / self.power) / self.n

    @property
    def times(self) -> np.ndarray:
        t = (np.arange(self.n + 1) * self.step) ** self.power
        t[-1] = self.t0
        return t


@dataclass(frozen=True)
class SRegion:
    """Loss paths with derivative at most A t^(-gamma) on [0, t0]."""

    gamma: float
    A: float
    t0: float

    def __post_init__(self):
        if not 0 < self.gamma < 0.5:
            raise ValueError("gamma must lie in (0, 1/2)")
        if not (self.A > 0 and self.t0 > 0):
            raise ValueError("A and t0 must be positive")

    def bound_increment(self, t_lo, t_hi):
        g = 1.0 - self.gamma
        return self.A * (np.asarray(t_hi) ** g - np.asarray(t_lo) ** g) / g


class Kernel:
    """Gaussian transition kernels for time-dependent drift b(t) and volatility sigma(t)."""

    def __init__(self, alpha: float, drift: Coefficient | None = None, sigma: Coefficient | None = None):
        self.alpha = float(alpha)
        self.drift = drift if drift is not None else Coefficient(0.0)
        self.sigma = sigma if sigma is not None else Coefficient(1.0)

    def shift(self, t, s):
        return self.drift.integral(t) - self.drift.integral(s)

    def variance(self, t, s):
        return self.sigma.integral_sq(t) - self.sigma.integral_sq(s)

    def hit_kernel(self, dL, t, s):
        """P(a path sitting at 0 at time s is at or below 0 at time t), given loss increment dL."""
        return ndtr((self.alpha * np.asarray(dL) - self.shift(t, s)) / np.sqrt(self.variance(t, s)))

    def lhs(self, mu: Measure1D, t: float, origin: float, F: float) -> float:
        """P(free path from mu ends at or below alpha*F at time t)."""
        c = self.alpha * F - float(self.shift(t, origin))
        return gaussian_tail_integral(mu, c, math.sqrt(float(self.variance(t, origin))))


def generalized_kernel(params: ModelParams) -> Kernel:
    if params.spatial_drift:
        raise ValueError("space-dependent drift is only supported by the particle route")
    lo, hi = params.sigma_bounds
    if np.any(params.sigma.vals < lo) or np.any(params.sigma.vals > hi):
        raise ValueError("sigma bound violated")
    return Kernel(params.alpha, params.drift, params.sigma)


# marching solver

class _Segment:
    """Solves one continuous stretch of the loss starting at ``origin``."""

    def __init__(self, mu, kern, origin):
        self.mu, self.kern, self.origin = mu, kern, origin
        self.t = [origin]
        self.F = [0.0]

    def _past(self, tk):
        t = np.asarray(self.t)
        F = np.asarray(self.F)
        dF = np.diff(F)
        keep = dF > 0
        s = 0.5 * (t[1:] + t[:-1])[keep]
        Fm = 0.5 * (F[1:] + F[:-1])[keep]
        return (dF[keep], Fm, self.kern.shift(tk, s), np.sqrt(self.kern.variance(tk, s)))

    def residual_fn(self, tk):
        kern, a = self.kern, self.kern.alpha
        dF, Fm, sh, sd = self._past(tk)
        t_prev, F_prev = self.t[-1], self.F[-1]
        s_last = 0.5 * (t_prev + tk)
        sh_last = float(kern.shift(tk, s_last))
        sd_last = math.sqrt(float(kern.variance(tk, s_last)))

        def h(y):
            rhs = float(np.dot(ndtr((a * (y - Fm) - sh) / sd), dF)) if len(dF) else 0.0
            rhs += float(ndtr((a * 0.5 * (y - F_prev) - sh_last) / sd_last)) * (y - F_prev)
            return kern.lhs(self.mu, tk, self.origin, y) - rhs

        return h

    def recent_median(self, window=10):
        inc = np.diff(self.F[-(window + 1):])
        inc = inc[inc > 0]
        return float(np.median(inc)) if len(inc) else 0.0

    def try_step(self, tk, bracket, mass_cap):
        """Smallest increment y - F_prev in (0, bracket] with h(y) = 0; None if the bracket fails."""
        h = self.residual_fn(tk)
        F_prev = self.F[-1]
        if h(F_prev) <= 0:
            return 0.0
        room = max(mass_cap - F_prev, 0.0)
        top = min(bracket, room)
        if top <= 0:
            return 0.0
        last = self.F[-1] - self.F[-2] if len(self.F) > 1 else 0.0
        dt_ratio = (tk - self.t[-1]) / (self.t[-1] - self.t[-2]) if len(self.t) > 1 else 1.0
        d = min(max(last * dt_ratio, 1e-13), top)
        lo = 0.0
        while True:
            hv = h(F_prev + d)
            if hv <= 0:
                break
            lo = d
            if d >= top:
                if top >= room:
                    return top  # every remaining unit of mass is absorbed
                return None
            d = min(2.0 * d, top)
        y = brentq(h, F_prev + lo, F_prev + d, xtol=1e-15, rtol=1e-13)
        return y - F_prev

    def accept(self, tk, inc):
        self.t.append(tk)
        self.F.append(self.F[-1] + inc)

    def alive_cdf(self, tk, y, F_now=None):
        """Sub-probability cdf of surviving positions at tk, on the points ``y``."""
        kern, a = self.kern, self.kern.alpha
        F_now = self.F[-1] if F_now is None else F_now
        c = a * F_now - float(kern.shift(tk, self.origin))
        s = math.sqrt(float(kern.variance(tk, self.origin)))
        base = gaussian_tail_integral(self.mu, c, s)
        free = np.array([gaussian_tail_integral(self.mu, c + yy, s) for yy in y]) - base
        dF, Fm, sh, sd = self._past(tk)
        if len(dF):
            arg0 = (a * (F_now - Fm) - sh) / sd
            hit = (ndtr(arg0[None, :] + y[:, None] / sd[None, :]) - ndtr(arg0)[None, :]) @ dF
            free = free - hit
        return free


def density_cdf_at(seg: _Segment, tk: float, F_now: float | None = None, n: int = 1500) -> Measure1D:
    mu, kern = seg.mu, seg.kern
    s = math.sqrt(float(kern.variance(tk, seg.origin)))
    span = mu.support_max + 8.0 * s + abs(float(kern.shift(tk, seg.origin))) + 1.0
    y = np.unique(np.concatenate([[0.0], np.geomspace(1e-9, min(1.0, span), 300),
                                  np.linspace(0.0, span, n)]))
    F = seg.alive_cdf(tk, y, F_now)
    F[0] = 0.0
    return Measure1D.from_cdf_table(y, F)


def _restart_nodes(t_now, t_next, m):
    if m <= 0 or t_next <= t_now:
        return []
    u = (np.arange(1, m) / m) ** 2
    return list(t_now + u * (t_next - t_now))


def solve_measure(mu: Measure1D, kern: Kernel, times, loss0: float = 0.0, jump_scale: float = 0.1,
                  bracket_floor: float = 0.05, restart_nodes: int = 16, jump_threshold: float | None = None,
                  max_refine: int = 16):
    """March the Volterra equation for initial (sub-)measure ``mu`` on ``times``.

    The loss is ``loss0`` plus the absorbed mass.  When no root exists within
    the bracket, the step's fresh loss seeds a cascade on the end-of-step
    measure; a macroscopic cascade is registered as a jump and the equation
    restarts from the post-jump measure, otherwise the step is halved.
    """
    times = [float(t) for t in times]
    out_t, out_L, jumps, reports = [times[0]], [loss0], [], []
    seg = _Segment(mu, kern, times[0])
    base = loss0
    mass_cap = mu.total_mass
    queue = list(times[1:])
    depth = 0

    def push(tk):
        seg_val = min(base + seg.F[-1], 1.0)
        out_t.append(tk)
        out_L.append(seg_val)

    while queue:
        tk = queue.pop(0)
        if mass_cap - seg.F[-1] <= 1e-13:
            seg.accept(tk, 0.0)
            push(tk)
            continue
        bracket = max(bracket_floor, 10.0 * seg.recent_median())
        inc = seg.try_step(tk, bracket, mass_cap)
        if inc is not None:
            seg.accept(tk, inc)
            push(tk)
            depth = 0
            continue
        t_prev, F_prev = seg.t[-1], seg.F[-1]
        eps0 = seg.residual_fn(tk)(F_prev)
        nu = density_cdf_at(seg, tk)
        rep = resolve_blowup(nu, kern.alpha, time=tk, seed=max(eps0, 1e-300))
        if rep.total_loss <= bracket:
            if depth < max_refine:
                depth += 1
                queue[:0] = [0.5 * (t_prev + tk), tk]
                continue
            inc = seg.try_step(tk, mass_cap, mass_cap)
            if inc is None:
                raise NumericalError("no root after cascade fallback", {
                    "time": tk, "loss": base + F_prev, "bracket": bracket})
            seg.accept(tk, inc)
            push(tk)
            depth = 0
            continue
        depth = 0
        reports.append(rep)
        post = rep.post_measure
        jump = max(mass_cap - F_prev - post.total_mass, 0.0)
        base = base + F_prev + jump
        out_t.append(tk)
        out_L.append(min(base, 1.0))
        thr = jump_threshold if jump_threshold is not None else default_jump_threshold(tk - t_prev, jump_scale)
        if jump > thr:
            jumps.append((len(out_t) - 1, jump))
        else:
            rep.notes.append(f"jump {jump:.3g} below registration threshold {thr:.3g}")
        seg = _Segment(post, kern, tk)
        mass_cap = post.total_mass
        if queue:
            queue[:0] = _restart_nodes(tk, queue[0], restart_nodes)
    path = LossPath(np.array(out_t), np.maximum.accumulate(np.array(out_L)), jumps, validate=False)
    return path, reports


def volterra_solve(params: ModelParams, grid: SolverGrid | np.ndarray, **kw):
    """Loss path of the model on ``grid`` with blow-ups resolved physically.

    Returns ``(LossPath, reports)``; the path grid includes extra nodes
    inserted after each restart.
    """
    kern = generalized_kernel(params)
    times = grid.times if isinstance(grid, SolverGrid) else np.asarray(grid, dtype=float)
    return solve_measure(params.initial, kern, times, **kw)


# fixed-point map

def _kernel_matrix(kern: Kernel, times, ell):
    t = np.asarray(times)
    mids = 0.5 * (t[1:] + t[:-1])
    lm = 0.5 * (ell[1:] + ell[:-1])
    tk = t[1:, None]
    sj = mids[None, :]
    mask = np.tri(len(mids), dtype=bool)
    var = np.where(mask, kern.variance(tk, sj), 1.0)
    arg = (kern.alpha * (ell[1:, None] - lm[None, :]) - kern.shift(tk, sj)) / np.sqrt(var)
    return np.where(mask, ndtr(arg), 0.0)


def _lhs_vector(mu, kern, times, ell):
    return np.array([kern.lhs(mu, t, times[0], l) for t, l in zip(times[1:], ell[1:])])


def gamma_map(ell: LossPath, params: ModelParams, grid: SolverGrid, method: str = "kernel",
              M: int = 100_000, seed: int = 0) -> LossPath:
    """Gamma[ell]_t = P(first hitting time of X0 + int b + int sigma dB - alpha*ell is <= t)."""
    times = grid.times if isinstance(grid, SolverGrid) else np.asarray(grid, dtype=float)
    if len(ell.grid) != len(times) or not np.allclose(ell.grid, times, rtol=1e-12, atol=0):
        raise ValueError("loss path grid does not match the solver grid")
    vals = ell.values
    if np.any(np.diff(vals) < -1e-12):
        raise ValueError("ell must be nondecreasing")
    if method == "kernel":
        kern = generalized_kernel(params)
        K = _kernel_matrix(kern, times, vals)
        rhs = _lhs_vector(params.initial, kern, times, vals)
        inc = solve_triangular(K, rhs, lower=True, check_finite=False)
        out = np.concatenate([[0.0], np.cumsum(np.clip(inc, 0.0, None))])
    elif method in ("mc", "monte-carlo"):
        out = _gamma_mc(vals, params, times, M, seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    return LossPath(times, np.clip(out, 0.0, 1.0), validate=False)


def _gamma_mc(ell, params, times, M, seed, chunk=250_000):
    """Monte Carlo first-passage probabilities against a fixed loss path.

    Crossings inside a step are caught with the Brownian-bridge probability,
    which is exact for paths whose drift is linear within the step.
    """
    kern = generalized_kernel(params)
    hits = np.zeros(len(times))
    for c0 in range(0, M, chunk):
        m = min(chunk, M - c0)
        x = sample(params.initial, counter_stream(seed, 0, c0), m)
        alive = np.ones(m, bool)
        for k in range(1, len(times)):
            rng = counter_stream(seed, k, c0)
            z = rng.standard_normal(m)
            u = rng.random(m)
            var = float(kern.variance(times[k], times[k - 1]))
            drift = float(kern.shift(times[k], times[k - 1])) - params.alpha * (ell[k] - ell[k - 1])
            xn = x + drift + math.sqrt(var) * z
            cross = xn <= 0
            pos = ~cross & alive
            bridge = np.exp(-2.0 * np.maximum(x[pos], 0) * xn[pos] / var)
            cross[pos] = u[pos] < bridge
            newly = cross & alive
            hits[k] += newly.sum()
            alive &= ~newly
            x = xn
    return np.cumsum(hits) / M


def picard(params: ModelParams, grid: SolverGrid, ell0: LossPath | None = None, n_iter: int = 30,
           tol: float = 1e-9, region: SRegion | None = None):
    """Iterate ell <- Gamma[ell] from ``ell0`` (zero by default).

    Returns ``(path, ratios, sup_diffs, in_region)`` where ratios are successive
    sup-norm contraction factors.  Iteration stops once a sup difference is
    at most ``tol``; the map itself is only accurate to about 1e-10, so that
    last difference yields no ratio.
    """
    times = grid.times if isinstance(grid, SolverGrid) else np.asarray(grid, dtype=float)
    cur = ell0 if ell0 is not None else LossPath(times, np.zeros(len(times)))
    diffs, ratios, inside = [], [], []
    for _ in range(n_iter):
        nxt = gamma_map(cur, params, grid)
        if np.any(np.diff(nxt.values) < -1e-12) or nxt.values.min() < 0 or nxt.values.max() > 1:
            raise NumericalError("Picard iterate left the admissible set", {"iteration": len(diffs)})
        d = float(np.max(np.abs(nxt.values - cur.values)))
        if diffs and d > tol:
            ratios.append(d / diffs[-1])
        diffs.append(d)
        if region is not None:
            inside.append(check_S_membership(nxt, region)[0])
        cur = nxt
        if d <= tol:
            break
    return cur, ratios, diffs, inside


def residual_profile(L: LossPath, params: ModelParams) -> np.ndarray:
    """|LHS - RHS| of the Volterra identity at each node; NaN from the first jump on."""
    out = np.full(len(L.grid), np.nan)
    n = L.jumps[0][0] if L.jumps else len(L.grid)
    out[0] = 0.0
    if n < 2:
        return out
    kern = generalized_kernel(params)
    t = L.grid[:n]
    F = L.values[:n] - L.values[0]
    K = _kernel_matrix(kern, t, F)
    lhs = _lhs_vector(params.initial, kern, t, F)
    out[1:n] = np.abs(lhs - K @ np.diff(F))
    return out


def residual(L: LossPath, params: ModelParams, grid=None) -> float:
    """sup over nodes of |LHS - RHS| of the Volterra identity, up to the first jump."""
    r = residual_profile(L, params)
    return float(np.nanmax(r)) if np.any(np.isfinite(r)) else 0.0


def fit_window(times, min_nodes: int = 20):
    """Earliest decade [t_i, 10 t_i] containing at least ``min_nodes`` nodes."""
    t = np.asarray(times)
    pos = np.nonzero(t > 0)[0]
    for i in pos:
        j = np.searchsorted(t, 10.0 * t[i], side="right")
        if j - i >= min_nodes:
            return int(i), int(j)
    return None


def check_S_membership(L: LossPath, region: SRegion, min_nodes: int = 20):
    """(member, fitted log-log slope of L' on the first resolved decade, smallest valid A)."""
    path = L.restrict(region.t0)
    t = path.grid
    inc = path.continuous_increments()
    if len(t) < 2:
        return True, float("nan"), 0.0
    g = 1.0 - region.gamma
    cap = (t[1:] ** g - t[:-1] ** g) / g
    A_fit = float(np.max(inc / cap)) if len(inc) else 0.0
    member = bool(np.all(inc <= region.A * cap * (1 + 1e-9) + 1e-15)) and not path.jumps
    slope = float("nan")
    w = fit_window(t, min_nodes)
    if w is not None:
        i, j = w
        d = inc[i:j - 1] / np.diff(t)[i:j - 1]
        tm = np.sqrt(t[i:j - 1] * t[i + 1:j])
        ok = d > 0
        if ok.sum() >= 3:
            slope = float(np.polyfit(np.log(tm[ok]), np.log(d[ok]), 1)[0])
    return member, slope, A_fit
