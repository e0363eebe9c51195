"""Diagnostics built on the solvers: blow-up threshold, envelopes, minimality, regularity and contraction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DecayProfile, LossPath, Measure1D, ModelParams, profile_measure
from .volterra import SRegion, SolverGrid, check_S_membership, gamma_map, generalized_kernel, solve_measure, volterra_solve

__all__ = [
    "blowup_threshold",
    "deleted_measure",
    "epsilon_deleted_solve",
    "EnvelopeStudy",
    "envelope_study",
    "h1_norm",
    "explosion_time",
    "minimality_check",
    "monte_carlo_minimality",
    "exponent_study",
    "random_S_path",
    "contraction_ratio",
    "contraction_window",
    "contraction_test",
]


def blowup_threshold(nu0: Measure1D, alpha: float) -> bool:
    """True when alpha exceeds twice the mean of ``nu0`` (a jump is then unavoidable)."""
    if not nu0.is_probability:
        raise ValueError("nu0 must be a probability measure")
    m0 = nu0.mean()
    if not math.isfinite(m0):
        raise ValueError("nu0 has infinite mean")
    return bool(alpha > 2.0 * m0)


def _translate(mu: Measure1D, s: float) -> Measure1D:
    doc = mu.to_dict()
    for p in doc["pieces"]:
        p["a"] += s
        p["b"] += s
    for a in doc["atoms"]:
        a["x"] += s
    return Measure1D.from_dict(doc, allow_excess=True)


def deleted_measure(nu0: Measure1D, alpha: float, epsilon: float):
    """Initial data of the epsilon-deleted problem: ``(measure, initial loss, shift)``.

    Mass below epsilon is removed up front and counted as loss; the survivors
    are moved down by alpha times that loss plus epsilon/4.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    m_eps = float(nu0.cdf(epsilon))
    if alpha > 0 and m_eps > epsilon / (4.0 * alpha):
        raise ValueError(
            f"epsilon too large: nu0(0, eps] = {m_eps:.6g} exceeds eps/(4 alpha) = {epsilon / (4 * alpha):.6g}")
    shift = alpha * m_eps + 0.25 * epsilon
    upper = _translate(nu0.shift_truncate(epsilon), epsilon - shift)
    return upper, m_eps, shift


def epsilon_deleted_solve(params: ModelParams, epsilon: float, grid, **kw) -> LossPath:
    """Loss of the epsilon-deleted problem on ``grid``; starts at nu0(0, epsilon]."""
    mu, m_eps, _ = deleted_measure(params.initial, params.alpha, epsilon)
    kern = generalized_kernel(params)
    times = grid.times if isinstance(grid, SolverGrid) else np.asarray(grid, dtype=float)
    path, _ = solve_measure(mu, kern, times, loss0=m_eps, **kw)
    return path


@dataclass
class EnvelopeStudy:
    epsilons: list
    lower: LossPath
    uppers: dict
    gaps: dict = field(default_factory=dict)
    t1: float = float("nan")
    above: dict = field(default_factory=dict)

    def __post_init__(self):
        if list(self.epsilons) != sorted(self.epsilons, reverse=True):
            raise ValueError("epsilons must be decreasing")

    @property
    def gaps_decreasing(self) -> bool:
        g = [self.gaps[e] for e in self.epsilons]
        return all(b < a for a, b in zip(g, g[1:]))

    def to_rows(self):
        return [{"epsilon": e, "gap": self.gaps[e], "above_everywhere": self.above.get(e)} for e in self.epsilons]


def envelope_study(params: ModelParams, epsilons, grid: SolverGrid, t1: float | None = None, **kw) -> EnvelopeStudy:
    """Compare the solver's loss with epsilon-deleted losses on [0, t1].

    ``t1`` defaults to half the first jump time, or the grid end without jumps.
    """
    eps = sorted((float(e) for e in epsilons), reverse=True)
    lower, _ = volterra_solve(params, grid, **kw)
    if t1 is None:
        t1 = 0.5 * lower.jump_times[0] if lower.jumps else float(lower.grid[-1])
    study = EnvelopeStudy(eps, lower, {}, t1=float(t1))
    mask = lower.grid <= t1 + 1e-15
    for e in eps:
        up = epsilon_deleted_solve(params, e, grid, **kw)
        study.uppers[e] = up
        diff = up(lower.grid[mask]) - lower.values[mask]
        study.gaps[e] = float(np.max(np.abs(diff)))
        study.above[e] = bool(np.all(diff > 0))
    return study


def h1_norm(L: LossPath, t: float) -> float:
    """(int_0^t L'(s)^2 ds)^(1/2) from grid slopes; infinite past a registered jump."""
    if t < L.grid[0] or t > L.grid[-1] + 1e-12:
        raise ValueError("t outside the loss path grid")
    if any(L.grid[k] <= t for k, _ in L.jumps):
        return math.inf
    g = L.grid
    slopes = L.derivative()
    lo, hi = g[:-1], np.minimum(g[1:], t)
    w = np.clip(hi - lo, 0.0, None)
    return float(math.sqrt(np.sum(slopes**2 * w)))


def explosion_time(L: LossPath, ceiling: float = 1e3) -> float:
    """First grid time where the running H^1 norm passes ``ceiling`` or a jump occurs; inf if neither."""
    g = L.grid
    sq = np.concatenate([[0.0], np.cumsum(L.derivative() ** 2 * np.diff(g))])
    over = np.nonzero(np.sqrt(sq) > ceiling)[0]
    t = float(g[over[0]]) if len(over) else math.inf
    if L.jumps:
        t = min(t, float(g[L.jumps[0][0]]))
    return t


def minimality_check(L_ref: LossPath, L_candidate: LossPath, tol=1e-9, t_max: float | None = None) -> dict:
    """Largest shortfall (L_ref - L_candidate)^+ over the candidate's nodes.

    ``tol`` may be a scalar or an array over those nodes.  Grids may differ:
    the reference is interpolated onto the candidate grid.
    """
    t = L_candidate.grid
    mask = np.ones(len(t), bool) if t_max is None else t <= t_max + 1e-15
    excess = np.clip(L_ref(t[mask]) - L_candidate.values[mask], 0.0, None)
    tol_arr = np.broadcast_to(np.asarray(tol, dtype=float), t.shape)[mask]
    k = int(np.argmax(excess - tol_arr)) if len(excess) else 0
    return {
        "max_excess": float(excess.max()) if len(excess) else 0.0,
        "worst_time": float(t[mask][k]) if len(excess) else float("nan"),
        "passed": bool(np.all(excess <= tol_arr)),
    }


def monte_carlo_minimality(L_ref: LossPath, paths, t_max: float | None = None, n_se: float = 3.0) -> dict:
    """One-sided check that simulated losses are not below the reference.

    Per node the mean of L_ref - L^N over repetitions must not exceed
    ``n_se`` standard errors.  All paths must share one grid.
    """
    t = paths[0].grid
    mask = np.ones(len(t), bool) if t_max is None else t <= t_max + 1e-15
    ref = L_ref(t[mask])
    d = np.array([ref - p.values[mask] for p in paths])
    mean = d.mean(axis=0)
    se = d.std(axis=0, ddof=1) / math.sqrt(len(paths)) if len(paths) > 1 else np.zeros(mask.sum())
    excess = np.clip(mean, 0.0, None)
    ok = excess <= n_se * se + 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, excess / se, np.where(excess > 1e-12, np.inf, 0.0))
    k = int(np.argmax(z))
    return {"max_mean_excess": float(excess.max()), "worst_z": float(z[k]), "se_at_worst": float(se[k]),
            "worst_time": float(t[mask][k]), "passed": bool(np.all(ok)), "reps": len(paths)}


def exponent_study(beta_list, alpha: float, grid: SolverGrid, C: float = 1.0, D: float = 0.5,
                   x_star: float = 1.0, min_nodes: int = 20) -> list:
    """Fitted short-time log-log slope of L' for initial densities ~ C x^beta near 0."""
    rows = []
    for beta in beta_list:
        if not 0 < beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        mu = profile_measure(DecayProfile(C, D, x_star, beta))
        params = ModelParams(alpha, mu)
        L, _ = volterra_solve(params, grid)
        gamma = max(min(0.5 * (1 - beta), 0.499), 1e-6)
        _, slope, A_fit = check_S_membership(L, SRegion(gamma, 1.0, grid.t0), min_nodes=min_nodes)
        rows.append({"beta": float(beta), "alpha": float(alpha), "slope": slope,
                     "expected": -0.5 * (1 - beta), "A_fit": A_fit, "flagged": not math.isfinite(slope)})
    return rows


def random_S_path(region: SRegion, times, rng: np.random.Generator, knots: int = 8) -> LossPath:
    """Random loss path with L' = A u(t) t^(-gamma), u a random piecewise-linear profile in [0, 1]."""
    t = np.asarray(times, dtype=float)
    g = 1.0 - region.gamma
    cap = region.A * (t[1:] ** g - t[:-1] ** g) / g
    u = np.interp(0.5 * (t[1:] + t[:-1]) / t[-1], np.linspace(0, 1, knots), rng.random(knots))
    vals = np.concatenate([[0.0], np.cumsum(u * cap)])
    return LossPath(t, np.minimum(vals, 1.0), validate=False)


def contraction_ratio(params: ModelParams, grid: SolverGrid, ell: LossPath, ell_bar: LossPath) -> float:
    d = float(np.max(np.abs(ell.values - ell_bar.values)))
    if d == 0:
        return 0.0
    G1 = gamma_map(ell, params, grid)
    G2 = gamma_map(ell_bar, params, grid)
    return float(np.max(np.abs(G1.values - G2.values))) / d


def contraction_window(params: ModelParams, gamma: float = 0.3, A: float = 1.0, t_start: float = 1.0,
                       target: float = 0.5, n_nodes: int = 200, n_probe: int = 8, seed: int = 0,
                       shrink: float = 0.5, t_min: float = 1e-8):
    """Largest t0 on the ladder t_start * shrink^k whose probe pairs contract by ``target``.

    Probes are random pairs of paths in S(gamma, A, t0) plus the extreme pair
    (zero path, maximal path).  Returns ``(t0, probe ratios)``.
    """
    t0 = t_start
    rng = np.random.default_rng(seed)
    while t0 >= t_min:
        grid = SolverGrid(t0, n_nodes)
        region = SRegion(gamma, A, t0)
        t = grid.times
        top = np.minimum(np.concatenate([[0.0], np.cumsum(region.bound_increment(t[:-1], t[1:]))]), 1.0)
        ratios = [contraction_ratio(params, grid, LossPath(t, np.zeros(len(t))), LossPath(t, top, validate=False))]
        for _ in range(n_probe):
            ratios.append(contraction_ratio(params, grid, random_S_path(region, t, rng),
                                            random_S_path(region, t, rng)))
        if max(ratios) <= target:
            return t0, ratios
        t0 *= shrink
    raise ValueError(f"no contraction window above t_min={t_min}")


def contraction_test(params: ModelParams, region: SRegion, n_pairs: int = 50, seed: int = 1,
                     n_nodes: int = 200) -> dict:
    grid = SolverGrid(region.t0, n_nodes)
    rng = np.random.default_rng(seed)
    ratios = [contraction_ratio(params, grid, random_S_path(region, grid.times, rng),
                                random_S_path(region, grid.times, rng)) for _ in range(n_pairs)]
    return {"t0": region.t0, "gamma": region.gamma, "A": region.A, "ratios": ratios,
            "max_ratio": float(max(ratios)), "mean_ratio": float(np.mean(ratios))}
