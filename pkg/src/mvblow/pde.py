"""Finite-volume evolution of the surviving density with flux feedback and jumps.

Cells are the intervals ((j-1)h, jh], j = 1..nx, holding cell averages.  The
boundary x = 0 is absorbing: the gradient there is taken from the quadratic
through V(0) = 0 and the first two cell centres.  The far boundary is closed
for diffusion.  Each step is backward Euler in diffusion and upwind
advection, so the step matrix is an M-matrix: positivity and the maximum
principle hold for any dt, and mass is conserved up to the boundary fluxes,
which are booked as loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import brentq
from scipy.special import ndtr

from .cascade import CascadeReport, resolve_blowup
from .core import Coefficient, LossPath, Measure1D, ModelParams, NumericalError, default_jump_threshold

__all__ = [
    "DensityGrid",
    "BlowupDetected",
    "image_kernel",
    "step",
    "detect_and_jump",
    "run",
    "pde_solve",
    "heatmap_rows",
    "heatmap_svg",
    "three_bump_measure",
    "THREE_BUMPS",
    "THREE_BUMP_ALPHA",
]


class BlowupDetected(NumericalError):
    """No self-consistent flux within the allowed loss per step."""


def image_kernel(t: float, x0: float, x):
    """Density at time t of Brownian motion from x0 killed at 0."""
    x = np.asarray(x, dtype=float)
    s = math.sqrt(t)
    c = 1.0 / (s * math.sqrt(2 * math.pi))
    return c * (np.exp(-0.5 * ((x - x0) / s) ** 2) - np.exp(-0.5 * ((x + x0) / s) ** 2))


@dataclass
class DensityGrid:
    x_max: float
    nx: int
    values: np.ndarray
    loss: float = 0.0
    time: float = 0.0
    far_loss: float = 0.0
    clipped: float = 0.0
    rate: float = 0.0
    flux_integral: float = 0.0
    log: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.nx,):
            raise ValueError(f"expected {self.nx} cell values, got {self.values.shape}")
        if not self.x_max > 0 or self.nx < 3:
            raise ValueError("need x_max > 0 and nx >= 3")

    @property
    def h(self) -> float:
        return self.x_max / self.nx

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.h

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.nx + 1) * self.h

    @property
    def mass(self) -> float:
        return float(self.h * self.values.sum())

    @property
    def sup(self) -> float:
        return float(self.values.max()) if self.nx else 0.0

    @property
    def balance(self) -> float:
        """mass + loss + far-boundary outflow - 1."""
        return self.mass + self.loss + self.far_loss - 1.0

    def boundary_gradient(self, v=None) -> float:
        v = self.values if v is None else v
        return (9.0 * v[0] - v[1]) / (3.0 * self.h)

    @classmethod
    def from_measure(cls, mu: Measure1D, x_max: float, nx: int, smooth: float = 0.0, time: float = 0.0,
                     loss: float | None = None) -> "DensityGrid":
        """Cell averages of ``mu``; atoms are replaced by the killed heat kernel at time ``smooth``.

        ``loss`` defaults to the mass missing from the grid, so mass + loss = 1.
        """
        edges = np.arange(nx + 1) * (x_max / nx)
        a, b, c, ax, am = mu.arrays()
        cont = Measure1D([(lo, hi, "poly", cc) for lo, hi, cc in zip(a, b, c)], allow_excess=True)
        cells = np.diff(cont.cdf(edges))
        if len(ax):
            if not smooth > 0:
                raise ValueError("atoms need smooth > 0 to be put on the grid")
            s = math.sqrt(smooth)
            for x0, m in zip(ax, am):
                G = ndtr((edges - x0) / s) - ndtr((edges + x0) / s)
                cells = cells + m * np.diff(G)
        vals = np.clip(cells, 0.0, None) / (x_max / nx)
        g = cls(x_max, nx, vals, time=time)
        g.loss = (1.0 - g.mass) if loss is None else float(loss)
        return g

    def to_measure(self, allow_excess: bool = False) -> Measure1D:
        return Measure1D.from_table(self.edges, np.append(self.values, 0.0), kind="const",
                                    allow_excess=allow_excess)

    def copy(self, **kw) -> "DensityGrid":
        kw.setdefault("values", self.values.copy())
        kw.setdefault("log", list(self.log))
        return replace(self, **kw)


def _step_matrix(nx, h, a, v, dt):
    # banded form of I - dt*(diffusion + advection), rows = cells
    ab = np.zeros((3, nx))
    d = a / h**2
    diag = np.full(nx, -2.0 * d)
    up = np.full(nx, d)  # coefficient of V_{j+1} in row j
    lo = np.full(nx, d)  # coefficient of V_{j-1} in row j
    diag[0] = -4.0 * d
    up[0] = 4.0 * d / 3.0
    diag[-1] = -d
    up[-1] = lo[0] = 0.0
    w = abs(v) / h
    diag -= w
    if v < 0:
        up[:-1] += w
    else:
        lo[1:] += w
    ab[0, 1:] = -dt * up[:-1]
    ab[1] = 1.0 - dt * diag
    ab[2, :-1] = -dt * lo[1:]
    return ab


def _coeffs(drift, sigma, t0, t1):
    dt = t1 - t0
    b = float(drift.integral(t1) - drift.integral(t0)) / dt
    a = 0.5 * float(sigma.integral_sq(t1) - sigma.integral_sq(t0)) / dt
    return b, a


def _advance(state: DensityGrid, c, dt, b, a):
    """One backward-Euler step at feedback speed c: (values, boundary loss, far loss)."""
    v = b - c
    V = solve_banded((1, 1), _step_matrix(state.nx, state.h, a, v, dt), state.values,
                     check_finite=False)
    diff_out = dt * a * (9.0 * V[0] - V[1]) / (3.0 * state.h)
    adv_out = dt * max(-v, 0.0) * V[0]
    far = dt * max(v, 0.0) * V[-1]
    return V, diff_out, adv_out, far


def step(state: DensityGrid, alpha: float, dt: float, drift: float = 0.0, diffusivity: float = 0.5,
         bracket: float | None = None, inner_iter: int = 5, inner_tol: float = 1e-12) -> DensityGrid:
    """Advance ``state`` by ``dt`` with the feedback speed alpha*L' made self-consistent.

    The feedback speed is found by fixed-point iteration from zero (which
    approaches the smallest consistent speed), followed by a bracketed root
    search if ``inner_iter`` iterations do not settle.  ``bracket`` caps the
    loss of a single step; if no consistent speed keeps the loss below it,
    BlowupDetected is raised.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    b, a = drift, diffusivity
    if bracket is None:
        bracket = 1.0

    def loss_of(c):
        V, d_out, a_out, far = _advance(state, c, dt, b, a)
        return V, d_out, a_out, far

    res = loss_of(0.0)
    c = 0.0
    if alpha > 0:
        converged = False
        for _ in range(inner_iter):
            c_new = alpha * (res[1] + res[2]) / dt
            if abs(c_new - c) <= inner_tol * (1.0 + c_new):
                converged = True
                break
            c = c_new
            res = loss_of(c)
        if not converged:
            g = lambda cc: cc - alpha * sum(loss_of(cc)[1:3]) / dt
            c_cap = alpha * bracket / dt
            # smallest sign change of g above the last iterate, on a geometric ladder
            lo, hi = c, None
            if g(c) >= 0:
                lo, hi = 0.0, c
            for cc in np.geomspace(max(c, 1e-12 * c_cap) * 1.25, c_cap, 40) if hi is None else ():
                if cc <= lo:
                    continue
                if g(cc) >= 0:
                    hi = cc
                    break
                lo = cc
            if hi is None:
                raise BlowupDetected("no self-consistent flux within the step bracket",
                                     {"time": state.time + dt, "bracket": bracket, "speed": c})
            c = hi if g(lo) >= 0 else brentq(g, lo, hi, xtol=1e-14 * (1 + hi), rtol=1e-13, maxiter=200)
            res = loss_of(c)
    V, d_out, a_out, far = res
    if d_out + a_out > bracket:
        raise BlowupDetected("step loss exceeds the bracket", {"time": state.time + dt, "loss": d_out + a_out})
    neg = V < 0
    clip = float(-V[neg].sum() * state.h) if np.any(neg) else 0.0
    if clip:
        V = np.where(neg, 0.0, V)
    out = state.copy(values=V, time=state.time + dt, loss=state.loss + d_out + a_out,
                     far_loss=state.far_loss + far, clipped=state.clipped + clip,
                     rate=(d_out + a_out) / dt, flux_integral=state.flux_integral + d_out)
    if clip:
        out.log.append(f"t={out.time:.6g}: clipped negative mass {clip:.3g}")
    return out


def _remap_shift(state: DensityGrid, mu: Measure1D) -> np.ndarray:
    return np.clip(np.diff(mu.cdf(state.edges)), 0.0, None) / state.h


def detect_and_jump(state: DensityGrid, alpha: float, seed: float | None = None,
                    time: float | None = None):
    """Resolve a blow-up of the tabulated measure.

    Without ``seed`` this triggers only when the physical jump of the grid
    measure is positive.  With ``seed`` (the fresh loss of the step that
    failed) the seeded cascade is used.  Returns ``(state, report)``; the
    report is None when nothing happened.
    """
    if alpha <= 0 or state.mass <= 0:
        return state, None
    mu = state.to_measure(allow_excess=True)
    t = state.time if time is None else time
    if seed is None:
        rep = resolve_blowup(mu, alpha, time=t)
        if rep.jump_size <= 0:
            return state, None
        total = rep.jump_size
    else:
        rep = resolve_blowup(mu, alpha, time=t, seed=max(seed, 1e-300))
        total = rep.seed + rep.jump_size
    V = _remap_shift(state, rep.post_measure)
    new = state.copy(values=V)
    absorbed = state.mass - new.mass
    new.loss = state.loss + absorbed
    new.log.append(f"t={t:.6g}: jump {absorbed:.6g} (shift {alpha * total:.6g})")
    return new, rep


def run(params: ModelParams, grid: DensityGrid, horizon: float, dt: float, jump_scale: float = 0.1,
        bracket_floor: float = 0.05, max_refine: int = 16, snapshots: int = 200, heat_bins: int = 200,
        jump_threshold: float | None = None):
    """Evolve ``grid`` to ``horizon``; returns ``(LossPath, heatmap, reports)``.

    ``heatmap`` has keys ``t`` (m,), ``x`` (k,) bin centres and ``V`` (m, k)
    bin averages.  Blow-ups are handled like the Volterra route: when a step
    has no consistent flux, its fresh loss seeds a cascade on the end-of-step
    density; a cascade not larger than the bracket halves the step instead.
    """
    if params.spatial_drift:
        raise ValueError("the grid solver supports time-dependent drift only")
    if not dt > 0:
        raise ValueError("dt must be positive")
    alpha = params.alpha
    drift, sigma = params.drift, params.sigma
    state = grid.copy()
    t_end = float(horizon)
    n = max(1, int(math.ceil((t_end - state.time) / dt - 1e-9)))
    targets = state.time + (t_end - state.time) * np.arange(1, n + 1) / n if t_end > state.time else []
    ts, Ls, jumps, reports = [state.time], [state.loss], [], []
    incs = []
    snap_t = np.linspace(state.time, t_end, snapshots) if snapshots > 1 else np.array([t_end])
    bins = np.linspace(0.0, state.x_max, heat_bins + 1)
    heat_rows, heat_t = [], []
    max0 = state.sup

    def snap(s):
        cum = np.concatenate([[0.0], np.cumsum(s.values) * s.h])
        heat_rows.append(np.diff(np.interp(bins, s.edges, cum)) / np.diff(bins))
        heat_t.append(s.time)

    worst = {"balance": abs(state.balance), "sup": state.sup}
    si = 0
    while si < len(snap_t) and snap_t[si] <= state.time + 1e-12:
        snap(state)
        si += 1

    for t_next in targets:
        while state.time < t_next - 1e-14:
            if state.mass <= 1e-14:
                state = state.copy(time=float(t_next))
                break
            h_try, depth = t_next - state.time, 0
            while True:
                t0, t1 = state.time, state.time + h_try
                b, a = _coeffs(drift, sigma, t0, t1)
                recent = np.median(incs[-10:]) if incs else 0.0
                bracket = max(bracket_floor, 10.0 * recent)
                try:
                    new = step(state, alpha, h_try, b, a, bracket=bracket)
                    incs.append(new.loss - state.loss)
                    state = new
                    ts.append(state.time)
                    Ls.append(state.loss)
                    break
                except BlowupDetected:
                    frozen = step(state, 0.0, h_try, b, a, bracket=math.inf)
                    eps0 = frozen.loss - state.loss
                    jumped, rep = detect_and_jump(frozen, alpha, seed=eps0, time=t1)
                    total = jumped.loss - state.loss
                    if total <= bracket and depth < max_refine:
                        depth += 1
                        h_try *= 0.5
                        continue
                    if total <= bracket:
                        raise NumericalError("blow-up unresolved after step refinement",
                                             {"time": t1, "loss": state.loss, "bracket": bracket})
                    state = jumped.copy(rate=0.0)
                    reports.append(rep)
                    ts.append(state.time)
                    Ls.append(state.loss)
                    thr = jump_threshold if jump_threshold is not None else default_jump_threshold(h_try, jump_scale)
                    if total > thr:
                        jumps.append((len(ts) - 1, total))
                    else:
                        rep.notes.append(f"jump {total:.3g} below registration threshold {thr:.3g}")
                    incs.clear()
                    break
            worst["balance"] = max(worst["balance"], abs(state.balance))
            worst["sup"] = max(worst["sup"], state.sup)
            if state.sup > max0 * (1 + 1e-8) + 1e-300:
                state.log.append(f"t={state.time:.6g}: sup {state.sup:.12g} above initial {max0:.12g}")
        while si < len(snap_t) and snap_t[si] <= state.time + 1e-12:
            snap(state)
            si += 1
    ts, Ls = np.array(ts), np.array(Ls)
    path = LossPath(ts, np.minimum(np.maximum.accumulate(Ls), 1.0), jumps, validate=False)
    heat = {"t": np.array(heat_t), "x": 0.5 * (bins[1:] + bins[:-1]), "V": np.array(heat_rows),
            "final": state, "sup_initial": max0, "sup_max": worst["sup"], "balance_max": worst["balance"]}
    return path, heat, reports


# three indicator bumps that blow up twice at alpha = THREE_BUMP_ALPHA
THREE_BUMPS = ((0.25, 0.5, 0.3), (1.8, 2.1, 0.4), (4.5, 5.5, 0.3))
THREE_BUMP_ALPHA = 4.0


def three_bump_measure(bumps=THREE_BUMPS) -> Measure1D:
    """Sum of indicator densities, one per ``(a, b, mass)``."""
    return Measure1D([(a, b, "const", [m / (b - a)]) for a, b, m in bumps])


def default_x_max(params: ModelParams, horizon: float) -> float:
    sig_max = float(np.max(params.sigma.vals)) if isinstance(params.sigma, Coefficient) else 1.0
    top = params.initial.support_max
    drift_max = float(np.max(np.abs(params.drift.vals))) if isinstance(params.drift, Coefficient) else 0.0
    return top + 6.0 * sig_max * math.sqrt(max(horizon, 1e-12)) + drift_max * horizon


def pde_solve(params: ModelParams, horizon: float, dt: float = 1e-3, h: float = 1e-3,
              x_max: float | None = None, smooth: float = 0.0, **kw):
    """Convenience wrapper: grid from ``params.initial`` then ``run``.

    Atoms in the initial law are spread by the killed heat kernel over
    ``smooth`` time units and the run starts at ``t = smooth``.
    """
    xm = default_x_max(params, horizon) if x_max is None else float(x_max)
    nx = int(math.ceil(xm / h))
    grid = DensityGrid.from_measure(params.initial, nx * h, nx, smooth=smooth, time=smooth)
    return run(params, grid, horizon, dt, **kw)


def heatmap_rows(heat: dict):
    """(t, x, V) triples, row-major in t."""
    t, x, V = heat["t"], heat["x"], heat["V"]
    for i, ti in enumerate(t):
        for j, xj in enumerate(x):
            yield float(ti), float(xj), float(V[i, j])


def heatmap_svg(heat: dict, width: int = 640, height: int = 360, x_label: str = "x", t_label: str = "t") -> str:
    """Grayscale raster of V(t, x): time runs left to right, space bottom to top, dark = large."""
    V = np.asarray(heat["V"], dtype=float)
    t, x = np.asarray(heat["t"]), np.asarray(heat["x"])
    m, k = V.shape
    vmax = float(V.max()) if V.size and V.max() > 0 else 1.0
    pad_l, pad_b, pad_t, pad_r = 56, 40, 12, 12
    pw, ph = width - pad_l - pad_r, height - pad_b - pad_t
    cw, ch = pw / max(m, 1), ph / max(k, 1)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    for i in range(m):
        for j in range(k):
            g = int(round(255 * (1.0 - min(V[i, j] / vmax, 1.0))))
            if g == 255:
                continue
            xpix = pad_l + i * cw
            ypix = pad_t + (k - 1 - j) * ch
            out.append(f'<rect x="{xpix:.2f}" y="{ypix:.2f}" width="{cw + 0.05:.2f}" height="{ch + 0.05:.2f}" '
                       f'fill="rgb({g},{g},{g})"/>')
    x0, y0 = pad_l, pad_t + ph
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{pad_t}" x2="{x0}" y2="{y0}" stroke="black"/>')
    if m:
        out.append(f'<text x="{x0}" y="{y0 + 16}" font-size="11">{t[0]:.3g}</text>')
        out.append(f'<text x="{x0 + pw}" y="{y0 + 16}" font-size="11" text-anchor="end">{t[-1]:.3g}</text>')
    if k:
        out.append(f'<text x="{x0 - 4}" y="{y0}" font-size="11" text-anchor="end">0</text>')
        top = x[-1] + 0.5 * (x[-1] - x[-2]) if k > 1 else x[-1]
        out.append(f'<text x="{x0 - 4}" y="{pad_t + 10}" font-size="11" text-anchor="end">{top:.3g}</text>')
    out.append(f'<text x="{x0 + pw / 2}" y="{height - 6}" font-size="12" text-anchor="middle">{t_label}</text>')
    out.append(f'<text x="14" y="{pad_t + ph / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {pad_t + ph / 2})">{x_label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
