"""Measures on the half-line, loss paths, model parameters and shared numerics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "NumericalError",
    "Measure1D",
    "DecayProfile",
    "LossPath",
    "Coefficient",
    "SpaceTimeDrift",
    "ModelParams",
    "cdf",
    "mean",
    "shift_truncate",
    "sample",
    "counter_stream",
    "default_jump_threshold",
    "profile_measure",
    "normal_pdf",
]

KINDS = {"const": 1, "linear": 2, "poly": 4}
MASS_TOL = 1e-12


class NumericalError(RuntimeError):
    """Raised when a solver cannot continue; carries a JSON-friendly diagnostic."""

    def __init__(self, message: str, diagnostic: dict | None = None):
        super().__init__(message)
        self.diagnostic = dict(diagnostic or {})
        self.diagnostic.setdefault("message", message)


def normal_pdf(z):
    return np.exp(-0.5 * np.asarray(z, dtype=float) ** 2) / math.sqrt(2.0 * math.pi)


def _poly_integral(coeffs: np.ndarray, u: np.ndarray) -> np.ndarray:
    # rows of coeffs are c0..c3 of a polynomial in u; returns int_0^u
    out = np.zeros(np.broadcast(coeffs[..., 0], u).shape)
    for k in range(coeffs.shape[-1]):
        out = out + coeffs[..., k] * u ** (k + 1) / (k + 1)
    return out


def _poly_first_moment(coeffs: np.ndarray, u: np.ndarray) -> np.ndarray:
    out = np.zeros(np.broadcast(coeffs[..., 0], u).shape)
    for k in range(coeffs.shape[-1]):
        out = out + coeffs[..., k] * u ** (k + 2) / (k + 2)
    return out


def _poly_eval(coeffs: np.ndarray, u: np.ndarray) -> np.ndarray:
    out = np.zeros(np.broadcast(coeffs[..., 0], u).shape)
    for k in range(coeffs.shape[-1] - 1, -1, -1):
        out = out * u + coeffs[..., k]
    return out


def _taylor_shift(coeffs: np.ndarray, u0: float) -> np.ndarray:
    """Coefficients of v -> p(v + u0) for a cubic p."""
    c = np.asarray(coeffs, dtype=float)
    out = np.zeros(4)
    for k in range(4):
        for j in range(k, 4):
            out[k] += c[j] * math.comb(j, k) * u0 ** (j - k)
    return out


class Measure1D:
    """Finite measure on (0, inf): piecewise-polynomial density plus atoms.

    Pieces live on disjoint intervals (a, b] and are given as polynomials in
    the local variable ``u = x - a`` of degree at most 3.  Measures whose mass
    exceeds one are allowed only with ``allow_excess=True`` and are flagged.
    """

    def __init__(self, pieces: Iterable = (), atoms: Iterable = (), allow_excess: bool = False):
        rows = []
        for p in pieces:
            if isinstance(p, dict):
                a, b, kind, coeffs = p["a"], p["b"], p.get("kind", "poly"), p["coeffs"]
            else:
                a, b, kind, coeffs = p
            if kind not in KINDS:
                raise ValueError(f"unknown piece kind {kind!r}")
            coeffs = [float(c) for c in coeffs]
            while len(coeffs) > KINDS[kind] and coeffs[-1] == 0.0:
                coeffs.pop()
            if len(coeffs) > KINDS[kind] or len(coeffs) == 0:
                raise ValueError(f"{kind} piece takes at most {KINDS[kind]} coefficients")
            a, b = float(a), float(b)
            if not (0.0 <= a < b < math.inf):
                raise ValueError(f"piece interval ({a}, {b}] must satisfy 0 <= a < b < inf")
            rows.append((a, b, coeffs + [0.0] * (4 - len(coeffs)), kind))
        rows.sort(key=lambda r: r[0])
        self._a = np.array([r[0] for r in rows], dtype=float)
        self._b = np.array([r[1] for r in rows], dtype=float)
        self._c = np.array([r[2] for r in rows], dtype=float).reshape(len(rows), 4)
        self._kinds = tuple(r[3] for r in rows)
        if len(rows) > 1 and np.any(self._a[1:] < self._b[:-1] - 1e-15):
            raise ValueError("pieces overlap")
        atoms = [(float(x), float(m)) for x, m in (
            (a["x"], a["m"]) if isinstance(a, dict) else a for a in atoms)]
        atoms.sort()
        for x, m in atoms:
            if not x > 0 or not m > 0:
                raise ValueError("atoms need location > 0 and mass > 0")
        self._ax = np.array([x for x, _ in atoms], dtype=float)
        self._am = np.array([m for _, m in atoms], dtype=float)
        self._check_nonnegative()

        w = self._b - self._a
        self._piece_mass = _poly_integral(self._c, w) if len(rows) else np.zeros(0)
        self._cum = np.concatenate([[0.0], np.cumsum(self._piece_mass)])
        self._atom_cum = np.concatenate([[0.0], np.cumsum(self._am)])
        self.total_mass = float(self._cum[-1] + self._atom_cum[-1])
        self.exceeds_unit = self.total_mass > 1.0 + 1e-9
        if self.exceeds_unit and not allow_excess:
            raise ValueError(f"total mass {self.total_mass} exceeds 1; pass allow_excess=True")
        self._allow_excess = allow_excess

    def _check_nonnegative(self):
        if not len(self._a):
            return
        u = np.linspace(0.0, 1.0, 33)[None, :] * (self._b - self._a)[:, None]
        vals = _poly_eval(self._c[:, None, :], u)
        if np.any(vals < -1e-12 * (1.0 + np.abs(self._c).max())):
            raise ValueError("density must be nonnegative")
        if len(self._am) and np.any(self._am <= 0):
            raise ValueError("atom masses must be positive")

    # constructors
    @classmethod
    def uniform(cls, a: float, b: float, mass: float = 1.0) -> "Measure1D":
        return cls([(a, b, "const", [mass / (b - a)])])

    @classmethod
    def dirac(cls, x: float, mass: float = 1.0) -> "Measure1D":
        return cls(atoms=[(x, mass)])

    @classmethod
    def empty(cls) -> "Measure1D":
        return cls()

    @classmethod
    def from_table(cls, x, values, kind: str = "linear", allow_excess: bool = False) -> "Measure1D":
        """Tabulated density: nodes ``x`` with values, interpolated linearly or held constant."""
        x = np.asarray(x, dtype=float)
        v = np.clip(np.asarray(values, dtype=float), 0.0, None)
        pieces = []
        for i in range(len(x) - 1):
            a, b = x[i], x[i + 1]
            if b <= a:
                continue
            if kind == "const":
                if v[i] > 0:
                    pieces.append((a, b, "const", [v[i]]))
            else:
                if v[i] > 0 or v[i + 1] > 0:
                    pieces.append((a, b, "linear", [v[i], (v[i + 1] - v[i]) / (b - a)]))
        return cls(pieces, allow_excess=allow_excess)

    @classmethod
    def from_cdf_table(cls, x, F, allow_excess: bool = False) -> "Measure1D":
        """Piecewise-constant density whose cdf interpolates (x, F); F is monotonized."""
        x = np.asarray(x, dtype=float)
        F = np.maximum.accumulate(np.clip(np.asarray(F, dtype=float), 0.0, None))
        dx = np.diff(x)
        dens = np.diff(F) / dx
        return cls.from_table(x, np.append(dens, 0.0), kind="const", allow_excess=allow_excess)

    # properties
    @property
    def is_atomless(self) -> bool:
        return len(self._ax) == 0

    @property
    def is_probability(self) -> bool:
        return abs(self.total_mass - 1.0) <= 1e-9

    @property
    def n_pieces(self) -> int:
        return len(self._a)

    @property
    def support_max(self) -> float:
        hi = 0.0
        if len(self._b):
            hi = float(self._b[-1])
        if len(self._ax):
            hi = max(hi, float(self._ax[-1]))
        return hi

    def arrays(self):
        """(a, b, coeffs, atom_x, atom_m) as read-only arrays."""
        return self._a, self._b, self._c, self._ax, self._am

    def density(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        if not len(self._a):
            return out
        idx = np.clip(np.searchsorted(self._b, x, side="left"), 0, len(self._a) - 1)
        inside = (x > self._a[idx]) & (x <= self._b[idx])
        vals = _poly_eval(self._c[idx], x - self._a[idx])
        out[inside] = vals[inside]
        return out

    def cdf(self, x):
        """mu(0, x] for scalar or array x."""
        xa = np.asarray(x, dtype=float)
        out = np.zeros(xa.shape)
        if len(self._a):
            k = np.searchsorted(self._b, xa, side="left")  # pieces fully at or below x
            out = out + self._cum[k]
            kk = np.clip(k, 0, len(self._a) - 1)
            part = (k < len(self._a)) & (xa > self._a[kk])
            u = np.clip(xa - self._a[kk], 0.0, None)
            out = out + np.where(part, _poly_integral(self._c[kk], u), 0.0)
        if len(self._ax):
            out = out + self._atom_cum[np.searchsorted(self._ax, xa, side="right")]
        out = np.maximum(out, 0.0)
        return float(out) if np.ndim(x) == 0 else out

    def mean(self) -> float:
        if self.total_mass <= 0:
            raise ValueError("mean of an empty measure")
        w = self._b - self._a
        first = float(np.sum(self._a * self._piece_mass + _poly_first_moment(self._c, w))) if len(w) else 0.0
        first += float(np.dot(self._ax, self._am))
        if not math.isfinite(first):
            raise ValueError("first moment diverges")
        return first

    def sup_density(self) -> float:
        if not len(self._a):
            return 0.0
        u = np.linspace(0.0, 1.0, 65)[None, :] * (self._b - self._a)[:, None]
        return float(_poly_eval(self._c[:, None, :], u).max())

    def normalized(self) -> "Measure1D":
        if self.total_mass <= 0:
            raise ValueError("cannot normalize an empty measure")
        s = 1.0 / self.total_mass
        return Measure1D(
            [(a, b, k, list(c * s)) for a, b, k, c in zip(self._a, self._b, self._kinds, self._c)],
            [(x, m * s) for x, m in zip(self._ax, self._am)],
        )

    def shift_truncate(self, delta: float) -> "Measure1D":
        if delta < 0:
            raise ValueError("delta must be >= 0")
        if delta == 0:
            return self
        pieces = []
        for a, b, kind, c in zip(self._a, self._b, self._kinds, self._c):
            if b <= delta:
                continue
            if a >= delta:
                pieces.append((a - delta, b - delta, kind, c))
            else:
                pieces.append((0.0, b - delta, "poly", _taylor_shift(c, delta - a)))
        atoms = [(x - delta, m) for x, m in zip(self._ax, self._am) if x > delta]
        return Measure1D(pieces, atoms, allow_excess=self._allow_excess)

    # serialization
    def to_dict(self) -> dict:
        pieces = []
        for a, b, kind, c in zip(self._a, self._b, self._kinds, self._c):
            n = KINDS[kind]
            pieces.append({"a": float(a), "b": float(b), "kind": kind, "coeffs": [float(v) for v in c[:n]]})
        atoms = [{"x": float(x), "m": float(m)} for x, m in zip(self._ax, self._am)]
        return {"pieces": pieces, "atoms": atoms}

    @classmethod
    def from_dict(cls, doc: dict, allow_excess: bool = False) -> "Measure1D":
        extra = set(doc) - {"pieces", "atoms"}
        if extra:
            raise ValueError(f"unknown measure keys: {sorted(extra)}")
        return cls(doc.get("pieces", []), doc.get("atoms", []), allow_excess=allow_excess)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def __repr__(self):
        return f"Measure1D(pieces={self.n_pieces}, atoms={len(self._ax)}, mass={self.total_mass:.6g})"


def cdf(mu: Measure1D, x):
    if np.any(np.asarray(x) < 0):
        raise ValueError("cdf needs x >= 0")
    return mu.cdf(x)


def mean(mu: Measure1D) -> float:
    return mu.mean()


def shift_truncate(mu: Measure1D, delta: float) -> Measure1D:
    return mu.shift_truncate(delta)


def counter_stream(seed: int, *keys: int, kind: str = "philox") -> np.random.Generator:
    """Generator whose key is derived from (seed, *keys).

    Streams with different keys are independent, and a stream's output does
    not depend on how many other streams were consumed before it.  ``kind``
    picks the bit generator: ``"philox"`` (counter based) or ``"sfc64"``
    (seeded from the same key material, faster for bulk normals).
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    if kind == "philox":
        return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))
    if kind == "sfc64":
        return np.random.Generator(np.random.SFC64(ss))
    raise ValueError(f"unknown stream kind {kind!r}")


def sample(mu: Measure1D, rng: np.random.Generator, size=None):
    """Inverse-cdf sampling; requires a probability measure."""
    if not mu.is_probability:
        raise ValueError(f"sampling needs a probability measure, got mass {mu.total_mass}")
    n = 1 if size is None else int(np.prod(size))
    u = rng.random(n)
    out = _inverse_cdf(mu, u)
    out = np.maximum(out, np.nextafter(0.0, 1.0))
    if size is None:
        return float(out[0])
    return out.reshape(size)


def _inverse_cdf(mu: Measure1D, u: np.ndarray) -> np.ndarray:
    a, b, c, ax, am = mu.arrays()
    # components sorted by left end: pieces and atoms interleaved
    locs = np.concatenate([a, ax])
    masses = np.concatenate([mu._piece_mass, am])
    is_atom = np.concatenate([np.zeros(len(a), bool), np.ones(len(ax), bool)])
    comp = np.concatenate([np.arange(len(a)), np.arange(len(ax))])
    order = np.lexsort((is_atom, locs))
    locs, masses, is_atom, comp = locs[order], masses[order], is_atom[order], comp[order]
    cum = np.concatenate([[0.0], np.cumsum(masses)])
    target = u * cum[-1]
    j = np.clip(np.searchsorted(cum, target, side="right") - 1, 0, len(masses) - 1)
    r = target - cum[j]
    out = np.empty_like(u)
    atom_sel = is_atom[j]
    out[atom_sel] = ax[comp[j[atom_sel]]]
    ps = ~atom_sel
    if np.any(ps):
        pi = comp[j[ps]]
        rr = r[ps]
        cc = c[pi]
        width = b[pi] - a[pi]
        lo = np.zeros(len(pi))
        hi = width.copy()
        const = np.all(cc[:, 1:] == 0.0, axis=1)
        x = np.where(const, rr / np.where(cc[:, 0] > 0, cc[:, 0], 1.0), 0.0)
        nc = ~const
        if np.any(nc):
            lo_n, hi_n, cn, rn = lo[nc], hi[nc], cc[nc], rr[nc]
            for _ in range(60):
                mid = 0.5 * (lo_n + hi_n)
                below = _poly_integral(cn, mid) < rn
                lo_n = np.where(below, mid, lo_n)
                hi_n = np.where(below, hi_n, mid)
            x[nc] = 0.5 * (lo_n + hi_n)
        out[ps] = a[pi] + np.clip(x, 0.0, width)
    return out


@dataclass(frozen=True)
class DecayProfile:
    """Upper envelope C x^beta on (0, x_star] and D beyond."""

    C: float
    D: float
    x_star: float
    beta: float

    def __post_init__(self):
        if not (self.C > 0 and self.D > 0 and self.x_star > 0):
            raise ValueError("C, D and x_star must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")

    def bound(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x <= self.x_star, self.C * np.abs(x) ** self.beta, self.D)

    def check(self, mu: Measure1D, n: int = 4000, rtol: float = 1e-9) -> bool:
        hi = max(mu.support_max, 2 * self.x_star)
        grid = np.unique(np.concatenate([
            np.geomspace(1e-9, self.x_star, n // 2),
            np.linspace(0.0, hi, n // 2)[1:],
            mu.arrays()[0][mu.arrays()[0] > 0], mu.arrays()[1],
        ]))
        dens = mu.density(grid)
        return bool(np.all(dens <= self.bound(grid) * (1 + rtol) + 1e-14))


def profile_measure(profile: DecayProfile, nodes: int = 400) -> Measure1D:
    """Probability measure saturating the profile: C x^beta up to x_star, then D on a block.

    The power part is tabulated piecewise-linearly on a geometric grid, with
    the first node far below any resolved scale.
    """
    C, D, xs, beta = profile.C, profile.D, profile.x_star, profile.beta
    x = np.concatenate([[0.0], np.geomspace(1e-12 * xs, xs, nodes)])
    tab = Measure1D.from_table(x, C * x ** beta)
    head = tab.total_mass
    if head >= 1:
        raise ValueError("profile carries mass >= 1 below x_star; reduce C or x_star")
    w = (1.0 - head) / D
    pieces = [(a, b, "linear", list(cc[:2])) for a, b, cc in zip(*tab.arrays()[:3])]
    pieces.append((xs, xs + w, "const", [D]))
    return Measure1D(pieces)


def default_jump_threshold(dt: float, scale: float = 0.1) -> float:
    return 10.0 * math.sqrt(dt) * scale


class LossPath:
    """Nondecreasing grid function with a jump registry.

    Between nodes the path is linear in its continuous part; at a registered
    jump ``(k, size)`` the jump happens at ``grid[k]`` and ``values[k]`` is the
    post-jump value.
    """

    def __init__(self, grid, values, jumps: Sequence = (), jump_threshold: float | None = None,
                 validate: bool = True):
        self.grid = np.asarray(grid, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.jumps = tuple((int(k), float(s)) for k, s in jumps)
        self.jump_threshold = jump_threshold
        if validate:
            self.validate()

    def validate(self, tol: float = 1e-9):
        g, v = self.grid, self.values
        if g.shape != v.shape or g.ndim != 1 or len(g) < 1:
            raise ValueError("grid and values must be 1-d of equal length")
        if len(g) > 1 and np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(np.diff(v) < -tol):
            raise ValueError("loss path must be nondecreasing")
        if v.min() < -tol or v.max() > 1 + tol:
            raise ValueError("loss path must stay in [0, 1]")
        for k, s in self.jumps:
            if not 0 < k < len(g):
                raise ValueError(f"jump index {k} out of range")
            if s <= 0 or v[k] - v[k - 1] < s - tol:
                raise ValueError(f"jump at {k} inconsistent with values")
            if self.jump_threshold is not None and s <= self.jump_threshold:
                raise ValueError(f"jump {s} below threshold {self.jump_threshold}")

    @property
    def jump_times(self) -> list[float]:
        return [float(self.grid[k]) for k, _ in self.jumps]

    def jump_sizes(self) -> np.ndarray:
        out = np.zeros(len(self.grid))
        for k, s in self.jumps:
            out[k] += s
        return out

    def continuous_increments(self) -> np.ndarray:
        return np.diff(self.values) - self.jump_sizes()[1:]

    def derivative(self) -> np.ndarray:
        """Slopes of the continuous part on each grid interval."""
        return self.continuous_increments() / np.diff(self.grid)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        g, v = self.grid, self.values
        k = np.clip(np.searchsorted(g, t, side="left"), 1, len(g) - 1) if len(g) > 1 else np.zeros(t.shape, int)
        if len(g) == 1:
            return np.full(t.shape, v[0]) if t.ndim else float(v[0])
        js = self.jump_sizes()
        t0, t1 = g[k - 1], g[k]
        frac = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
        cont = v[k] - js[k] - v[k - 1]
        out = v[k - 1] + frac * cont
        out = np.where(t >= t1, v[k], out)
        out = np.where(t <= g[0], v[0], out)
        out = np.where(t >= g[-1], v[-1], out)
        return float(out) if out.ndim == 0 else out

    def left_limit(self, k: int) -> float:
        return float(self.values[k] - self.jump_sizes()[k])

    def restrict(self, t_max: float) -> "LossPath":
        n = int(np.searchsorted(self.grid, t_max, side="right"))
        return LossPath(self.grid[:n], self.values[:n], [(k, s) for k, s in self.jumps if k < n],
                        self.jump_threshold, validate=False)

    def to_rows(self):
        return list(zip(self.grid.tolist(), self.values.tolist()))

    def to_dict(self) -> dict:
        return {"grid": self.grid.tolist(), "values": self.values.tolist(),
                "jumps": [{"index": k, "time": float(self.grid[k]), "size": s} for k, s in self.jumps]}

    def __repr__(self):
        return f"LossPath(n={len(self.grid)}, T={self.grid[-1]:.4g}, L_T={self.values[-1]:.6g}, jumps={len(self.jumps)})"


class Coefficient:
    """Time-dependent scalar coefficient with exact running integrals.

    Either a constant or a table of values held constant on [t_i, t_{i+1}).
    """

    def __init__(self, value: float | None = None, times=None, values=None):
        if value is not None:
            self.times = np.array([0.0])
            self.vals = np.array([float(value)])
        else:
            self.times = np.asarray(times, dtype=float)
            self.vals = np.asarray(values, dtype=float)
            if self.times[0] != 0 or np.any(np.diff(self.times) <= 0) or len(self.times) != len(self.vals):
                raise ValueError("table needs times starting at 0, increasing, matching values")
        seg = np.diff(self.times)
        self._cum1 = np.concatenate([[0.0], np.cumsum(self.vals[:-1] * seg)])
        self._cum2 = np.concatenate([[0.0], np.cumsum(self.vals[:-1] ** 2 * seg)])

    @property
    def is_constant(self) -> bool:
        return bool(np.all(self.vals == self.vals[0]))

    def __call__(self, t):
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)
        return self.vals[i]

    def integral(self, t):
        """int_0^t c(s) ds."""
        t = np.asarray(t, dtype=float)
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)
        return self._cum1[i] + self.vals[i] * (t - self.times[i])

    def integral_sq(self, t):
        """int_0^t c(s)^2 ds."""
        t = np.asarray(t, dtype=float)
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 1)
        return self._cum2[i] + self.vals[i] ** 2 * (t - self.times[i])

    def to_dict(self) -> dict:
        if len(self.times) == 1:
            return {"kind": "constant", "value": float(self.vals[0])}
        return {"kind": "table", "t": self.times.tolist(), "v": self.vals.tolist()}


@dataclass(frozen=True)
class SpaceTimeDrift:
    """Drift b(t, x) for the particle route; ``upper`` bounds it for x >= 0."""

    fn: Callable
    upper: float
    description: str = "custom"

    def __call__(self, t, x):
        return self.fn(t, x)


@dataclass(frozen=True)
class ModelParams:
    alpha: float
    initial: Measure1D
    drift: Coefficient | SpaceTimeDrift = field(default_factory=lambda: Coefficient(0.0))
    sigma: Coefficient = field(default_factory=lambda: Coefficient(1.0))
    profile: DecayProfile | None = None
    sigma_bounds: tuple = (1e-3, 1e3)

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if not self.initial.is_probability:
            raise ValueError(f"initial measure must have mass 1, got {self.initial.total_mass}")
        if isinstance(self.drift, (int, float)):
            object.__setattr__(self, "drift", Coefficient(float(self.drift)))
        if isinstance(self.sigma, (int, float)):
            object.__setattr__(self, "sigma", Coefficient(float(self.sigma)))
        lo, hi = self.sigma_bounds
        if np.any(self.sigma.vals < lo) or np.any(self.sigma.vals > hi):
            raise ValueError(f"sigma must stay within [{lo}, {hi}]")

    @property
    def spatial_drift(self) -> bool:
        return isinstance(self.drift, SpaceTimeDrift)

    def check_sigma(self, times) -> bool:
        s = self.sigma(np.asarray(times, dtype=float))
        lo, hi = self.sigma_bounds
        return bool(np.all((s >= lo) & (s <= hi)))

    def with_initial(self, mu: Measure1D) -> "ModelParams":
        return ModelParams(self.alpha, mu, self.drift, self.sigma, self.profile, self.sigma_bounds)


def gaussian_tail_integral(mu: Measure1D, c: float, s: float) -> float:
    """int Phi((c - x)/s) mu(dx), computed in closed form for polynomial pieces."""
    a, b, coef, ax, am = mu.arrays()
    total = 0.0
    if len(ax):
        total += float(np.dot(am, ndtr((c - ax) / s)))
    if len(a):
        # below c: int p - int p Phi((x - c)/s); above c: int p Phi((c - x)/s)
        lo_b = np.minimum(b, c)
        has_lo = lo_b > a
        if np.any(has_lo):
            aa, bb, cc = a[has_lo], lo_b[has_lo], coef[has_lo]
            whole = _poly_integral(cc, bb - aa)
            total += float(np.sum(whole - _phi_poly_integral(cc, aa, aa, bb, c, s, +1.0)))
        hi_a = np.maximum(a, c)
        has_hi = b > hi_a
        if np.any(has_hi):
            total += float(np.sum(_phi_poly_integral(coef[has_hi], a[has_hi], hi_a[has_hi], b[has_hi], c, s, -1.0)))
    return total


def _phi_antiderivatives(z):
    """I_k(z) = int z^k Phi(z) dz for k = 0..3."""
    P, p = ndtr(z), normal_pdf(z)
    z2 = z * z
    return (
        z * P + p,
        0.5 * ((z2 - 1.0) * P + z * p),
        ((z2 * z) * P + (z2 + 2.0) * p) / 3.0,
        0.25 * ((z2 * z2 - 3.0) * P + (z2 * z + 3.0 * z) * p),
    )


def _phi_poly_integral(coef, a0, lo, hi, c, s, sign):
    """int_lo^hi p(x - a0) Phi(sign (x - c)/s) dx, where sign (x - c) <= 0 on [lo, hi]."""
    # x = c + sign*s*z  =>  u = x - a0 = (c - a0) + sign*s*z; expand p in powers of z
    d = c - a0
    q = np.zeros_like(coef)
    for j in range(4):
        for k in range(j + 1):
            q[:, k] += coef[:, j] * math.comb(j, k) * d ** (j - k) * (sign * s) ** k
    z_lo = sign * (lo - c) / s
    z_hi = sign * (hi - c) / s
    I_hi = _phi_antiderivatives(z_hi)
    I_lo = _phi_antiderivatives(z_lo)
    out = np.zeros(len(coef))
    for k in range(4):
        out += q[:, k] * (I_hi[k] - I_lo[k])
    # dx = sign*s dz
    return sign * s * out
