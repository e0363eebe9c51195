"""HTTP service wrapping the solvers.  One POST endpoint per command line subcommand."""
from __future__ import annotations

import math
import os

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__
from .analysis import blowup_threshold, envelope_study, explosion_time, exponent_study
from .cascade import jump_solution_set, physical_jump, resolve_blowup
from .core import Coefficient, DecayProfile, LossPath, Measure1D, ModelParams, NumericalError, profile_measure
from .particle import simulate
from .pde import heatmap_svg, pde_solve
from .schemas import CascadeRequest, CoefficientSpec, MeasureSpec, ModelSpec, RunConfig, RunResponse, Table
from .volterra import SRegion, SolverGrid, check_S_membership, picard, residual_profile, volterra_solve

app = FastAPI(title="mvblow", version=__version__)


@app.exception_handler(NumericalError)
async def _numerical(request: Request, exc: NumericalError):
    return JSONResponse(status_code=500, content=_clean(
        {"error": str(exc), "kind": "numerical", "diagnostic": getattr(exc, "diagnostic", {}) or {}}))


@app.exception_handler(ValueError)
async def _invalid(request: Request, exc: ValueError):
    return JSONResponse(status_code=422, content={"error": str(exc), "kind": "validation", "diagnostic": {}})


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def _table(columns, *cols) -> Table:
    arr = np.column_stack([np.asarray(c, dtype=float) for c in cols]) if cols else np.zeros((0, 0))
    rows = [[float(v) if math.isfinite(v) else None for v in row] for row in arr]
    return Table(columns=list(columns), rows=rows)


def build_measure(spec: MeasureSpec) -> Measure1D:
    return Measure1D([p.model_dump() for p in spec.pieces], [a.model_dump() for a in spec.atoms],
                     allow_excess=spec.allow_excess)


def _coefficient(spec: CoefficientSpec) -> Coefficient:
    if spec.value is not None:
        return Coefficient(spec.value)
    return Coefficient(times=spec.times, values=spec.values)


def build_params(model: ModelSpec) -> ModelParams:
    profile = None
    if model.beta_profile is not None:
        bp = model.beta_profile
        profile = DecayProfile(bp.C, bp.D, bp.x_star, bp.beta)
        mu = profile_measure(profile, nodes=bp.nodes)
    else:
        mu = build_measure(model.measure)
    return ModelParams(model.alpha, mu, _coefficient(model.drift), _coefficient(model.sigma), profile)


def _threads(cfg: RunConfig):
    env = os.environ.get("MVBLOW_THREADS")
    return int(env) if env else cfg.numerics.threads


def _horizon(cfg: RunConfig) -> float:
    return cfg.numerics.horizon if cfg.numerics.horizon is not None else cfg.numerics.grid.t0


def _grid(cfg: RunConfig) -> SolverGrid:
    g = cfg.numerics.grid
    return SolverGrid(g.t0, g.n, g.gamma_grid)


def _node_slopes(L: LossPath) -> np.ndarray:
    d = L.derivative()
    return np.concatenate([[d[0] if len(d) else np.nan], d])


def _losses(L: LossPath, res=None) -> Table:
    res = np.full(len(L.grid), np.nan) if res is None else res
    return _table(["t", "L", "L_prime", "residual"], L.grid, L.values, _node_slopes(L), res)


def _jumps(L: LossPath):
    return [{"time": float(L.grid[k]), "size": s, "left_limit": L.left_limit(k)} for k, s in L.jumps]


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/simulate", response_model=RunResponse)
def run_simulate(cfg: RunConfig) -> RunResponse:
    params = build_params(cfg.model)
    nm = cfg.numerics
    horizon = _horizon(cfg)
    runs, first = [], None
    for seed in nm.seeds:
        for rep in range(nm.reps):
            L, reports = simulate(params, nm.N, nm.dt, horizon, seed=seed, rep=rep, crossing=nm.crossing,
                                  threads=_threads(cfg))
            runs.append((seed, rep, L, reports))
            if first is None:
                first = (L, reports)
    L, reports = first
    summary = {"L_T": float(L.values[-1]), "jumps": _jumps(L), "N": nm.N, "dt": nm.dt, "horizon": horizon,
               "crossing": nm.crossing, "runs": len(runs)}
    tables = {"losses": _losses(L),
              "runs": _table(["seed", "rep", "L_T", "n_jumps"], [r[0] for r in runs], [r[1] for r in runs],
                             [r[2].values[-1] for r in runs], [len(r[2].jumps) for r in runs])}
    docs = {"cascade_report": [r.to_dict(include_measure=False) for r in reports]}
    return RunResponse(subcommand="simulate", summary=_clean(summary), tables=tables, documents=_clean(docs))


@app.post("/solve", response_model=RunResponse)
def run_solve(cfg: RunConfig) -> RunResponse:
    params = build_params(cfg.model)
    grid = _grid(cfg)
    L, reports = volterra_solve(params, grid)
    res = residual_profile(L, params)
    ceiling = cfg.numerics.tolerances.get("h1_ceiling", 1e3)
    beta = params.profile.beta if params.profile is not None else 0.5
    gamma = min(max(0.5 * (1 - beta), 1e-6), 0.499)
    member, slope, A_fit = check_S_membership(L, SRegion(gamma, 1.0, grid.t0))
    summary = {
        "t_explode": explosion_time(L, ceiling),
        "h1_ceiling": ceiling,
        "jumps": _jumps(L),
        "L_T": float(L.values[-1]),
        "residual_max": float(np.nanmax(res)),
        "fitted_slope": slope,
        "expected_slope": -gamma,
        "A_fit": A_fit,
        "blowup_threshold": blowup_threshold(params.initial, params.alpha),
        "nodes": len(L.grid),
    }
    tables = {"losses": _losses(L, res)}
    if cfg.numerics.picard_iter > 0:
        _, ratios, diffs, _ = picard(params, grid, n_iter=cfg.numerics.picard_iter)
        tables["contraction"] = _table(["iteration", "sup_diff", "ratio"], np.arange(1, len(diffs) + 1), diffs,
                                       [np.nan] + list(ratios))
        summary["picard_max_ratio"] = max(ratios) if ratios else float("nan")
    docs = {"cascade_report": [r.to_dict(include_measure=False) for r in reports]}
    return RunResponse(subcommand="solve", summary=_clean(summary), tables=tables, documents=_clean(docs))


def _pde(cfg: RunConfig, params: ModelParams):
    nm = cfg.numerics
    smooth = nm.smooth if not params.initial.is_atomless else 0.0
    return pde_solve(params, _horizon(cfg), dt=nm.dt, h=nm.h, x_max=nm.x_max, smooth=smooth,
                     snapshots=nm.snapshots, heat_bins=nm.heat_bins)


@app.post("/pde", response_model=RunResponse)
def run_pde(cfg: RunConfig) -> RunResponse:
    params = build_params(cfg.model)
    L, heat, reports = _pde(cfg, params)
    V = heat["V"]
    tt, xx = np.meshgrid(heat["t"], heat["x"], indexing="ij")
    summary = {
        "L_T": float(L.values[-1]),
        "jumps": _jumps(L),
        "balance_max": heat["balance_max"],
        "sup_initial": heat["sup_initial"],
        "sup_max": heat["sup_max"],
        "max_principle": heat["sup_max"] <= heat["sup_initial"] * (1 + 1e-8),
        "flux_integral": heat["final"].flux_integral,
        "log": heat["final"].log[-20:],
    }
    tables = {"losses": _losses(L), "heatmap": _table(["t", "x", "V"], tt.ravel(), xx.ravel(), V.ravel())}
    docs = {"cascade_report": [r.to_dict(include_measure=False) for r in reports]}
    return RunResponse(subcommand="pde", summary=_clean(summary), tables=tables, documents=_clean(docs),
                       texts={"heatmap.svg": heatmap_svg(heat)})


@app.post("/cascade", response_model=RunResponse)
def run_cascade(req: CascadeRequest) -> RunResponse:
    spec = req.measure.model_copy(update={"allow_excess": True})
    mu = build_measure(spec)
    jump = physical_jump(mu, req.alpha)
    x_max = req.x_max if req.x_max is not None else mu.total_mass + 1.0
    sols = jump_solution_set(mu, req.alpha, x_max)
    rep = resolve_blowup(mu, req.alpha, epsilon=req.epsilon)
    doc = rep.to_dict()
    doc.update({"alpha": req.alpha, "physical_jump": jump, "pre_mass": mu.total_mass,
                "exceeds_unit": mu.exceeds_unit, "solution_set": [list(s) for s in sols], "x_max": x_max})
    summary = {"jump_size": rep.jump_size, "physical_jump": jump, "solution_set": [list(s) for s in sols]}
    return RunResponse(subcommand="cascade", summary=_clean(summary), documents={"cascade_report": _clean(doc)})


@app.post("/envelope", response_model=RunResponse)
def run_envelope(cfg: RunConfig) -> RunResponse:
    params = build_params(cfg.model)
    st = envelope_study(params, cfg.numerics.epsilons, _grid(cfg))
    t = st.lower.grid
    cols = [t, st.lower.values] + [st.uppers[e](t) for e in st.epsilons]
    names = ["t", "L"] + [f"L_eps_{e:g}" for e in st.epsilons]
    gaps = [st.gaps[e] for e in st.epsilons]
    summary = {"t1": st.t1, "epsilons": st.epsilons, "gaps": gaps, "above_everywhere": [st.above[e] for e in st.epsilons],
               "gaps_decreasing": st.gaps_decreasing}
    tables = {"envelope": _table(names, *cols),
              "gaps": _table(["epsilon", "gap"], st.epsilons, gaps)}
    return RunResponse(subcommand="envelope", summary=_clean(summary), tables=tables)


@app.post("/sweep", response_model=RunResponse)
def run_sweep(cfg: RunConfig) -> RunResponse:
    bp = cfg.model.beta_profile
    C, D, xs = (bp.C, bp.D, bp.x_star) if bp is not None else (1.0, 0.5, 1.0)
    rows = exponent_study(cfg.numerics.betas, cfg.model.alpha, _grid(cfg), C=C, D=D, x_star=xs)
    tol = cfg.numerics.tolerances.get("slope", 0.1)
    for r in rows:
        r["within_tol"] = bool(abs(r["slope"] - r["expected"]) <= tol) if not r["flagged"] else False
    table = _table(["beta", "alpha", "slope", "expected", "A_fit", "flagged"],
                   [r["beta"] for r in rows], [r["alpha"] for r in rows], [r["slope"] for r in rows],
                   [r["expected"] for r in rows], [r["A_fit"] for r in rows], [float(r["flagged"]) for r in rows])
    return RunResponse(subcommand="sweep", summary=_clean({"rows": rows, "tolerance": tol}),
                       tables={"exponents": table})


@app.post("/compare", response_model=RunResponse)
def run_compare(cfg: RunConfig) -> RunResponse:
    params = build_params(cfg.model)
    nm = cfg.numerics
    grid = _grid(cfg)
    Lv, _ = volterra_solve(params, grid)
    Lp, _, _ = _pde(cfg, params)
    Ln, _ = simulate(params, nm.N, nm.dt, grid.t0, seed=nm.seeds[0], crossing=nm.crossing, threads=_threads(cfg))
    t = Lv.grid
    curves = {"volterra": Lv.values, "pde": Lp(t), "particle": Ln(t)}
    firsts = [P.jump_times[0] for P in (Lv, Lp, Ln) if P.jumps]
    mask = t < min(firsts) if firsts else np.ones(len(t), bool)
    names = list(curves)
    gaps = {f"{a}-{b}": float(np.max(np.abs(curves[a][mask] - curves[b][mask])))
            for i, a in enumerate(names) for b in names[i + 1:]}
    tol = nm.tolerances.get("compare_gap", 0.01)
    summary = {"pairwise_gaps": gaps, "max_pairwise_gap": max(gaps.values()), "tolerance": tol,
               "passed": max(gaps.values()) <= tol, "window_end": float(t[mask][-1]),
               "jumps": {"volterra": _jumps(Lv), "pde": _jumps(Lp), "particle": _jumps(Ln)}}
    table = _table(["t", "L_volterra", "L_pde", "L_particle"], t, curves["volterra"], curves["pde"],
                   curves["particle"])
    return RunResponse(subcommand="compare", summary=_clean(summary), tables={"compare": table})
