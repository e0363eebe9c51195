"""Request and response models shared by the HTTP service and the command line client."""
from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PieceSpec(Strict):
    a: float = Field(ge=0)
    b: float
    kind: Literal["const", "linear", "poly"] = "const"
    coeffs: list[float]


class AtomSpec(Strict):
    x: float = Field(gt=0)
    m: float = Field(gt=0)


class MeasureSpec(Strict):
    pieces: list[PieceSpec] = []
    atoms: list[AtomSpec] = []
    allow_excess: bool = False


class ProfileSpec(Strict):
    C: float = Field(gt=0)
    D: float = Field(gt=0)
    x_star: float = Field(gt=0)
    beta: float = Field(gt=0, lt=1)
    nodes: int = Field(400, ge=10)


class CoefficientSpec(Strict):
    """Constant ``value`` or a step function: ``values[i]`` on [times[i], times[i+1])."""

    value: Optional[float] = None
    times: Optional[list[float]] = None
    values: Optional[list[float]] = None

    @model_validator(mode="after")
    def _one_form(self):
        if (self.value is None) == (self.times is None or self.values is None):
            raise ValueError("give either value or times+values")
        return self


class ModelSpec(Strict):
    alpha: float = Field(ge=0)
    beta_profile: Optional[ProfileSpec] = None
    measure: Optional[MeasureSpec] = None
    drift: CoefficientSpec = CoefficientSpec(value=0.0)
    sigma: CoefficientSpec = CoefficientSpec(value=1.0)

    @model_validator(mode="after")
    def _one_initial(self):
        if (self.beta_profile is None) == (self.measure is None):
            raise ValueError("model needs exactly one of beta_profile or measure")
        return self


class GridSpec(Strict):
    t0: float = Field(1.0, gt=0)
    n: int = Field(1000, ge=2)
    gamma_grid: float = Field(0.5, ge=0, lt=1)


class NumericsSpec(Strict):
    grid: GridSpec = GridSpec()
    horizon: Optional[float] = Field(None, gt=0)
    dt: float = Field(1e-3, gt=0)
    h: float = Field(1e-3, gt=0)
    x_max: Optional[float] = Field(None, gt=0)
    smooth: float = Field(1e-3, ge=0)
    N: int = Field(100_000, ge=1)
    N_list: list[int] = [1_000, 10_000, 100_000]
    M: int = Field(100_000, ge=1)
    reps: int = Field(1, ge=1)
    seeds: list[int] = [0]
    crossing: Literal["endpoint", "bridge"] = "endpoint"
    threads: Optional[int] = Field(None, ge=1)
    epsilons: list[float] = [0.02, 0.01, 0.005]
    betas: list[float] = [0.25, 0.5, 0.75]
    picard_iter: int = Field(0, ge=0)
    snapshots: int = Field(200, ge=1)
    heat_bins: int = Field(200, ge=2)
    tolerances: dict[str, float] = {}


class OutputsSpec(Strict):
    directory: str = "out"
    formats: list[Literal["csv", "json", "svg"]] = ["csv", "json", "svg"]


class RunConfig(Strict):
    model: ModelSpec
    numerics: NumericsSpec = NumericsSpec()
    outputs: OutputsSpec = OutputsSpec()


class CascadeRequest(Strict):
    measure: MeasureSpec
    alpha: float = Field(gt=0)
    epsilon: Optional[float] = Field(None, gt=0)
    x_max: Optional[float] = Field(None, gt=0)


class Table(BaseModel):
    columns: list[str]
    rows: list[list[Optional[float]]]


class RunResponse(BaseModel):
    subcommand: str
    summary: dict[str, Any]
    tables: dict[str, Table] = {}
    documents: dict[str, Any] = {}
    texts: dict[str, str] = {}


class ErrorResponse(BaseModel):
    error: str
    kind: Literal["validation", "numerical"]
    diagnostic: dict[str, Any] = {}
