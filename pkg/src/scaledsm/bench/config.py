"""Experiment configuration: TOML files validated into pydantic models."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid experiment configuration; the message lists every problem."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemConfig(_Strict):
    kind: Literal["matrix_sensing", "quadratic_sampling"] = "matrix_sensing"
    n: int = Field(gt=0)
    r: int = Field(gt=0)
    kappa: float = Field(default=1.0, ge=1.0)
    m: Optional[int] = Field(default=None, gt=0)
    m_factor: Optional[float] = Field(default=None, gt=0)
    p_s: float = Field(default=0.0, ge=0.0, lt=0.5)
    snr_db: Optional[float] = None
    sigma_w: Optional[float] = Field(default=None, ge=0.0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    storage: Literal["dense", "seeded"] = "seeded"

    @model_validator(mode="after")
    def _check(self):
        problems = []
        if self.m is not None and self.m_factor is not None:
            problems.append("set at most one of m and m_factor")
        if self.snr_db is not None and self.sigma_w is not None:
            problems.append("set at most one of snr_db and sigma_w")
        if self.r > self.n:
            problems.append(f"r={self.r} exceeds n={self.n}")
        if self.r == 1 and self.kappa != 1.0:
            problems.append("rank one forces kappa = 1")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    @property
    def psd(self) -> bool:
        return self.kind == "quadratic_sampling"

    @property
    def num_measurements(self) -> int:
        if self.m is not None:
            return self.m
        factor = 8.0 if self.m_factor is None else self.m_factor
        return max(1, round(factor * self.n * self.r))

    @property
    def corrupted(self) -> bool:
        return self.p_s > 0 or bool(self.sigma_w) or self.snr_db is not None


class SolverEntry(_Strict):
    algorithm: Literal["scaled_sm", "vanilla_sm", "scaled_gd", "gd"] = "scaled_sm"
    schedule: Literal["polyak", "geometric", "constant"] = "polyak"
    label: Optional[str] = None
    loss: Optional[Literal["l1", "l2", "least_squares"]] = None
    # a number, or "oracle" for the loss value at the planted truth
    fstar: Optional[Union[float, Literal["oracle"]]] = None
    lam: Optional[float] = Field(default=None, gt=0)
    q: Optional[float] = Field(default=None, gt=0, lt=1)
    theorem: bool = False
    eta: float = 1.0
    max_iters: int = Field(default=1000, ge=1)
    tol_rel_err: float = Field(default=1e-12, ge=0)
    record_dist: bool = False

    @model_validator(mode="after")
    def _check(self):
        if self.schedule == "geometric" and not self.theorem and (self.lam is None or self.q is None):
            raise ValueError("geometric schedule needs lam and q, or theorem = true")
        if self.algorithm in ("scaled_gd", "gd") and self.loss not in (None, "least_squares"):
            raise ValueError(f"{self.algorithm} runs on the least_squares loss")
        return self

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        return f"{self.algorithm}_{self.schedule}"

    @property
    def loss_kind(self) -> str:
        if self.loss is not None:
            return self.loss
        return "least_squares" if self.algorithm in ("scaled_gd", "gd") else "l1"


class InitConfig(_Strict):
    method: Literal["spectral", "truncated_spectral", "planted_perturbation"] = "truncated_spectral"
    trace_correction: bool = False
    # planted perturbation radius, in units of sigma_r (divided by chi_hat when chi_scaled)
    radius: float = Field(default=0.01, gt=0)
    chi_scaled: bool = True


class OutputConfig(_Strict):
    dir: str = "runs"
    formats: list[Literal["csv", "json"]] = ["csv", "json"]
    record_time: bool = True


class SweepConfig(_Strict):
    kappa: list[float] = []
    p_s: list[float] = []
    snr_db: list[float] = []
    seed: list[int] = []
    lam: list[float] = []
    q: list[float] = []
    grid_algorithm: Literal["scaled_sm", "vanilla_sm"] = "scaled_sm"


class RipConfig(_Strict):
    trials: int = Field(default=500, ge=1)
    ranks: list[int] = []
    eps: float = Field(default=1e-10, gt=0, lt=1)


class ExperimentConfig(_Strict):
    name: str = "experiment"
    problem: ProblemConfig
    solvers: list[SolverEntry] = []
    init: InitConfig = InitConfig()
    output: OutputConfig = OutputConfig()
    sweep: SweepConfig = SweepConfig()
    rip: RipConfig = RipConfig()

    @model_validator(mode="after")
    def _check(self):
        names = [s.name for s in self.solvers]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ValueError(f"duplicate solver labels {dup}; set label to tell them apart")
        return self


def _describe(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"].removeprefix("Value error, ")
        out.append(f"{loc}: {msg}")
    return out


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_describe(err)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"{path}: no such file"]) from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError([f"{path}: {err}"]) from None
    return parse_config(data)
