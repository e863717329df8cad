"""Factored first-order methods for low-rank recovery.

Four update rules share one run loop:

* ``scaled_sm``   subgradient step preconditioned by the inverse Gram of the
  other factor
* ``vanilla_sm``  plain subgradient step on the factors
* ``scaled_gd``   preconditioned gradient step on the least-squares loss
* ``gd``          plain gradient step on the least-squares loss

Stepsizes are Polyak, geometrically decaying, or constant.  The Polyak and
geometric rules normalize by the subgradient norm measured in the metric
matching the update (preconditioned for the scaled methods).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .losses import LossSpec
from .matcore import gram_is_degenerate, gram_pinv
from .metrics import align, relative_error

log = logging.getLogger(__name__)

ALGORITHMS = ("scaled_sm", "vanilla_sm", "scaled_gd", "gd")
SCHEDULES = ("polyak", "geometric", "constant")

# tuned geometric schedules for the shipped presets
TUNED_MATRIX_SENSING = (1.85, 0.91)
TUNED_QUADRATIC_SAMPLING = (1.36, 0.88)

STALL_WINDOW = 50
STALL_DELTA = 1e-15


@dataclass(frozen=True)
class FactorPair:
    L: np.ndarray
    R: np.ndarray = None
    psd: bool = False

    def __post_init__(self):
        L = np.asarray(self.L, dtype=np.float64)
        object.__setattr__(self, "L", L)
        if self.psd or self.R is None:
            object.__setattr__(self, "R", L)
            object.__setattr__(self, "psd", True)
        else:
            R = np.asarray(self.R, dtype=np.float64)
            if R.shape[1] != L.shape[1]:
                raise ValueError("L and R must have the same number of columns")
            object.__setattr__(self, "R", R)

    @property
    def X(self) -> np.ndarray:
        return self.L @ self.R.T

    @property
    def rank(self) -> int:
        return self.L.shape[1]

    def transform(self, Q) -> "FactorPair":
        """The equivalent factorization ``(L Q, R Q^{-T})``."""
        Q = np.asarray(Q, dtype=np.float64)
        if self.psd:
            return FactorPair(self.L @ Q, psd=True)
        return FactorPair(self.L @ Q, self.R @ np.linalg.inv(Q).T)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.L)) and np.all(np.isfinite(self.R)))


def planted_factors(gt) -> FactorPair:
    if gt.psd:
        return FactorPair(gt.Lstar, psd=True)
    return FactorPair(gt.Lstar, gt.Rstar)


@dataclass(frozen=True)
class StepSchedule:
    kind: str = "polyak"
    fstar: float = 0.0
    lam: float = 1.0
    q: float = 0.9
    eta: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"schedule kind must be one of {SCHEDULES}")
        if self.kind == "geometric" and not (0 < self.q < 1 and self.lam > 0):
            raise ValueError("geometric schedule needs lam > 0 and 0 < q < 1")


def theorem_schedule(sigma_r: float, chi_f: float, noisy: bool = False) -> StepSchedule:
    """Geometric schedule with the constants of the convergence guarantees."""
    c = 0.13 if noisy else 0.16
    lam = math.sqrt((math.sqrt(2) - 1) / 2) * 0.02 * sigma_r / chi_f ** 2
    return StepSchedule("geometric", lam=lam, q=math.sqrt(1 - c / chi_f ** 2))


def basin_radius(sigma_r: float, chi_f: float) -> float:
    return 0.02 * sigma_r / chi_f


@dataclass(frozen=True)
class SolverConfig:
    algorithm: str = "scaled_sm"
    schedule: StepSchedule = field(default_factory=StepSchedule)
    max_iters: int = 1000
    tol_rel_err: float = 1e-12
    record_dist: bool = False
    chi_f: float | None = None
    record_time: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class TraceRow:
    iter: int
    fval: float
    eta: float
    rel_err: float
    dist: float
    elapsed_ns: int


@dataclass
class SolverTrace:
    rows: list[TraceRow] = field(default_factory=list)
    status: str = "running"
    factors: FactorPair | None = None
    events: list[str] = field(default_factory=list)

    COLUMNS = ("iter", "fval", "eta", "rel_err", "dist", "elapsed_ns")

    @property
    def final(self) -> TraceRow:
        return self.rows[-1]

    @property
    def etas(self) -> np.ndarray:
        return np.array([r.eta for r in self.rows])

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(f"{r.iter},{r.fval:.17g},{r.eta:.17g},{r.rel_err:.17g},{r.dist:.17g},{r.elapsed_ns}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "SolverTrace":
        import csv

        with open(path, newline="") as fh:
            rows = [
                TraceRow(int(d["iter"]), float(d["fval"]), float(d["eta"]), float(d["rel_err"]),
                         float(d["dist"]), int(d["elapsed_ns"]))
                for d in csv.DictReader(fh)
            ]
        return cls(rows=rows, status="loaded")


# ---------------------------------------------------------------------------
# single-step primitives


def _check_S(F: FactorPair, S) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (F.L.shape[0], F.R.shape[0]):
        raise ValueError(f"S has shape {S.shape}, expected {(F.L.shape[0], F.R.shape[0])}")
    return S


def scaled_sm_step(F: FactorPair, S, eta: float) -> FactorPair:
    S = _check_S(F, S)
    L, R = F.L, F.R
    for M, name in ((L, "L"), (R, "R")):
        if gram_is_degenerate(M):
            log.warning("Gram of %s is numerically singular; using pseudo-inverse", name)
    if F.psd:
        return FactorPair(L - eta * (S @ L) @ gram_pinv(L), psd=True)
    return FactorPair(L - eta * (S @ R) @ gram_pinv(R), R - eta * (S.T @ L) @ gram_pinv(L))


def vanilla_sm_step(F: FactorPair, S, eta: float) -> FactorPair:
    S = _check_S(F, S)
    if F.psd:
        return FactorPair(F.L - eta * (S @ F.L), psd=True)
    return FactorPair(F.L - eta * (S @ F.R), F.R - eta * (S.T @ F.L))


def _ls_gradient(loss: LossSpec, F: FactorPair) -> np.ndarray:
    if loss.kind != "least_squares":
        raise ValueError("gradient steps require a least_squares loss")
    return loss.evaluate(F.X).subgradient


def scaled_gd_step(F: FactorPair, loss: LossSpec, eta: float) -> FactorPair:
    return scaled_sm_step(F, _ls_gradient(loss, F), eta)


def gd_step(F: FactorPair, loss: LossSpec, eta: float) -> FactorPair:
    return vanilla_sm_step(F, _ls_gradient(loss, F), eta)


def _preconditioned_sq(S, M) -> float:
    # ||S M (M^T M)^{-1/2}||_F^2 == <S, S M pinv(M^T M) M^T>
    SM = S @ M
    return float(np.sum((SM @ gram_pinv(M)) * SM))


def scaled_subgrad_norm(F: FactorPair, S) -> float:
    S = _check_S(F, S)
    return math.sqrt(max(_preconditioned_sq(S, F.R) + _preconditioned_sq(S.T, F.L), 0.0))


def vanilla_subgrad_norm(F: FactorPair, S) -> float:
    S = _check_S(F, S)
    return math.sqrt(float(np.sum((S @ F.R) ** 2) + np.sum((S.T @ F.L) ** 2)))


class Stalled(Exception):
    pass


def polyak_eta(F: FactorPair, S, fval: float, fstar: float, scaled: bool = True) -> float:
    """Polyak stepsize ``(f - fstar) / ||S||^2`` in the update's metric.

    ``fval`` is the loss at ``L R^T`` (a ``LossSpec`` is accepted too and
    evaluated).  Raises ``Stalled`` on a zero subgradient away from the
    optimal value.
    """
    if isinstance(fval, LossSpec):
        fval = fval.value_from_residual(fval.residual(F.X))
    gap = fval - fstar
    norm = scaled_subgrad_norm(F, S) if scaled else vanilla_subgrad_norm(F, S)
    if gap <= 0:
        return 0.0
    if norm == 0:
        raise Stalled("zero subgradient with positive optimality gap")
    return gap / norm ** 2


def geometric_eta(F: FactorPair, S, t: int, lam: float, q: float, scaled: bool = True) -> float:
    if t < 0:
        raise ValueError("t must be >= 0")
    norm = scaled_subgrad_norm(F, S) if scaled else vanilla_subgrad_norm(F, S)
    if norm == 0:
        return 0.0
    return lam * q ** t / norm


# ---------------------------------------------------------------------------
# run loop


_STEPS = {
    "scaled_sm": scaled_sm_step,
    "vanilla_sm": vanilla_sm_step,
    "scaled_gd": scaled_sm_step,
    "gd": vanilla_sm_step,
}


def run(config: SolverConfig, loss: LossSpec, F0: FactorPair, gt=None) -> SolverTrace:
    """Iterate from ``F0`` and record a trace.

    Stops when the relative error reaches ``config.tol_rel_err`` (only with a
    ground truth), when a Polyak step reaches the target value, on stall, on
    a non-finite iterate, or after ``max_iters`` steps.
    """
    alg = config.algorithm
    sched = config.schedule
    if alg in ("scaled_gd", "gd") and loss.kind != "least_squares":
        raise ValueError(f"{alg} requires a least_squares loss")
    if (F0.L.shape[0], F0.R.shape[0]) != (loss.op.n1, loss.op.n2):
        raise ValueError("initial factors do not match operator dimensions")
    if gt is not None and F0.L.shape != gt.Lstar.shape:
        raise ValueError("initial factors do not match ground-truth rank")
    scaled = alg in ("scaled_sm", "scaled_gd")
    step = _STEPS[alg]

    trace = SolverTrace()
    Xstar = gt.X if gt is not None else None
    F = F0
    Q = None
    t0 = time.perf_counter_ns()
    prev_err = None
    flat = 0
    for t in range(config.max_iters + 1):
        if not F.is_finite():
            trace.status = "diverged"
            break
        X = F.X
        ev = loss.evaluate(X)
        if not math.isfinite(ev.value):
            trace.status = "diverged"
            break
        rel = relative_error(X, Xstar) if Xstar is not None else math.nan
        d = math.nan
        if config.record_dist and gt is not None:
            a = align(F, gt, Q0=Q)
            Q = a.Q
            d = math.sqrt(max(a.objective, 0.0))
            if not a.converged:
                trace.events.append(f"iter {t}: alignment not converged")
        if ev.degenerate:
            trace.events.append(f"iter {t}: zero residual, zero subgradient")

        done = None
        eta = math.nan
        if Xstar is not None and rel <= config.tol_rel_err:
            done = "converged"
        elif t == config.max_iters:
            done = "max_iters"
        else:
            S = ev.subgradient
            try:
                if sched.kind == "polyak":
                    eta = polyak_eta(F, S, ev.value, sched.fstar, scaled)
                    if eta == 0.0:
                        done = "converged"
                elif sched.kind == "geometric":
                    eta = geometric_eta(F, S, t, sched.lam, sched.q, scaled)
                else:
                    eta = sched.eta
            except Stalled:
                done = "stalled"
        elapsed = time.perf_counter_ns() - t0 if config.record_time else 0
        trace.rows.append(TraceRow(t, ev.value, eta if done is None else math.nan, rel, d, elapsed))
        if done is not None:
            trace.status = done
            break

        # stall: relative error (or loss, without a truth) frozen for a window
        probe = rel if Xstar is not None else ev.value
        if prev_err is not None and abs(probe - prev_err) < STALL_DELTA:
            flat += 1
            if flat >= STALL_WINDOW:
                trace.status = "stalled"
                break
        else:
            flat = 0
        prev_err = probe
        F = step(F, S, eta)
    trace.factors = F
    return trace


def with_fstar(schedule: StepSchedule, fstar: float) -> StepSchedule:
    return replace(schedule, fstar=fstar)
