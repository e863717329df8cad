"""Residual losses in the matrix variable and their (sub)gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("l1", "l2", "least_squares")


@dataclass(frozen=True)
class Evaluation:
    """Loss value and subgradient from one shared forward pass."""

    value: float
    subgradient: np.ndarray
    residual: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True)
class LossSpec:
    kind: str
    op: object
    y: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"loss kind must be one of {KINDS}, got {self.kind!r}")
        y = np.asarray(self.y, dtype=np.float64)
        if y.shape != (self.op.m,):
            raise ValueError(f"y has length {y.size}, operator has m={self.op.m}")
        object.__setattr__(self, "y", y)

    def residual(self, X) -> np.ndarray:
        return self.op.apply(X) - self.y

    def value_from_residual(self, r: np.ndarray) -> float:
        if self.kind == "l1":
            return float(np.abs(r).sum())
        if self.kind == "l2":
            return float(np.linalg.norm(r))
        return float(0.5 * r @ r)

    def evaluate(self, X) -> Evaluation:
        r = self.residual(X)
        f = self.value_from_residual(r)
        degenerate = False
        if self.kind == "l1":
            # np.sign(0) == 0, the minimum-norm choice per coordinate
            v = np.sign(r)
        elif self.kind == "l2":
            nr = np.linalg.norm(r)
            degenerate = nr == 0
            v = r / nr if nr > 0 else np.zeros_like(r)
        else:
            v = r
        return Evaluation(f, self.op.adjoint(v), r, degenerate)


def value(loss: LossSpec, X) -> float:
    return loss.value_from_residual(loss.residual(X))


def subgradient(loss: LossSpec, X) -> np.ndarray:
    return loss.evaluate(X).subgradient
