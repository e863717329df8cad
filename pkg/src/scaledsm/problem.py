"""Planted ground truths and noisy, outlier-corrupted observations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .matcore import rademacher_orthonormal


@dataclass(frozen=True)
class GroundTruth:
    """Rank-r target ``X = Lstar @ Rstar.T`` with balanced factors."""

    Ustar: np.ndarray
    Vstar: np.ndarray
    sigma: np.ndarray
    psd: bool = False

    @property
    def Lstar(self) -> np.ndarray:
        return self.Ustar * np.sqrt(self.sigma)

    @property
    def Rstar(self) -> np.ndarray:
        return self.Vstar * np.sqrt(self.sigma)

    @property
    def X(self) -> np.ndarray:
        return (self.Ustar * self.sigma) @ self.Vstar.T

    @property
    def r(self) -> int:
        return self.sigma.size

    @property
    def shape(self) -> tuple[int, int]:
        return self.Ustar.shape[0], self.Vstar.shape[0]

    @property
    def kappa(self) -> float:
        return float(self.sigma[0] / self.sigma[-1])

    @property
    def sigma_r(self) -> float:
        return float(self.sigma[-1])

    def to_dict(self) -> dict:
        return {
            "psd": self.psd,
            "sigma": self.sigma.tolist(),
            "Ustar": self.Ustar.tolist(),
            "Vstar": self.Vstar.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            Ustar=np.asarray(d["Ustar"], dtype=float),
            Vstar=np.asarray(d["Vstar"], dtype=float),
            sigma=np.asarray(d["sigma"], dtype=float),
            psd=bool(d["psd"]),
        )


def make_ground_truth(n1: int, n2: int, r: int, kappa: float, psd: bool,
                      rng: np.random.Generator) -> GroundTruth:
    """Singular values linearly spaced from ``kappa`` down to 1."""
    if kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    if r < 1 or r > min(n1, n2):
        raise ValueError(f"rank r={r} must be in [1, min(n1, n2)]")
    if psd and n1 != n2:
        raise ValueError("psd ground truth requires n1 == n2")
    if r == 1 and kappa != 1:
        raise ValueError("a rank-1 truth has kappa == 1")
    sigma = np.linspace(kappa, 1.0, r)
    U = rademacher_orthonormal(n1, r, rng)
    V = U if psd else rademacher_orthonormal(n2, r, rng)
    return GroundTruth(U, V, sigma, psd)


@dataclass(frozen=True)
class Observations:
    y: np.ndarray
    w: np.ndarray
    s: np.ndarray
    outlier_support: np.ndarray
    p_s: float = 0.0
    sigma_w: float = 0.0
    clean: np.ndarray = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.y.size

    def to_dict(self) -> dict:
        # field order is the documented bundle layout
        return {
            "p_s": self.p_s,
            "sigma_w": self.sigma_w,
            "y": self.y.tolist(),
            "w": self.w.tolist(),
            "s": self.s.tolist(),
            "outlier_support": self.outlier_support.tolist(),
            "clean": None if self.clean is None else self.clean.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Observations":
        return cls(
            y=np.asarray(d["y"], dtype=float),
            w=np.asarray(d["w"], dtype=float),
            s=np.asarray(d["s"], dtype=float),
            outlier_support=np.asarray(d["outlier_support"], dtype=np.int64),
            p_s=float(d["p_s"]),
            sigma_w=float(d["sigma_w"]),
            clean=None if d.get("clean") is None else np.asarray(d["clean"], dtype=float),
        )


def observe(op, gt: GroundTruth, sigma_w: float, p_s: float,
            noise_rng: np.random.Generator,
            outlier_rng: np.random.Generator | None = None) -> Observations:
    """Draw ``y = A(X) + w + s``.

    Noise is uniform on [-sigma_w/m, sigma_w/m]; each index is an outlier
    with probability ``p_s`` and then receives a value uniform on
    [-10 |A(X)|_inf, 10 |A(X)|_inf].  Noise and outliers come from separate
    generators so toggling one does not shift the other.
    """
    if sigma_w < 0:
        raise ValueError("sigma_w must be >= 0")
    if not 0 <= p_s < 0.5:
        raise ValueError("p_s must lie in [0, 0.5)")
    if (op.n1, op.n2) != gt.shape:
        raise ValueError(f"operator dims {(op.n1, op.n2)} do not match truth {gt.shape}")
    if outlier_rng is None:
        outlier_rng = noise_rng
    clean = op.apply(gt.X)
    m = clean.size
    w = noise_rng.uniform(-sigma_w / m, sigma_w / m, size=m) if sigma_w > 0 else np.zeros(m)
    mask = outlier_rng.random(m) < p_s
    amp = 10.0 * np.max(np.abs(clean))
    s = np.zeros(m)
    s[mask] = outlier_rng.uniform(-amp, amp, size=int(mask.sum()))
    return Observations(
        y=clean + w + s, w=w, s=s, outlier_support=np.flatnonzero(mask),
        p_s=p_s, sigma_w=sigma_w, clean=clean,
    )


def snr_db(clean, sigma_w: float) -> float:
    if sigma_w <= 0:
        raise ValueError("SNR is undefined for sigma_w <= 0")
    return float(20.0 * np.log10(np.sum(np.abs(clean)) / sigma_w))


def sigma_w_for_snr(clean, snr: float) -> float:
    return float(np.sum(np.abs(clean)) * 10.0 ** (-snr / 20.0))


def save_bundle(path, gt: GroundTruth, obs: Observations) -> None:
    Path(path).write_text(json.dumps({"truth": gt.to_dict(), "observations": obs.to_dict()}))


def load_bundle(path) -> tuple[GroundTruth, Observations]:
    d = json.loads(Path(path).read_text())
    return GroundTruth.from_dict(d["truth"]), Observations.from_dict(d["observations"])
