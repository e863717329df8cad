"""Spectral and truncated spectral initialization."""

from __future__ import annotations

import math

import numpy as np

from .matcore import thin_svd
from .metrics import dist
from .solvers import FactorPair


class RankDeficientSurrogate(ValueError):
    pass


def truncation_set(y, p_s: float) -> np.ndarray:
    """Indices kept after discarding the largest-amplitude measurements.

    Keeps ``i`` with ``|y_i| <= |y|_(k)``, the k-th largest amplitude,
    ``k = ceil(p_s * m)``; ``k = 0`` keeps everything.
    """
    if not 0 <= p_s < 0.5:
        raise ValueError("p_s must lie in [0, 0.5)")
    amp = np.abs(np.asarray(y, dtype=np.float64))
    k = math.ceil(p_s * amp.size)
    if k == 0:
        return np.arange(amp.size)
    thr = np.sort(amp)[::-1][k - 1]
    return np.flatnonzero(amp <= thr)


def surrogate(op, y, keep=None) -> np.ndarray:
    """Rescaled adjoint ``c * (m/|I|) * A*(y restricted to I)``."""
    y = np.asarray(y, dtype=np.float64)
    if keep is None:
        return op.surrogate_scale * op.adjoint(y)
    v = np.zeros_like(y)
    v[keep] = y[keep]
    return op.surrogate_scale * (y.size / keep.size) * op.adjoint(v)


def spectral_init(op, y, r: int, psd: bool | None = None, trace_correction: bool = False,
                  keep=None) -> FactorPair:
    """Top-r factors of the spectral surrogate.

    In PSD mode the surrogate is symmetrized and, for quadratic sampling
    with ``trace_correction``, de-biased: ``E[c A*(A(X))] = 2 X + tr(X) I``
    there, so ``(M - tau I) / 2`` with ``tau`` the kept-sample estimate of
    ``tr(X)`` targets ``X`` itself.
    """
    if r < 1 or r > min(op.n1, op.n2):
        raise ValueError(f"rank r={r} must be in [1, min(n1, n2)]")
    psd = op.symmetric if psd is None else psd
    M = surrogate(op, y, keep)
    if psd:
        M = (M + M.T) / 2
        if trace_correction and op.kind == "quadratic_sampling":
            yk = np.asarray(y, dtype=np.float64) if keep is None else np.asarray(y)[keep]
            tau = op.m * float(np.mean(yk))
            M = (M - tau * np.eye(op.n1)) / 2
        w, V = np.linalg.eigh(M)
        w, V = w[::-1][:r], V[:, ::-1][:, :r]
        if w[-1] <= 1e-12 * max(abs(w[0]), 1e-300):
            raise RankDeficientSurrogate(f"r-th eigenvalue of the surrogate is {w[-1]:.3g}")
        return FactorPair(V * np.sqrt(w), psd=True)
    svd = thin_svd(M, r)
    s = svd.singular_values
    if s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise RankDeficientSurrogate(f"r-th singular value of the surrogate is {s[-1]:.3g}")
    root = np.sqrt(s)
    return FactorPair(svd.U * root, svd.V * root)


def truncated_spectral_init(op, y, r: int, p_s: float, psd: bool | None = None,
                            trace_correction: bool = False) -> FactorPair:
    keep = truncation_set(y, p_s)
    if keep.size == np.asarray(y).size:
        keep = None
    return spectral_init(op, y, r, psd=psd, trace_correction=trace_correction, keep=keep)


def planted_perturbation(gt, radius: float, rng: np.random.Generator) -> FactorPair:
    """Planted factors at distance ``radius`` from the truth in the scaled metric.

    A random direction ``(D_L, D_R)`` is drawn and its length rescaled until
    the aligned ``dist`` equals ``radius`` (to ~1e-10 relative).  Alignment
    absorbs part of the raw perturbation, so the raw length ends up slightly
    larger than ``radius``.
    """
    d = np.sqrt(gt.sigma)
    DL = rng.standard_normal(gt.Lstar.shape)
    if gt.psd:
        DL /= np.linalg.norm(DL * d) * math.sqrt(2)
        make = lambda s: FactorPair(gt.Lstar + s * DL, psd=True)
    else:
        DR = rng.standard_normal(gt.Rstar.shape)
        norm = math.sqrt(np.sum((DL * d) ** 2) + np.sum((DR * d) ** 2))
        DL, DR = DL / norm, DR / norm
        make = lambda s: FactorPair(gt.Lstar + s * DL, gt.Rstar + s * DR)
    if radius == 0:
        return make(0.0)
    s = radius
    F = make(s)
    # dist is close to linear in s for small radii: fixed-point rescaling
    for _ in range(30):
        got = dist(F, gt)
        if got == 0 or abs(got - radius) <= 1e-10 * radius:
            break
        s *= radius / got
        F = make(s)
    return F
