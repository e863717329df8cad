"""Dense linear-algebra kernels and seeded random generators.

Everything here is a pure function of its inputs.  Matrices are plain
``numpy.ndarray`` objects in row-major (C) order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Singular values below SVD_RTOL * sigma_max are treated as zero.
SVD_RTOL = 1e-12
GRAM_PINV_TOL = 1e-10


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.singular_values) @ self.V.T


def as_matrix(X, name: str = "X") -> np.ndarray:
    """Validate and return ``X`` as a finite 2-d float64 array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} has non-finite entries")
    return X


def thin_svd(X, k: int) -> SvdResult:
    """Top-``k`` singular triplets of ``X``, singular values non-increasing."""
    X = as_matrix(X)
    if not 0 <= k <= min(X.shape):
        raise ValueError(f"k={k} must be in [0, {min(X.shape)}]")
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    U, s, V = U[:, :k], s[:k].copy(), Vt[:k].T
    if s.size and s[0] > 0:
        s[s < SVD_RTOL * s[0]] = 0.0
    return SvdResult(U, s, V)


def partial_frobenius_norm(X, r: int) -> float:
    """sqrt of the sum of the ``r`` largest squared singular values."""
    if r < 1:
        raise ValueError("r must be >= 1")
    X = as_matrix(X)
    s = np.linalg.svd(X, compute_uv=False)
    return float(np.sqrt(np.sum(s[:r] ** 2)))


def best_rank_r(X, r: int) -> np.ndarray:
    if r < 1:
        raise ValueError("r must be >= 1")
    X = as_matrix(X)
    return thin_svd(X, min(r, min(X.shape))).reconstruct()


def gram_pinv(F, tol: float = GRAM_PINV_TOL) -> np.ndarray:
    """Pseudo-inverse of ``F.T @ F`` with relative cutoff ``tol``."""
    F = np.asarray(F, dtype=np.float64)
    G = F.T @ F
    # Gram is symmetric PSD; an eigendecomposition is its SVD.
    w, V = np.linalg.eigh((G + G.T) / 2)
    wmax = w.max(initial=0.0)
    keep = w > tol * wmax if wmax > 0 else np.zeros_like(w, dtype=bool)
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (V * inv) @ V.T


def gram_is_degenerate(F, tol: float = GRAM_PINV_TOL) -> bool:
    w = np.linalg.eigvalsh(F.T @ F)
    return bool(w.max(initial=0.0) <= 0 or w.min() <= tol * w.max())


def rademacher_orthonormal(n: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal basis of the span of an ``n x r`` Rademacher matrix.

    QR with the sign convention diag(R) >= 0, so the output is a
    deterministic function of the drawn signs.
    """
    if r > n:
        raise ValueError(f"r={r} exceeds n={n}")
    for _ in range(2):
        B = rng.choice(np.array([-1.0, 1.0]), size=(n, r))
        Q, R = np.linalg.qr(B)
        d = np.diag(R)
        if np.min(np.abs(d)) > 1e-10 * np.sqrt(n):
            signs = np.where(d < 0, -1.0, 1.0)
            return Q * signs
    raise np.linalg.LinAlgError("sampled Rademacher matrix is rank-deficient")


STREAMS = {"truth": 0, "operator": 1, "noise": 2, "outliers": 3, "init": 4, "probes": 5}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named component of a master seed."""
    key = (STREAMS[name], *extra)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
