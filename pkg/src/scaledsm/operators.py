"""Linear measurement ensembles and randomized estimates of their geometry.

Both Gaussian ensembles carry the ``1/m`` normalization inside the
operator::

    matrix sensing       A(X)_i = <A_i, X> / m
    quadratic sampling   A(X)_i = a_i^T X a_i / m

Measurement data is drawn in fixed-size row blocks, each from its own
counter-keyed stream, so any block can be regenerated on demand and a
dense copy and a regenerated copy agree bit for bit.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .matcore import STREAMS, as_matrix

BLOCK_ROWS = 256
DEFAULT_CACHE_BYTES = 1 << 30


def _block_rng(seed: int, block: int) -> np.random.Generator:
    # the operator sub-stream of the master seed, one child per block
    key = (STREAMS["operator"], block)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


class SensingOperator:
    """Common surface: ``apply``, ``adjoint`` and their batched forms.

    ``surrogate_scale`` is the factor ``c`` for which ``c * A*(A(X))`` is an
    unbiased surrogate of ``X`` (up to the trace shift of quadratic
    sampling); spectral initialization multiplies by it.
    """

    kind = "abstract"
    symmetric = False

    def __init__(self, m: int, n1: int, n2: int):
        if m < 1 or n1 < 1 or n2 < 1:
            raise ValueError("operator dimensions must be positive")
        self.m, self.n1, self.n2 = int(m), int(n1), int(n2)

    @property
    def surrogate_scale(self) -> float:
        return float(self.m)

    def _check_X(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape != (self.n1, self.n2):
            raise ValueError(f"expected a {self.n1}x{self.n2} matrix, got {X.shape}")
        return X

    def _check_v(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.m,):
            raise ValueError(f"expected a vector of length {self.m}, got {v.shape}")
        return v

    def apply(self, X) -> np.ndarray:
        return self.apply_many(self._check_X(X)[None])[0]

    def adjoint(self, v) -> np.ndarray:
        raise NotImplementedError

    def apply_many(self, Xs) -> np.ndarray:
        """Apply to a stack of shape ``(k, n1, n2)``; returns ``(k, m)``."""
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind, "m": self.m, "n1": self.n1, "n2": self.n2}


class DenseOperator(SensingOperator):
    """Explicit measurement matrix, one row per measurement (row-major vec)."""

    kind = "dense"

    def __init__(self, matrix, n1: int, n2: int, surrogate_scale: float | None = None):
        matrix = as_matrix(matrix, "matrix")
        super().__init__(matrix.shape[0], n1, n2)
        if matrix.shape[1] != n1 * n2:
            raise ValueError("matrix width must equal n1 * n2")
        self.matrix = matrix
        self._scale = surrogate_scale

    @property
    def surrogate_scale(self) -> float:
        return float(self.m if self._scale is None else self._scale)

    def apply_many(self, Xs) -> np.ndarray:
        Xs = np.asarray(Xs, dtype=np.float64).reshape(-1, self.n1 * self.n2)
        return Xs @ self.matrix.T

    def adjoint(self, v) -> np.ndarray:
        return (self._check_v(v) @ self.matrix).reshape(self.n1, self.n2)


class MatrixSensing(SensingOperator):
    """Gaussian matrix sensing, ``A_i`` with i.i.d. N(0, 1) entries.

    ``storage="dense"`` materializes every block up front.  ``"seeded"``
    regenerates blocks on each pass, keeping at most ``cache_bytes`` of them
    resident; with the default budget a desk-scale operator ends up fully
    cached after the first pass.
    """

    kind = "matrix_sensing"

    def __init__(self, n1: int, n2: int, m: int, seed: int, storage: str = "dense",
                 cache_bytes: int = DEFAULT_CACHE_BYTES):
        super().__init__(m, n1, n2)
        if storage not in ("dense", "seeded"):
            raise ValueError(f"unknown storage {storage!r}")
        self.seed = int(seed)
        self.storage = storage
        self.cache_bytes = int(cache_bytes) if storage == "seeded" else 0
        self._nblocks = -(-self.m // BLOCK_ROWS)
        self._cache: dict[int, np.ndarray] = {}
        self._cached_bytes = 0
        self._lock = threading.Lock()
        self._dense = None
        if storage == "dense":
            self._dense = np.concatenate([self._generate(b) for b in range(self._nblocks)])

    def _generate(self, b: int) -> np.ndarray:
        rows = min(BLOCK_ROWS, self.m - b * BLOCK_ROWS)
        return _block_rng(self.seed, b).standard_normal((rows, self.n1 * self.n2))

    def _block(self, b: int) -> np.ndarray:
        blk = self._cache.get(b)
        if blk is None:
            blk = self._generate(b)
            with self._lock:
                if b not in self._cache and self._cached_bytes + blk.nbytes <= self.cache_bytes:
                    self._cache[b] = blk
                    self._cached_bytes += blk.nbytes
        return blk

    def _blocks(self):
        # same block partition for both storages keeps results bit-identical
        if self._dense is not None:
            for start in range(0, self.m, BLOCK_ROWS):
                yield start, self._dense[start:start + BLOCK_ROWS]
            return
        for b in range(self._nblocks):
            yield b * BLOCK_ROWS, self._block(b)

    def measurement(self, i: int) -> np.ndarray:
        """The matrix ``A_i`` (without the 1/m factor)."""
        b, j = divmod(i, BLOCK_ROWS)
        if self._dense is not None:
            row = self._dense[i]
        else:
            row = self._block(b)[j]
        return row.reshape(self.n1, self.n2).copy()

    def apply_many(self, Xs) -> np.ndarray:
        Xs = np.asarray(Xs, dtype=np.float64).reshape(-1, self.n1 * self.n2)
        out = np.empty((Xs.shape[0], self.m))
        for start, blk in self._blocks():
            out[:, start:start + blk.shape[0]] = Xs @ blk.T
        return out / self.m

    def adjoint(self, v) -> np.ndarray:
        v = self._check_v(v)
        acc = np.zeros(self.n1 * self.n2)
        for start, blk in self._blocks():
            acc += v[start:start + blk.shape[0]] @ blk
        return acc.reshape(self.n1, self.n2) / self.m

    def spec(self) -> dict:
        return {**super().spec(), "seed": self.seed, "storage": self.storage}


class QuadraticSampling(SensingOperator):
    """Rank-one measurements ``a_i a_i^T`` with Gaussian ``a_i``; square only."""

    kind = "quadratic_sampling"
    symmetric = True

    def __init__(self, n: int, m: int, seed: int, storage: str = "dense"):
        super().__init__(m, n, n)
        self.seed = int(seed)
        self.storage = storage
        nblocks = -(-self.m // BLOCK_ROWS)
        self.vectors = np.concatenate([
            _block_rng(self.seed, b).standard_normal((min(BLOCK_ROWS, self.m - b * BLOCK_ROWS), n))
            for b in range(nblocks)
        ])

    def apply_many(self, Xs, chunk: int = 32) -> np.ndarray:
        Xs = np.asarray(Xs, dtype=np.float64).reshape(-1, self.n1, self.n2)
        a = self.vectors
        out = np.empty((Xs.shape[0], self.m))
        for k in range(0, Xs.shape[0], chunk):
            AX = np.einsum("mi,kij->kmj", a, Xs[k:k + chunk])
            out[k:k + chunk] = np.einsum("kmj,mj->km", AX, a)
        return out / self.m

    def adjoint(self, v) -> np.ndarray:
        v = self._check_v(v)
        a = self.vectors
        M = (a.T * v) @ a / self.m
        return (M + M.T) / 2

    def spec(self) -> dict:
        return {"kind": self.kind, "m": self.m, "n1": self.n1, "n2": self.n2,
                "seed": self.seed, "storage": self.storage}


def make_operator(kind: str, n1: int, n2: int, m: int, seed: int, storage: str = "dense",
                  cache_bytes: int = DEFAULT_CACHE_BYTES) -> SensingOperator:
    if kind == "matrix_sensing":
        return MatrixSensing(n1, n2, m, seed, storage=storage, cache_bytes=cache_bytes)
    if kind == "quadratic_sampling":
        if n1 != n2:
            raise ValueError("quadratic sampling requires n1 == n2")
        return QuadraticSampling(n1, m, seed, storage=storage)
    raise ValueError(f"unknown operator kind {kind!r}")


def operator_from_spec(spec: dict, **kw) -> SensingOperator:
    return make_operator(spec["kind"], spec["n1"], spec["n2"], spec["m"], spec["seed"],
                         storage=spec.get("storage", "dense"), **kw)


# ---------------------------------------------------------------------------
# randomized geometry probes


@dataclass(frozen=True)
class RipEstimate:
    """One-sided probe estimates: ``delta1_hat >= delta1``, ``delta2_hat <= delta2``."""

    delta1_hat: float
    delta2_hat: float
    trials: int
    rank_probed: int
    delta3_hat: float | None = None

    @property
    def chi_hat(self) -> float:
        mu = self.delta1_hat if self.delta3_hat is None else self.delta3_hat
        return self.delta2_hat / mu


def random_low_rank_probes(op: SensingOperator, rank: int, trials: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Unit-Frobenius probes of rank <= ``rank``, stacked ``(trials, n1, n2)``.

    Generic ensembles use ``G @ H.T``.  For symmetric ensembles the probes
    alternate between PSD ``G @ G.T`` and indefinite ``G @ D @ G.T`` with a
    random sign diagonal, since the large-norm directions of quadratic
    sampling are the PSD ones.
    """
    n1, n2 = op.n1, op.n2
    Ms = np.empty((trials, n1, n2))
    for t in range(trials):
        G = rng.standard_normal((n1, rank))
        if op.symmetric:
            d = np.ones(rank) if t % 2 == 0 else rng.choice([-1.0, 1.0], size=rank)
            M = (G * d) @ G.T
        else:
            M = G @ rng.standard_normal((n2, rank)).T
        Ms[t] = M / np.linalg.norm(M)
    return Ms


def _normalized(directions) -> np.ndarray:
    D = np.asarray(directions, dtype=np.float64)
    norms = np.linalg.norm(D.reshape(D.shape[0], -1), axis=1)
    keep = norms > 0
    return D[keep] / norms[keep][:, None, None]


def estimate_mixed_rip(op: SensingOperator, r: int, trials: int, rng: np.random.Generator,
                       extra_directions=None) -> RipEstimate:
    """Min and max of ``||A(M)||_1`` over random unit rank-2r probes.

    ``extra_directions`` (any nonzero rank <= 2r matrices) join the probe
    set after normalization.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    Ms = random_low_rank_probes(op, 2 * r, trials, rng)
    if extra_directions is not None and len(extra_directions):
        Ms = np.concatenate([Ms, _normalized(extra_directions)])
    norms = np.abs(op.apply_many(Ms)).sum(axis=1)
    return RipEstimate(float(norms.min()), float(norms.max()), trials, 2 * r)


def estimate_outlier_bound(op: SensingOperator, support, r: int, trials: int,
                           rng: np.random.Generator, extra_directions=None) -> float:
    """Min of ``(||A_{S^c}(M)||_1 - ||A_S(M)||_1) / ||M||_F`` over probes.

    A randomized upper estimate of the outlier-bound constant.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    support = np.asarray(support, dtype=np.int64)
    if support.size and (support.min() < 0 or support.max() >= op.m):
        raise ValueError("support indices out of range")
    Ms = random_low_rank_probes(op, 2 * r, trials, rng)
    if extra_directions is not None and len(extra_directions):
        Ms = np.concatenate([Ms, _normalized(extra_directions)])
    vals = np.abs(op.apply_many(Ms))
    sign = np.ones(op.m)
    sign[support] = -1.0
    return float((vals @ sign).min())
