"""Preconditioner-aware factor distance and reporting metrics.

The distance between ``F = (L, R)`` and the planted factors is

    dist^2 = min_{Q in GL(r)} ||(L Q - L*) S^{1/2}||_F^2 + ||(R Q^{-T} - R*) S^{1/2}||_F^2

with ``S`` the planted singular values.  The minimization over ``Q`` is a
small smooth least-squares problem solved by Levenberg-Marquardt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Alignment:
    Q: np.ndarray
    objective: float
    converged: bool
    grad_norm: float
    iterations: int = 0

    @property
    def cond(self) -> float:
        return float(np.linalg.cond(self.Q))


def _weights(gt, scaled: bool) -> np.ndarray:
    return np.sqrt(gt.sigma) if scaled else np.ones(gt.r)


def _residuals(Q, L, R, Ls, Rs, d):
    P = np.linalg.inv(Q).T
    return (L @ Q - Ls) * d, (R @ P - Rs) * d, P


def alignment_objective(Q, F, gt, scaled: bool = True) -> float:
    d = _weights(gt, scaled)
    E1, E2, _ = _residuals(np.asarray(Q, float), F.L, F.R, gt.Lstar, gt.Rstar, d)
    return float(np.sum(E1 ** 2) + np.sum(E2 ** 2))


def alignment_gradient(Q, F, gt, scaled: bool = True) -> np.ndarray:
    """Closed-form gradient of the alignment objective in ``Q``."""
    Q = np.asarray(Q, float)
    d2 = _weights(gt, scaled) ** 2
    Qinv = np.linalg.inv(Q)
    L, R = F.L, F.R
    g1 = 2 * L.T @ ((L @ Q - gt.Lstar) * d2)
    G2 = 2 * R.T @ ((R @ Qinv.T - gt.Rstar) * d2)
    return g1 - Qinv.T @ G2.T @ Qinv.T


def _jacobian(L, R, P, d):
    # columns indexed by the row-major entries of Q
    n1, r = L.shape
    n2 = R.shape[0]
    eye = np.eye(r)
    J1 = np.einsum("ia,bc,c->icab", L, eye, d).reshape(n1 * r, r * r)
    J2 = -np.einsum("ib,ac,c->icab", R @ P, P, d).reshape(n2 * r, r * r)
    return np.vstack([J1, J2])


def _initial_guesses(L, R, Ls, Rs):
    r = L.shape[1]
    guesses = [np.eye(r)]
    GL = L.T @ L
    GR = R.T @ R
    try:
        guesses.append(np.linalg.solve(GL, L.T @ Ls))
    except np.linalg.LinAlgError:
        pass
    try:
        P = np.linalg.solve(GR, R.T @ Rs)
        guesses.append(np.linalg.inv(P).T)
    except np.linalg.LinAlgError:
        pass
    return guesses


def _newton_polish(Q, hq, h, grad, steps: int = 20):
    """Newton iterations on grad h = 0 with a finite-difference Hessian.

    Accepts a step when the gradient shrinks and h does not grow beyond
    rounding, which lets the solver finish once h itself has flattened out.
    """
    r = Q.shape[0]
    G = grad(Q)
    gn = np.linalg.norm(G)
    for _ in range(steps):
        eps = 1e-6 * max(1.0, np.linalg.norm(Q))
        H = np.empty((r * r, r * r))
        for k in range(r * r):
            E = np.zeros(r * r)
            E[k] = eps
            E = E.reshape(r, r)
            H[:, k] = ((grad(Q + E) - grad(Q - E)) / (2 * eps)).ravel()
        H = (H + H.T) / 2
        try:
            step = np.linalg.solve(H, -G.ravel()).reshape(r, r)
        except np.linalg.LinAlgError:
            break
        Qn = Q + step
        hn = h(Qn)
        if not np.isfinite(hn) or hn > hq + 64 * np.finfo(float).eps * max(hq, 1.0):
            break
        Gn = grad(Qn)
        gnn = np.linalg.norm(Gn)
        if gnn >= gn:
            break
        Q, hq, G, gn = Qn, hn, Gn, gnn
    return Q, hq, float(gn)


def align(F, gt, Q0=None, scaled: bool = True, max_iter: int = 200, gtol: float = 1e-9) -> Alignment:
    """Locally optimal alignment ``Q`` between ``F`` and the planted factors."""
    L, R = np.asarray(F.L, float), np.asarray(F.R, float)
    Ls, Rs = gt.Lstar, gt.Rstar
    if L.shape != Ls.shape or R.shape != Rs.shape:
        raise ValueError(f"factor shapes {L.shape}, {R.shape} do not match truth {Ls.shape}, {Rs.shape}")
    d = _weights(gt, scaled)
    r = L.shape[1]

    def h(Q):
        try:
            if np.linalg.cond(Q) > 1e12:
                return np.inf
            E1, E2, _ = _residuals(Q, L, R, Ls, Rs, d)
        except np.linalg.LinAlgError:
            return np.inf
        return float(np.sum(E1 ** 2) + np.sum(E2 ** 2))

    starts = _initial_guesses(L, R, Ls, Rs)
    if Q0 is not None:
        starts.append(np.asarray(Q0, float))
    vals = [h(Q) for Q in starts]
    best = int(np.argmin(vals))
    Q, hq = starts[best], vals[best]
    if not np.isfinite(hq):
        return Alignment(np.eye(r), h(np.eye(r)), False, np.inf)

    mu = 1e-3
    gnorm = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        E1, E2, P = _residuals(Q, L, R, Ls, Rs, d)
        res = np.concatenate([E1.ravel(), E2.ravel()])
        J = _jacobian(L, R, P, d)
        g = J.T @ res
        gnorm = 2 * np.linalg.norm(g)
        if gnorm <= gtol * (1 + hq):
            converged = True
            break
        H = J.T @ J
        damp = np.diag(np.diag(H)) + 1e-12 * np.trace(H) / r * np.eye(r * r)
        improved = False
        for _ in range(30):
            try:
                step = np.linalg.solve(H + mu * damp, -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            Qn = Q + step.reshape(r, r)
            hn = h(Qn)
            if hn < hq:
                Q, hq = Qn, hn
                mu = max(mu / 3, 1e-12)
                improved = True
                break
            mu *= 4
        if not improved:
            # h no longer resolves progress; polish on the gradient instead
            Q, hq, gnorm = _newton_polish(Q, hq, h, lambda Z: alignment_gradient(Z, F, gt, scaled))
            converged = gnorm <= gtol * (1 + hq)
            break
    else:
        E1, E2, P = _residuals(Q, L, R, Ls, Rs, d)
        gnorm = 2 * np.linalg.norm(_jacobian(L, R, P, d).T @ np.concatenate([E1.ravel(), E2.ravel()]))
        converged = gnorm <= gtol * (1 + hq)
    return Alignment(Q, hq, converged, float(gnorm), it)


def dist(F, gt, Q0=None) -> float:
    return float(np.sqrt(max(align(F, gt, Q0=Q0).objective, 0.0)))


def dist_unscaled(F, gt) -> float:
    """The unweighted factor distance; diagnostic only."""
    return float(np.sqrt(max(align(F, gt, scaled=False).objective, 0.0)))


def relative_error(X, Xstar) -> float:
    X = np.asarray(X, float)
    Xstar = np.asarray(Xstar, float)
    if X.shape != Xstar.shape:
        raise ValueError("shape mismatch")
    return float(np.linalg.norm(X - Xstar) / np.linalg.norm(Xstar))


def iters_to_tol(trace, tol: float):
    """First iteration whose relative error is at most ``tol``, else None."""
    rows = trace.rows if hasattr(trace, "rows") else trace
    if not rows:
        raise ValueError("empty trace")
    for row in rows:
        if row.rel_err <= tol:
            return row.iter
    return None
