"""Least squares via column-pivoted QR with explicit rank checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import RankDeficiencyError


@dataclass
class LstsqResult:
    coef: np.ndarray
    fitted: np.ndarray
    cond: float
    rank: int


def _factor(X: np.ndarray, names, what: str):
    n, p = X.shape
    if n < p:
        raise RankDeficiencyError(f"{what}: {n} rows for {p} columns")
    Q, R, piv = sla.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(n, p) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < p:
        names = list(names) if names is not None else [f"x{j}" for j in range(p)]
        R11 = R[:rank, :rank]
        indep = piv[:rank]
        collinear = []
        for k in range(rank, p):
            b = sla.solve_triangular(R11, R[:rank, k]) if rank else np.zeros(0)
            scale = np.abs(b).max() if b.size else 0.0
            partners = [names[indep[i]] for i in np.flatnonzero(np.abs(b) > 1e-8 * max(scale, 1.0))]
            if not partners and np.linalg.norm(X[:, piv[k]]) <= tol:
                partners = ["<zero column>"]
            collinear.append((names[piv[k]], sorted(partners)))
        desc = "; ".join(f"{c} ~ {', '.join(p) or 'other columns'}" for c, p in collinear)
        raise RankDeficiencyError(f"{what} is rank deficient (rank {rank} < {p}): {desc}", collinear)
    sv = np.linalg.svd(R, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv.size else 1.0
    return Q, R, piv, cond


def lstsq(X, y, names=None, what="design matrix") -> LstsqResult:
    """Solve ``min ||y - X b||`` for full-column-rank ``X``.

    Raises :class:`RankDeficiencyError` naming each dependent column and the
    columns it is a combination of.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Q, R, piv, cond = _factor(X, names, what)
    qty = Q.T @ y
    b = sla.solve_triangular(R, qty)
    coef = np.empty_like(b)
    coef[piv] = b
    return LstsqResult(coef, Q @ qty, cond, X.shape[1])


def project(Z, Y, names=None, what="instrument matrix") -> np.ndarray:
    """Fitted values of the columns of ``Y`` regressed on ``Z``."""
    Z = np.asarray(Z, dtype=np.float64)
    Q, _, _, _ = _factor(Z, names, what)
    return Q @ (Q.T @ np.asarray(Y, dtype=np.float64))
