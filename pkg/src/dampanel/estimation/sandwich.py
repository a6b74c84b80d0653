"""Numerical Jacobians and the M-estimation sandwich."""

from __future__ import annotations

import numpy as np

from ..errors import SingularityError


def default_steps(x, rel_step=1e-5, floor=1e-2):
    return rel_step * np.maximum(np.abs(np.asarray(x, dtype=float)), floor)


def numerical_jacobian(fun, x, steps=None, mask=None):
    """Central-difference Jacobian of a vector function ``fun(x)``.

    Columns where ``mask`` is False are left at zero.
    """
    x = np.asarray(x, dtype=float)
    steps = default_steps(x) if steps is None else np.asarray(steps, dtype=float)
    f0 = np.asarray(fun(x), dtype=float)
    J = np.zeros((f0.size, x.size))
    for j in range(x.size):
        if mask is not None and not mask[j]:
            continue
        h = steps[j]
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        J[:, j] = (np.asarray(fun(xp)).ravel() - np.asarray(fun(xm)).ravel()) / (2 * h)
    return J


def cluster_meat(scores: np.ndarray, clusters: np.ndarray | None) -> np.ndarray:
    """``sum_g s_g s_g'`` with ``s_g`` the score sum over cluster ``g``."""
    if clusters is None:
        return scores.T @ scores
    _, inv = np.unique(clusters, return_inverse=True)
    sums = np.zeros((inv.max() + 1, scores.shape[1]))
    np.add.at(sums, inv, scores)
    return sums.T @ sums


def sandwich(row_scores, x, clusters=None, free=None, steps=None) -> np.ndarray:
    """``A^-1 B A^-T / N`` for per-row estimating functions ``row_scores(x) -> (N, p)``.

    ``A`` is minus the numerical Jacobian of the mean estimating function,
    ``B`` the (optionally clustered) mean outer product of scores. Entries
    outside ``free`` get zero variance.
    """
    x = np.asarray(x, dtype=float)
    free = np.ones(x.size, dtype=bool) if free is None else np.asarray(free, dtype=bool)
    S = row_scores(x)
    N = S.shape[0]
    idx = np.flatnonzero(free)
    A = -numerical_jacobian(lambda v: row_scores(v).mean(axis=0), x, steps=steps, mask=free)[np.ix_(idx, idx)]
    B = cluster_meat(S[:, idx], clusters) / N
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("bread matrix is singular; parameters not identified") from exc
    V = Ainv @ B @ Ainv.T / N
    out = np.zeros((x.size, x.size))
    out[np.ix_(idx, idx)] = 0.5 * (V + V.T)
    return out
