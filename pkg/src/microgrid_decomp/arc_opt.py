"""Arc subproblems: quadratic transport costs under prices or resources."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RESOURCE_TOL = 1e-9


class ResourceInfeasible(ValueError):
    """Resource vector is not balanced, so no flow satisfies ``C q = -r``."""


@dataclass
class ArcSolution:
    q: np.ndarray               # (T, A)
    stage_values: np.ndarray    # (T,)
    xi: np.ndarray | None = None  # (T, N), resource case only

    @property
    def value(self) -> float:
        return float(self.stage_values.sum())


def arc_cost(q, c2, c1, c0):
    q = np.asarray(q, dtype=float)
    return c2 * q * q + c1 * q + c0


def solve_arc_price(c2, c1, c0, p, C) -> ArcSolution:
    """Minimize ``l(q) + (C^T p) q`` arc by arc and stage by stage.

    Parameters
    ----------
    c2, c1, c0 : array_like, shape (T, A) or (A,)
    p : array_like, shape (T, N)
    C : ndarray, shape (N, A)
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    c2 = np.broadcast_to(c2, (p.shape[0], C.shape[1]))
    c1 = np.broadcast_to(c1, c2.shape)
    c0 = np.broadcast_to(c0, c2.shape)
    g = p @ C
    q = -(c1 + g) / (2.0 * c2)
    vals = (arc_cost(q, c2, c1, c0) + g * q).sum(axis=1)
    return ArcSolution(q, vals)


def _kkt_matrix(c2_row, C):
    N, A = C.shape
    K = np.zeros((A + N + 1, A + N + 1))
    K[:A, :A] = np.diag(2.0 * c2_row)
    K[:A, A:A + N] = C.T
    K[A:A + N, :A] = C
    K[A:A + N, A + N] = 1.0
    K[A + N, A:A + N] = 1.0
    return K


def solve_arc_resource(c2, c1, c0, r, C, tol: float = RESOURCE_TOL) -> ArcSolution:
    """Cheapest flows delivering the node exports ``r``: ``C q = -r``.

    The bordered system ``[[2D, C^T, 0], [C, 0, 1], [0, 1^T, 0]]`` is
    nonsingular for a connected graph; the border fixes the gauge of the
    node multipliers ``xi`` to zero sum.  ``xi`` is the gradient of the
    optimal arc cost with respect to ``r``.
    """
    r = np.atleast_2d(np.asarray(r, dtype=float))
    T, N = r.shape
    A = C.shape[1]
    c2 = np.broadcast_to(c2, (T, A))
    c1 = np.broadcast_to(c1, (T, A))
    c0 = np.broadcast_to(c0, (T, A))
    imbalance = np.abs(r.sum(axis=1))
    scale = max(1.0, float(np.abs(r).max()))
    if np.any(imbalance > tol * scale * N):
        t = int(np.argmax(imbalance))
        raise ResourceInfeasible(f"stage {t}: resources sum to {r[t].sum():.3e}, not in im(C)")
    q = np.empty((T, A))
    xi = np.empty((T, N))
    # stages sharing the quadratic coefficients share one factorization
    _, first, inv = np.unique(c2, axis=0, return_index=True, return_inverse=True)
    inv = inv.ravel()
    for g, t0 in enumerate(first):
        rows = np.flatnonzero(inv == g)
        K = _kkt_matrix(c2[t0], C)
        rhs = np.zeros((A + N + 1, len(rows)))
        rhs[:A] = -c1[rows].T
        rhs[A:A + N] = -r[rows].T
        sol = np.linalg.solve(K, rhs)
        q[rows] = sol[:A].T
        xi[rows] = sol[A:A + N].T
    vals = arc_cost(q, c2, c1, c0).sum(axis=1)
    return ArcSolution(q, vals, xi)
