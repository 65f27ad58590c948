"""Dense box-constrained quadratic programming by primal active sets.

Solves ``min 0.5 z'Az - b'z  s.t.  lo <= z <= hi`` for symmetric positive
definite ``A``.  Problems here are tiny (one variable per placebo cell), so a
plain dense active-set iteration is exact and far cheaper than a general
solver; scipy's bounded least-squares is used as an oracle in the test suite.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalError

_FREE, _AT_LO, _AT_HI = 0, -1, 1


def box_qp(
    A: np.ndarray,
    b: np.ndarray,
    lo: np.ndarray | float,
    hi: np.ndarray | float,
    tol: float = 1e-11,
) -> np.ndarray:
    """Minimize ``0.5 z'Az - b'z`` over the box ``[lo, hi]``.

    Parameters
    ----------
    A : ndarray, shape (k, k)
        Symmetric positive definite Hessian.
    b : ndarray, shape (k,)
        Linear term.
    lo, hi : float or ndarray
        Box bounds (broadcast to length k).

    Returns
    -------
    ndarray
        The unique minimizer.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    k = b.size
    if k == 0:
        return np.empty(0)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (k,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (k,)).copy()
    if np.any(lo > hi):
        raise NumericalError("empty box: lo > hi")

    scale = max(float(np.abs(b).max(initial=0.0)), float(np.abs(np.diag(A)).max()), 1.0)
    gtol = tol * scale

    z = np.clip(np.linalg.solve(A, b), lo, hi)
    state = np.full(k, _FREE, dtype=np.int8)
    state[z <= lo] = _AT_LO
    state[z >= hi] = _AT_HI
    z[state == _AT_LO] = lo[state == _AT_LO]
    z[state == _AT_HI] = hi[state == _AT_HI]

    for _ in range(50 * k + 20):
        free = np.flatnonzero(state == _FREE)
        cand = z.copy()
        if free.size:
            fixed = np.flatnonzero(state != _FREE)
            rhs = b[free]
            if fixed.size:
                rhs = rhs - A[np.ix_(free, fixed)] @ z[fixed]
            cand[free] = np.linalg.solve(A[np.ix_(free, free)], rhs)

        over = cand[free] > hi[free] + gtol if free.size else np.zeros(0, bool)
        under = cand[free] < lo[free] - gtol if free.size else np.zeros(0, bool)
        if free.size and (over.any() or under.any()):
            # Step from z toward the free-subproblem optimum until a bound blocks.
            d = cand - z
            t_best, j_best, bound_best = 1.0, -1, _FREE
            for j in free:
                if d[j] > gtol:
                    t = (hi[j] - z[j]) / d[j]
                    bnd = _AT_HI
                elif d[j] < -gtol:
                    t = (lo[j] - z[j]) / d[j]
                    bnd = _AT_LO
                else:
                    continue
                if t < t_best:
                    t_best, j_best, bound_best = t, j, bnd
            z = z + max(t_best, 0.0) * d
            if j_best >= 0:
                state[j_best] = bound_best
                z[j_best] = hi[j_best] if bound_best == _AT_HI else lo[j_best]
            z = np.clip(z, lo, hi)
            continue

        z = np.clip(cand, lo, hi)
        g = A @ z - b
        worst_j, worst_v = -1, gtol
        for j in np.flatnonzero(state != _FREE):
            v = g[j] if state[j] == _AT_HI else -g[j]
            # At a bound the gradient must push outward; otherwise release.
            if v > worst_v:
                worst_j, worst_v = j, v
        if worst_j < 0:
            return z
        state[worst_j] = _FREE

    raise NumericalError("box QP active-set iteration failed to converge")
