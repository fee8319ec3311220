"""Dense two-phase tableau simplex for small/medium LPs in standard form

    min c.x   s.t.  A x = b,  x >= 0.

Deterministic pivoting: Dantzig entering (most negative reduced cost,
lowest index on ties) and a lexicographic ratio test for the leaving row,
which resolves the heavy degeneracy of minimax-type problems and
guarantees termination.  A starting basis is crashed from positive
singleton columns (slacks), so artificial variables are only introduced
for rows without one.  Intended for problems up to a few thousand
variables; larger workloads should use a production LP backend.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_PIV_TOL = 1e-9
_COST_TOL = 1e-9


@dataclass
class LpResult:
    status: str  # optimal | infeasible | unbounded | max_iterations
    x: np.ndarray | None
    objective: float | None
    iterations: int


def _pivot(tab: np.ndarray, basis: list[int], row: int, col: int) -> None:
    tab[row] /= tab[row, col]
    piv_row = tab[row]
    coeffs = tab[:, col].copy()
    coeffs[row] = 0.0
    tab -= np.outer(coeffs, piv_row)
    tab[:, col] = 0.0
    tab[row, col] = 1.0
    basis[row] = col


def _choose_entering(costs: np.ndarray, allowed: int) -> int | None:
    r = costs[:allowed]
    j = int(np.argmin(r))
    return j if r[j] < -_COST_TOL else None


def _choose_leaving(
    tab: np.ndarray, m: int, col: int, key_cols: np.ndarray
) -> int | None:
    column = tab[:m, col]
    rhs = tab[:m, -1]
    mask = column > _PIV_TOL
    if not mask.any():
        return None
    ratios = np.full(m, np.inf)
    ratios[mask] = rhs[mask] / column[mask]
    best = ratios.min()
    ties = np.nonzero(ratios <= best + _PIV_TOL * (1.0 + abs(best)))[0]
    if ties.size == 1:
        return int(ties[0])
    # lexicographic tie-break over (rhs, columns of the initial basis),
    # each candidate row scaled by its pivot entry
    keys = tab[np.ix_(ties, key_cols)] / column[ties, None]
    order = np.lexsort(keys.T[::-1])
    return int(ties[order[0]])


def _choose_leaving_fast(
    tab: np.ndarray, basis: list[int], m: int, col: int
) -> int | None:
    column = tab[:m, col]
    rhs = tab[:m, -1]
    mask = column > _PIV_TOL
    if not mask.any():
        return None
    ratios = np.full(m, np.inf)
    ratios[mask] = rhs[mask] / column[mask]
    best = ratios.min()
    ties = np.nonzero(ratios <= best + _PIV_TOL * (1.0 + abs(best)))[0]
    return int(min(ties, key=lambda i: basis[i]))


_STALL_LIMIT = 100


def _run(
    tab: np.ndarray,
    basis: list[int],
    m: int,
    cost_row: int,
    allowed: int,
    key_cols: np.ndarray,
    max_iter: int,
    lex: bool = False,
) -> tuple[str, int]:
    stall = 0
    last_obj = tab[cost_row, -1]
    for it in range(max_iter):
        col = _choose_entering(tab[cost_row], allowed)
        if col is None:
            return "optimal", it
        if lex:
            row = _choose_leaving(tab, m, col, key_cols)
        else:
            row = _choose_leaving_fast(tab, basis, m, col)
        if row is None:
            return "unbounded", it
        _pivot(tab, basis, row, col)
        obj = tab[cost_row, -1]
        if obj > last_obj + 1e-12 * (1.0 + abs(last_obj)):
            stall = 0
            last_obj = obj
        elif not lex:
            stall += 1
            if stall >= _STALL_LIMIT:
                lex = True
    return "max_iterations", max_iter


def solve_lp(
    c: np.ndarray,
    a_eq: np.ndarray,
    b_eq: np.ndarray,
    max_iter: int | None = None,
    lex: bool = False,
) -> LpResult:
    c = np.asarray(c, dtype=float)
    a = np.array(a_eq, dtype=float)
    b = np.array(b_eq, dtype=float)
    m, n = a.shape
    if c.shape != (n,) or b.shape != (m,):
        raise ValueError("inconsistent LP dimensions")
    if max_iter is None:
        max_iter = 500 * (m + n) + 2000

    neg = b < 0
    a[neg] *= -1.0
    b[neg] *= -1.0

    # crash a starting basis out of positive singleton columns
    crash = np.full(m, -1, dtype=int)
    col_nnz = (np.abs(a) > _PIV_TOL).sum(axis=0)
    for j in np.nonzero(col_nnz == 1)[0]:
        i = int(np.argmax(np.abs(a[:, j])))
        if crash[i] == -1 and a[i, j] > _PIV_TOL:
            crash[i] = j
    art_rows = [i for i in range(m) if crash[i] == -1]
    n_art = len(art_rows)

    # columns: [original n | artificial n_art | rhs]; rows: m constraints,
    # then the phase-1 and phase-2 reduced-cost rows (rhs = -objective)
    tab = np.zeros((m + 2, n + n_art + 1))
    tab[:m, :n] = a
    tab[:m, -1] = b
    tab[m + 1, :n] = c
    basis = [0] * m
    for k, i in enumerate(art_rows):
        tab[i, n + k] = 1.0
        basis[i] = n + k
    for i in range(m):
        if crash[i] != -1:
            j = int(crash[i])
            tab[i] /= tab[i, j]
            basis[i] = j
            tab[m + 1] -= tab[m + 1, j] * tab[i]
    if art_rows:
        tab[m, : n + n_art] = -tab[art_rows, : n + n_art].sum(axis=0)
        tab[m, n : n + n_art] = 0.0
        tab[m, -1] = -tab[art_rows, -1].sum()

    # columns of the initial basis track B^{-1} through pivots; together
    # with the rhs they form the lexicographic key
    key_cols = np.concatenate([[n + n_art], np.array(basis, dtype=int)])

    it1 = 0
    if art_rows:
        status, it1 = _run(
            tab, basis, m, cost_row=m, allowed=n, key_cols=key_cols,
            max_iter=max_iter, lex=lex,
        )
        if status == "max_iterations":
            return LpResult("max_iterations", None, None, it1)
        if status == "unbounded":
            raise RuntimeError(
                "phase-1 subproblem reported unbounded; numerical breakdown"
            )
        if -tab[m, -1] > 1e-7 * (1.0 + abs(b).max()):
            return LpResult("infeasible", None, None, it1)

    # drive leftover artificials out of the basis; rows where that is
    # impossible are linearly dependent and get dropped
    if any(bi >= n for bi in basis):
        drop: list[int] = []
        for i in range(m):
            if basis[i] >= n:
                cols = np.nonzero(np.abs(tab[i, :n]) > _PIV_TOL)[0]
                if cols.size:
                    _pivot(tab, basis, i, int(cols[0]))
                else:
                    drop.append(i)
        if drop:
            keep = [i for i in range(m) if i not in drop]
            tab = np.vstack([tab[keep], tab[m:]])
            basis = [basis[i] for i in keep]
            m = len(keep)

    # artificial columns stay allocated but are never allowed to enter
    phase2 = np.vstack([tab[:m], tab[m + 1 : m + 2]])
    status, it2 = _run(
        phase2, basis, m, cost_row=m, allowed=n, key_cols=key_cols,
        max_iter=max_iter, lex=lex,
    )
    x = np.zeros(n)
    for i, bi in enumerate(basis):
        if bi < n:
            x[bi] = phase2[i, -1]
    if status != "optimal":
        return LpResult(
            status, x if status == "max_iterations" else None, None, it1 + it2
        )
    return LpResult("optimal", x, float(c @ x), it1 + it2)
