"""Pure-NumPy reference implementation of the hot kernels.

Candidates are given in CSR layout: sample ``s`` owns the slice
``indptr[s]:indptr[s+1]`` and candidates within a sample are pre-sorted by
selection priority (logit descending, class index ascending). A candidate
passes the gates iff ``sigma >= tau`` and ``margin <= delta``; the selected
candidate is the first passing one.

All outputs are integer-valued, so the reference and compiled backends
agree bit for bit.
"""

from __future__ import annotations

import numpy as np


def flip_targets(
    indptr: np.ndarray,
    cand_sigma: np.ndarray,
    cand_margin: np.ndarray,
    tau: float,
    delta: float,
) -> np.ndarray:
    """Per-sample nnz index of the selected candidate, or -1 when none passes."""
    n = indptr.shape[0] - 1
    nnz = int(indptr[-1])
    out = np.full(n, -1, dtype=np.int64)
    if nnz == 0:
        return out
    passing = (cand_sigma >= tau) & (cand_margin <= delta)
    pos = np.where(passing, np.arange(nnz, dtype=np.int64), np.int64(nnz))
    lengths = np.diff(indptr)
    nonempty = lengths > 0
    starts = indptr[:-1][nonempty]
    firsts = np.minimum.reduceat(pos, starts)
    found = firsts < indptr[1:][nonempty]
    res = np.full(nonempty.sum(), -1, dtype=np.int64)
    res[found] = firsts[found]
    out[nonempty] = res
    return out


def grid_flip_diffs(
    indptr: np.ndarray,
    cand_sigma: np.ndarray,
    cand_margin: np.ndarray,
    fix_flag: np.ndarray,
    brk_flag: np.ndarray,
    tau_grid: np.ndarray,
    delta_grid: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column-difference arrays of flip/fix/break counts over the gate grid.

    Cell (a, b) of the cumulative result counts samples whose selected
    candidate under gates (tau_grid[a], delta_grid[b]) exists / fixes a
    wrong prediction / breaks a correct one. Returned arrays have an extra
    sentinel column; accumulate with ``cumsum(axis=1)[:, :-1]``.
    """
    n_tau = tau_grid.shape[0]
    n_delta = delta_grid.shape[0]
    shape = (n_tau, n_delta + 1)
    d_flip = np.zeros(shape, dtype=np.int64)
    d_fix = np.zeros(shape, dtype=np.int64)
    d_brk = np.zeros(shape, dtype=np.int64)

    # Per candidate: tau columns [0, A) pass, delta rows [B, n_delta) pass.
    cand_a = np.searchsorted(tau_grid, cand_sigma, side="right")
    cand_b = np.searchsorted(delta_grid, cand_margin, side="left")

    n = indptr.shape[0] - 1
    for s in range(n):
        lo, hi = int(indptr[s]), int(indptr[s + 1])
        if lo == hi:
            continue
        cover = np.full(n_tau, n_delta, dtype=np.int64)
        for c in range(lo, hi):
            a = int(cand_a[c])
            b = int(cand_b[c])
            if a == 0 or b >= n_delta:
                continue
            seg = cover[:a]
            mask = seg > b
            if not mask.any():
                continue
            cols = np.nonzero(mask)[0]
            olds = seg[mask].copy()
            d_flip[cols, b] += 1
            d_flip[cols, olds] -= 1
            if fix_flag[c]:
                d_fix[cols, b] += 1
                d_fix[cols, olds] -= 1
            if brk_flag[c]:
                d_brk[cols, b] += 1
                d_brk[cols, olds] -= 1
            seg[mask] = b
    return d_flip, d_fix, d_brk
