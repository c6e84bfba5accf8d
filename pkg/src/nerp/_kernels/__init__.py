"""Hot-kernel backend selection.

The compiled Cython module is preferred when importable; the pure-NumPy
reference is used otherwise. Set ``NERP_BACKEND=python`` (or ``cython``)
to force a backend. Both backends return identical integer outputs, so
results never depend on the selection.
"""

from __future__ import annotations

import os

import numpy as np

from nerp._kernels import _reference

_requested = os.environ.get("NERP_BACKEND", "").strip().lower()

if _requested in ("python", "py", "reference"):
    _impl = _reference
    BACKEND = "python"
elif _requested in ("cython", "c", "compiled"):
    from nerp._kernels import _fastpath as _impl  # raises if not built

    BACKEND = "cython"
else:
    try:
        from nerp._kernels import _fastpath as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _reference
        BACKEND = "python"


def _as_csr(indptr, cand_sigma, cand_margin):
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    sigma = np.ascontiguousarray(cand_sigma, dtype=np.float64)
    margin = np.ascontiguousarray(cand_margin, dtype=np.float64)
    if indptr.ndim != 1 or indptr[0] != 0 or int(indptr[-1]) != sigma.shape[0]:
        raise ValueError("malformed CSR indptr")
    if sigma.shape != margin.shape:
        raise ValueError("sigma/margin length mismatch")
    return indptr, sigma, margin


def flip_targets(indptr, cand_sigma, cand_margin, tau: float, delta: float) -> np.ndarray:
    """nnz index of the first candidate passing both gates per sample (-1: none)."""
    indptr, sigma, margin = _as_csr(indptr, cand_sigma, cand_margin)
    return _impl.flip_targets(indptr, sigma, margin, float(tau), float(delta))


def grid_flip_counts(
    indptr,
    cand_sigma,
    cand_margin,
    fix_flag,
    brk_flag,
    tau_grid,
    delta_grid,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts of (flips, fixes, breaks) for every cell of the gate grid.

    Grids must be strictly ascending. Cell (a, b) corresponds to gates
    ``tau_grid[a]``, ``delta_grid[b]``.
    """
    indptr, sigma, margin = _as_csr(indptr, cand_sigma, cand_margin)
    fix_flag = np.ascontiguousarray(fix_flag, dtype=np.uint8)
    brk_flag = np.ascontiguousarray(brk_flag, dtype=np.uint8)
    tau_grid = np.ascontiguousarray(tau_grid, dtype=np.float64)
    delta_grid = np.ascontiguousarray(delta_grid, dtype=np.float64)
    for grid, name in ((tau_grid, "tau"), (delta_grid, "delta")):
        if grid.size == 0 or (grid.size > 1 and not np.all(np.diff(grid) > 0)):
            raise ValueError(f"{name} grid must be nonempty and strictly ascending")
    d_flip, d_fix, d_brk = _impl.grid_flip_diffs(
        indptr, sigma, margin, fix_flag, brk_flag, tau_grid, delta_grid
    )
    flips = np.cumsum(d_flip, axis=1)[:, :-1]
    fixes = np.cumsum(d_fix, axis=1)[:, :-1]
    breaks = np.cumsum(d_brk, axis=1)[:, :-1]
    return flips, fixes, breaks
