"""Backend-parity and correctness tests for the hot kernels.

The compiled and reference backends must agree bit for bit; both must
match a per-cell brute-force evaluation.
"""

import numpy as np
import pytest

import nerp._kernels as kernels
from nerp._kernels import _reference

try:
    from nerp._kernels import _fastpath
except ImportError:
    _fastpath = None

needs_compiled = pytest.mark.skipif(_fastpath is None, reason="compiled backend not built")


def random_csr(rng, n_samples=60, max_k=5):
    indptr = [0]
    for _ in range(n_samples):
        indptr.append(indptr[-1] + int(rng.integers(0, max_k + 1)))
    nnz = indptr[-1]
    return (
        np.array(indptr, dtype=np.int64),
        rng.uniform(-1, 1, nnz),
        rng.uniform(-1, 1, nnz),
        rng.integers(0, 2, nnz).astype(np.uint8),
        rng.integers(0, 2, nnz).astype(np.uint8),
    )


def brute_force_cell(indptr, sigma, margin, fix, brk, tau, delta):
    flips = fixes = breaks = 0
    for s in range(len(indptr) - 1):
        for c in range(indptr[s], indptr[s + 1]):
            if sigma[c] >= tau and margin[c] <= delta:
                flips += 1
                fixes += int(fix[c])
                breaks += int(brk[c])
                break
    return flips, fixes, breaks


class TestReferenceKernels:
    def test_flip_targets_first_passing(self):
        indptr = np.array([0, 3, 3, 5], dtype=np.int64)
        sigma = np.array([0.1, 0.6, 0.7, 0.9, 0.9])
        margin = np.array([0.0, 0.5, 0.0, 0.9, 0.1])
        out = _reference.flip_targets(indptr, sigma, margin, 0.5, 0.2)
        # sample 0: candidate 0 fails sigma, candidate 1 fails margin, candidate 2 passes
        # sample 1: empty; sample 2: candidate 3 fails margin, candidate 4 passes
        np.testing.assert_array_equal(out, [2, -1, 4])

    def test_grid_counts_match_brute_force(self, rng):
        indptr, sigma, margin, fix, brk = random_csr(rng)
        tau_grid = np.sort(rng.uniform(-1, 1, 13))
        delta_grid = np.sort(rng.uniform(-1, 1, 9))
        flips, fixes, breaks = kernels.grid_flip_counts(
            indptr, sigma, margin, fix, brk, tau_grid, delta_grid
        )
        for a in range(len(tau_grid)):
            for b in range(len(delta_grid)):
                expect = brute_force_cell(
                    indptr, sigma, margin, fix, brk, tau_grid[a], delta_grid[b]
                )
                assert (int(flips[a, b]), int(fixes[a, b]), int(breaks[a, b])) == expect

    def test_grid_values_on_cell_boundaries(self, rng):
        # gate comparisons are inclusive; grids hitting exact candidate values
        indptr = np.array([0, 1], dtype=np.int64)
        sigma = np.array([0.5])
        margin = np.array([0.25])
        fix = np.array([1], dtype=np.uint8)
        brk = np.array([0], dtype=np.uint8)
        tau_grid = np.array([0.4, 0.5, 0.6])
        delta_grid = np.array([0.2, 0.25, 0.3])
        flips, fixes, _ = kernels.grid_flip_counts(
            indptr, sigma, margin, fix, brk, tau_grid, delta_grid
        )
        expected = np.array([[0, 1, 1], [0, 1, 1], [0, 0, 0]])
        np.testing.assert_array_equal(flips, expected)
        np.testing.assert_array_equal(fixes, expected)


@needs_compiled
class TestBackendParity:
    def test_flip_targets_identical(self, rng):
        for _ in range(10):
            indptr, sigma, margin, _, _ = random_csr(rng)
            tau, delta = rng.uniform(-1, 1, 2)
            a = _reference.flip_targets(indptr, sigma, margin, tau, delta)
            b = _fastpath.flip_targets(indptr, sigma, margin, tau, delta)
            np.testing.assert_array_equal(a, b)

    def test_grid_diffs_identical(self, rng):
        for _ in range(10):
            indptr, sigma, margin, fix, brk = random_csr(rng)
            tau_grid = np.sort(rng.uniform(-1, 1, int(rng.integers(1, 20))))
            delta_grid = np.sort(rng.uniform(-1, 1, int(rng.integers(1, 20))))
            ra = _reference.grid_flip_diffs(indptr, sigma, margin, fix, brk, tau_grid, delta_grid)
            rb = _fastpath.grid_flip_diffs(indptr, sigma, margin, fix, brk, tau_grid, delta_grid)
            for x, y in zip(ra, rb):
                np.testing.assert_array_equal(np.asarray(x), np.asarray(y))

    def test_grid_with_duplicate_candidate_values(self):
        # repeated sigmas/margins stress the searchsorted boundaries
        indptr = np.array([0, 4], dtype=np.int64)
        sigma = np.array([0.5, 0.5, 0.5, 0.5])
        margin = np.array([0.1, 0.1, 0.2, 0.2])
        fix = np.array([1, 0, 1, 0], dtype=np.uint8)
        brk = np.array([0, 1, 0, 1], dtype=np.uint8)
        tau_grid = np.array([0.5])
        delta_grid = np.array([0.05, 0.1, 0.2])
        ra = _reference.grid_flip_diffs(indptr, sigma, margin, fix, brk, tau_grid, delta_grid)
        rb = _fastpath.grid_flip_diffs(indptr, sigma, margin, fix, brk, tau_grid, delta_grid)
        for x, y in zip(ra, rb):
            np.testing.assert_array_equal(np.asarray(x), np.asarray(y))


class TestDispatcher:
    def test_backend_name_is_reported(self):
        assert kernels.BACKEND in ("cython", "python")

    def test_malformed_indptr_rejected(self):
        with pytest.raises(ValueError, match="indptr"):
            kernels.flip_targets(np.array([1, 2], dtype=np.int64), np.zeros(1), np.zeros(1), 0, 0)

    def test_unsorted_grid_rejected(self, rng):
        indptr, sigma, margin, fix, brk = random_csr(rng, n_samples=3)
        with pytest.raises(ValueError, match="ascending"):
            kernels.grid_flip_counts(
                indptr, sigma, margin, fix, brk, np.array([0.2, 0.1]), np.array([0.0])
            )
