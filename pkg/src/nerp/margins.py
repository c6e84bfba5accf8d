"""Sample-level logit margins, their domain statistics, and the global intercept.

The margin of an ordered pair is the difference of cosine logits; its
domain mean and variance are estimated unconditionally over all provided
samples. The intercept is the scalar least-squares fit of mean-margin
minus composite-gap residuals over a set of base-class pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from nerp.errors import ValidationError
from nerp.graph import ConfusionGraph
from nerp.priors import PairGapTable

EXPLICIT = "explicit"
FOLDED = "folded_into_gate"


@dataclass(frozen=True)
class MarginStats:
    """Empirical mean/variance of pair margins over a sample set.

    ``mu_hat`` is exactly antisymmetric and ``var_hat`` symmetric under
    pair reversal because each unordered pair is computed once.
    """

    mu_hat: dict[tuple[int, int], float]
    var_hat: dict[tuple[int, int], float]
    n_samples: int


@dataclass(frozen=True)
class InterceptEstimate:
    beta_hat: float
    n_pairs_used: int
    mode: str = EXPLICIT

    def __post_init__(self) -> None:
        if self.mode not in (EXPLICIT, FOLDED):
            raise ValidationError(f"unknown intercept mode {self.mode!r}")
        if self.mode == FOLDED and self.beta_hat != 0.0:
            raise ValidationError("folded intercept must carry beta_hat = 0")

    @classmethod
    def folded(cls) -> "InterceptEstimate":
        return cls(beta_hat=0.0, n_pairs_used=0, mode=FOLDED)


def sample_margin(feature: np.ndarray, prototypes_ft: np.ndarray, i: int, j: int) -> float:
    """Cosine logit difference of classes i and j for one sample."""
    if i == j:
        raise ValidationError("margin requires two distinct classes")
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[0] != prototypes_ft.shape[1]:
        raise ValidationError("feature/prototype dimension mismatch")
    return float(feature @ (prototypes_ft[i] - prototypes_ft[j]))


def estimate_margin_stats(
    features: np.ndarray,
    prototypes_ft: np.ndarray,
    graph: ConfusionGraph,
    pair_filter: Iterable[tuple[int, int]] | None = None,
) -> MarginStats:
    """Unconditional margin mean/variance per graph edge (unbiased variance).

    ``pair_filter`` restricts the computed edges; orientation of filter
    entries is ignored.
    """
    n = features.shape[0]
    if n < 2:
        raise ValidationError("margin statistics require at least 2 samples")
    logits = np.asarray(features, dtype=np.float64) @ np.asarray(prototypes_ft, dtype=np.float64).T

    wanted = None
    if pair_filter is not None:
        wanted = {(min(i, j), max(i, j)) for i, j in pair_filter}

    mu: dict[tuple[int, int], float] = {}
    var: dict[tuple[int, int], float] = {}
    for i, j in graph.edges():
        if wanted is not None and (i, j) not in wanted:
            continue
        m = logits[:, i] - logits[:, j]
        mean = float(np.mean(m))
        v = float(np.var(m, ddof=1))
        mu[(i, j)] = mean
        mu[(j, i)] = -mean
        var[(i, j)] = v
        var[(j, i)] = v
    return MarginStats(mu_hat=mu, var_hat=var, n_samples=n)


def fit_intercept(
    stats: MarginStats,
    gaps: PairGapTable,
    base_pairs: Iterable[tuple[int, int]],
) -> InterceptEstimate:
    """Scalar least-squares intercept over ordered base pairs.

    The quadratic objective sum((mu_hat - gap - beta)^2) is minimized by
    the mean residual. An empty pair set is an error; callers without base
    pairs should use ``InterceptEstimate.folded()`` instead.
    """
    residuals = []
    for pair in base_pairs:
        pair = (int(pair[0]), int(pair[1]))
        if pair not in stats.mu_hat:
            raise ValidationError(f"pair {pair} missing from margin statistics")
        if pair not in gaps.gaps:
            raise ValidationError(f"pair {pair} missing from the gap table")
        residuals.append(stats.mu_hat[pair] - gaps.gaps[pair])
    if not residuals:
        raise ValidationError(
            "fit_intercept needs at least one base pair; use InterceptEstimate.folded()"
        )
    return InterceptEstimate(beta_hat=float(np.mean(residuals)), n_pairs_used=len(residuals))
