"""Target-emulated gate calibration.

Folds are carved out of the base classes; each fold's pseudo-target
(samples of the held-out classes) stands in for the unseen target data.
An exhaustive grid search over (tau_eff, delta) maximizes the aggregated
objective across folds, with a deterministic tie-break chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from nerp import _kernels
from nerp.corrector import GateConfig, build_candidates
from nerp.embedding_store import DatasetSplit, DomainBundle
from nerp.errors import ValidationError
from nerp.graph import ConfusionGraph
from nerp.priors import PairGapTable

NET_CORRECT_FLIPS = "net_correct_flips"
COVERAGE_UNDER_FER_CAP = "coverage_under_fer_cap"

BASE_TO_NOVEL = "base_to_novel"
HALF_SPLIT = "half_split"


@dataclass(frozen=True)
class GridSpec:
    lo: float
    hi: float
    step: float

    def __post_init__(self) -> None:
        if not self.step > 0:
            raise ValidationError("grid step must be positive")
        if not self.lo < self.hi:
            raise ValidationError("grid min must be below grid max")

    def points(self) -> np.ndarray:
        n = int(np.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        return self.lo + self.step * np.arange(n)

    @classmethod
    def from_string(cls, text: str) -> "GridSpec":
        parts = text.split(",")
        if len(parts) != 3:
            raise ValidationError(f"grid spec {text!r} is not of the form min,max,step")
        lo, hi, step = (float(p) for p in parts)
        return cls(lo, hi, step)


@dataclass(frozen=True)
class CalibrationConfig:
    n_folds: int
    grid_tau: GridSpec
    grid_delta: GridSpec
    objective: str = NET_CORRECT_FLIPS
    fer_cap: float | None = None
    mode: str = BASE_TO_NOVEL
    seed: int = 0
    epsilon0: float = 1e-4

    def __post_init__(self) -> None:
        if self.n_folds < 2:
            raise ValidationError("calibration requires at least 2 folds")
        if self.objective not in (NET_CORRECT_FLIPS, COVERAGE_UNDER_FER_CAP):
            raise ValidationError(f"unknown objective {self.objective!r}")
        if self.objective == COVERAGE_UNDER_FER_CAP and self.fer_cap is None:
            raise ValidationError("coverage objective needs fer_cap")
        if self.mode not in (BASE_TO_NOVEL, HALF_SPLIT):
            raise ValidationError(f"unknown calibration mode {self.mode!r}")


@dataclass(frozen=True)
class FoldMetrics:
    fold_id: int
    accuracy_gain: float
    flips: int
    fer: float


@dataclass(frozen=True)
class CalibrationReport:
    best_tau_eff: float
    best_delta: float
    per_fold: tuple[FoldMetrics, ...]
    tau_grid: np.ndarray
    delta_grid: np.ndarray
    objective_surface: np.ndarray  # (n_tau, n_delta) aggregated objective
    objective: str

    def best_gates(self, epsilon0: float = 1e-4) -> GateConfig:
        return GateConfig(tau_eff=self.best_tau_eff, delta=self.best_delta, epsilon0=epsilon0)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "best_tau_eff": self.best_tau_eff,
            "best_delta": self.best_delta,
            "objective": self.objective,
            "per_fold": [
                {
                    "fold_id": m.fold_id,
                    "accuracy_gain": m.accuracy_gain,
                    "flips": m.flips,
                    "fer": m.fer,
                }
                for m in self.per_fold
            ],
            "grid_surface": {
                "tau": self.tau_grid.tolist(),
                "delta": self.delta_grid.tolist(),
                "objective": self.objective_surface.tolist(),
            },
        }


def partition_folds(base_classes, n_folds: int, seed: int) -> list[tuple[int, ...]]:
    """Disjoint, covering, balanced (sizes differ by <= 1), seed-deterministic."""
    classes = sorted(int(c) for c in base_classes)
    if n_folds > len(classes):
        raise ValidationError(f"cannot split {len(classes)} classes into {n_folds} folds")
    if n_folds < 1:
        raise ValidationError("n_folds must be positive")
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(np.array(classes, dtype=np.int64))
    return [tuple(int(c) for c in part) for part in np.array_split(shuffled, n_folds)]


def make_pseudo_split(
    bundle: DomainBundle,
    split: DatasetSplit,
    fold,
    mode: str = BASE_TO_NOVEL,
) -> tuple[DomainBundle, DomainBundle]:
    """Slice a labeled bundle into (pseudo_train, pseudo_target) views.

    In ``base_to_novel`` mode the pseudo-target holds exactly the samples
    labeled in the fold and the pseudo-train the remaining base-class
    samples. In ``half_split`` mode the class list is halved, first half
    train, second half target, and ``fold`` is ignored.
    """
    if bundle.labels is None:
        raise ValidationError("pseudo splits require a labeled bundle")
    if mode == BASE_TO_NOVEL:
        fold_set = {int(c) for c in fold} if fold is not None else set()
        if not fold_set:
            raise ValidationError("fold must be a nonempty class set")
        if not fold_set <= split.base_classes:
            raise ValidationError("fold must be a subset of the base classes")
        train_classes = split.base_classes - fold_set
        target_classes = fold_set
    elif mode == HALF_SPLIT:
        classes = sorted(split.base_classes | split.novel_classes)
        if not classes:
            classes = list(range(bundle.n_classes))
        half = len(classes) // 2
        train_classes = set(classes[:half])
        target_classes = set(classes[half:])
    else:
        raise ValidationError(f"unknown pseudo-split mode {mode!r}")

    labels = bundle.labels
    train_idx = np.nonzero(np.isin(labels, sorted(train_classes)))[0]
    target_idx = np.nonzero(np.isin(labels, sorted(target_classes)))[0]
    return bundle.with_samples(train_idx), bundle.with_samples(target_idx)


def evaluate_gates(
    pseudo_target: DomainBundle,
    gaps: PairGapTable,
    graph: ConfusionGraph,
    gates: GateConfig,
) -> dict:
    """Labeled correction metrics of one gate setting on a pseudo-target."""
    from nerp.corrector import batch_correct

    if pseudo_target.labels is None:
        raise ValidationError("evaluate_gates requires labels on the pseudo-target")
    _, summary = batch_correct(pseudo_target, gaps, graph, gates)
    return {
        "accuracy_gain": summary.accuracy_after - summary.accuracy_before,
        "flips": summary.flips,
        "fer": summary.fer,
    }


def _fold_counts(
    bundle: DomainBundle,
    gaps: PairGapTable,
    graph: ConfusionGraph,
    tau_grid: np.ndarray,
    delta_grid: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if bundle.labels is None:
        raise ValidationError("grid search requires labeled pseudo-targets")
    logits = bundle.features @ bundle.prototypes_ft.T
    cands = build_candidates(logits, gaps, graph)
    labels = bundle.labels
    sample_of = np.repeat(np.arange(bundle.n_samples), np.diff(cands.indptr))
    orig_correct = cands.top1 == labels
    fix_flag = (~orig_correct[sample_of]) & (cands.cand_class == labels[sample_of])
    brk_flag = orig_correct[sample_of]
    return _kernels.grid_flip_counts(
        cands.indptr,
        cands.cand_sigma,
        cands.cand_margin,
        fix_flag.astype(np.uint8),
        brk_flag.astype(np.uint8),
        tau_grid,
        delta_grid,
    )


def grid_search(
    folds: Sequence[tuple[DomainBundle, PairGapTable]],
    graph: ConfusionGraph,
    config: CalibrationConfig,
) -> CalibrationReport:
    """Exhaustive search of the gate grid, aggregated by mean across folds.

    Ties in the aggregated objective break toward lower pooled FER, then
    fewer flips, then smaller tau_eff, then smaller delta.
    """
    if not folds:
        raise ValidationError("grid search needs at least one fold")
    tau_grid = config.grid_tau.points()
    delta_grid = config.grid_delta.points()

    per_fold_counts = []
    for bundle, gaps in folds:
        per_fold_counts.append(_fold_counts(bundle, gaps, graph, tau_grid, delta_grid))

    flips_sum = np.sum([c[0] for c in per_fold_counts], axis=0)
    fixes_sum = np.sum([c[1] for c in per_fold_counts], axis=0)
    n_folds = len(per_fold_counts)

    # correct flips minus wrong flips; a flip not landing on the true label
    # counts against the cell even when the original prediction was wrong
    wrong_sum = flips_sum - fixes_sum
    net_mean = (fixes_sum - wrong_sum) / n_folds
    with np.errstate(invalid="ignore"):
        fer = np.where(flips_sum > 0, wrong_sum / np.maximum(flips_sum, 1), 0.0)

    if config.objective == NET_CORRECT_FLIPS:
        objective = net_mean
    else:
        coverage = flips_sum / n_folds
        objective = np.where(fer <= config.fer_cap, coverage, -np.inf)

    n_tau, n_delta = objective.shape
    tau_idx, delta_idx = np.meshgrid(np.arange(n_tau), np.arange(n_delta), indexing="ij")
    order = np.lexsort(
        (
            delta_idx.ravel(),
            tau_idx.ravel(),
            flips_sum.ravel(),
            fer.ravel(),
            -objective.ravel(),
        )
    )
    best_flat = int(order[0])
    bi, bj = divmod(best_flat, n_delta)
    best_tau = float(tau_grid[bi])
    best_delta = float(delta_grid[bj])

    per_fold = []
    for fold_id, ((bundle, _), counts) in enumerate(zip(folds, per_fold_counts)):
        flips = int(counts[0][bi, bj])
        fixes = int(counts[1][bi, bj])
        breaks = int(counts[2][bi, bj])
        per_fold.append(
            FoldMetrics(
                fold_id=fold_id,
                accuracy_gain=(fixes - breaks) / bundle.n_samples,
                flips=flips,
                fer=((flips - fixes) / flips) if flips else 0.0,
            )
        )

    return CalibrationReport(
        best_tau_eff=best_tau,
        best_delta=best_delta,
        per_fold=tuple(per_fold),
        tau_grid=tau_grid,
        delta_grid=delta_grid,
        objective_surface=objective,
        objective=config.objective,
    )


def default_grids(
    folds: Sequence[tuple[DomainBundle, PairGapTable]],
    graph: ConfusionGraph,
    step_tau: float = 1e-3,
    step_delta: float = 1e-3,
) -> tuple[GridSpec, GridSpec]:
    """Grid ranges from the 1st..99th percentiles of observed gaps and margins."""
    sigmas = []
    margins = []
    for bundle, gaps in folds:
        sigmas.extend(gaps.gaps.values())
        logits = bundle.features @ bundle.prototypes_ft.T
        cands = build_candidates(logits, gaps, graph)
        margins.append(cands.cand_margin)
    sig = np.array(sigmas, dtype=np.float64)
    mar = np.concatenate(margins) if margins else np.zeros(1)

    def spec(values: np.ndarray, step: float) -> GridSpec:
        lo, hi = np.percentile(values, [1.0, 99.0])
        if not hi > lo:
            lo, hi = lo - step, hi + step
        return GridSpec(float(lo), float(hi), step)

    return spec(sig, step_tau), spec(mar, step_delta)
