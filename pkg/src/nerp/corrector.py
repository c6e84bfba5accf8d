"""Surrogate scoring, the prior-dominated region test, and gated local flips.

A sample whose top-1 class is strongly favored by the composite prior gap
(``sigma >= tau_eff``) while the observed margin is weak (``m <= delta``)
is treated as prior-dominated: its prediction flips to the best retained
confusable neighbor via a minimal logit tie-break. Each sample flips at
most once, from its original top-1 only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from nerp import _kernels
from nerp.embedding_store import DomainBundle
from nerp.errors import ValidationError
from nerp.graph import ConfusionGraph
from nerp.margins import InterceptEstimate
from nerp.priors import PairGapTable

DEFAULT_EPSILON0 = 1e-4


@dataclass(frozen=True)
class GateConfig:
    """Global per-domain decision gates."""

    tau_eff: float
    delta: float
    epsilon0: float = DEFAULT_EPSILON0
    intercept: InterceptEstimate = field(default_factory=InterceptEstimate.folded)

    def __post_init__(self) -> None:
        if not self.epsilon0 > 0:
            raise ValidationError("epsilon0 must be positive")

    def to_json_dict(self) -> dict:
        return {
            "tau_eff": self.tau_eff,
            "delta": self.delta,
            "epsilon0": self.epsilon0,
            "beta_hat": self.intercept.beta_hat,
            "mode": self.intercept.mode,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GateConfig":
        try:
            intercept = InterceptEstimate(
                beta_hat=float(d.get("beta_hat", 0.0)),
                n_pairs_used=int(d.get("n_pairs_used", 0)),
                mode=str(d.get("mode", "folded_into_gate")),
            )
            return cls(
                tau_eff=float(d["tau_eff"]),
                delta=float(d["delta"]),
                epsilon0=float(d.get("epsilon0", DEFAULT_EPSILON0)),
                intercept=intercept,
            )
        except KeyError as exc:
            raise ValidationError(f"gate config missing field {exc}") from exc


@dataclass(frozen=True)
class CorrectionOutcome:
    sample_index: int
    original_top1: int
    corrected_top1: int
    flipped: bool
    flip_target_candidates: tuple[tuple[int, float, float], ...]  # (class, sigma, margin)
    surrogate_scores: dict[tuple[int, int], float]


@dataclass(frozen=True)
class CorrectionSummary:
    n_samples: int
    flips: int
    accuracy_before: float | None = None
    accuracy_after: float | None = None
    fer: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "flips": self.flips,
            "accuracy_before": self.accuracy_before,
            "accuracy_after": self.accuracy_after,
            "fer": self.fer,
        }


def surrogate_score(m: float, sigma: float, beta_hat: float) -> float:
    """Posterior log-odds proxy: margin plus composite gap plus intercept."""
    return m + sigma + beta_hat


def in_prior_dominated_region(sigma_ij: float, m_ij: float, gates: GateConfig) -> bool:
    """True iff the prior gate holds and the evidence gate fails to clear."""
    return sigma_ij >= gates.tau_eff and m_ij <= gates.delta


def _lookup_gap(gaps: PairGapTable, i: int, j: int) -> float:
    try:
        return gaps.gaps[(i, j)]
    except KeyError:
        raise ValidationError(f"gap table has no entry for graph edge ({i},{j})") from None


def apply_correction(
    logits: np.ndarray,
    gaps: PairGapTable,
    graph: ConfusionGraph,
    gates: GateConfig,
    sample_index: int = 0,
) -> CorrectionOutcome:
    """Single-sample decision rule.

    Neighbors of the top-1 class passing both gates are retained; the
    retained neighbor with the highest logit (ties to the lowest class
    index) becomes the new top-1 through the epsilon0 tie-break.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (graph.n_classes,):
        raise ValidationError("logits length must equal the class count")
    i = int(np.argmax(logits))  # argmax ties resolve to the lowest index

    beta = gates.intercept.beta_hat
    retained: list[tuple[int, float, float]] = []
    scores: dict[tuple[int, int], float] = {}
    for j in graph.neighbors(i):
        sigma = _lookup_gap(gaps, i, j)
        m = float(logits[i] - logits[j])
        scores[(i, j)] = surrogate_score(m, sigma, beta)
        if in_prior_dominated_region(sigma, m, gates):
            retained.append((j, sigma, m))

    if not retained:
        return CorrectionOutcome(sample_index, i, i, False, (), scores)

    j_star = max(retained, key=lambda t: (logits[t[0]], -t[0]))[0]
    updated = logits.copy()
    updated[j_star] = max(updated[j_star], logits[i] + gates.epsilon0)
    corrected = int(np.argmax(updated))
    return CorrectionOutcome(sample_index, i, corrected, True, tuple(retained), scores)


@dataclass(frozen=True)
class CandidateSet:
    """CSR candidate layout shared by batch correction and calibration.

    Candidates of each sample are the graph neighbors of its top-1 class,
    sorted by selection priority (neighbor logit descending, class index
    ascending).
    """

    top1: np.ndarray  # (n,) int64
    indptr: np.ndarray  # (n+1,) int64
    cand_class: np.ndarray  # (nnz,) int64
    cand_sigma: np.ndarray  # (nnz,) float64
    cand_margin: np.ndarray  # (nnz,) float64
    cand_logit: np.ndarray  # (nnz,) float64


def build_candidates(
    logits: np.ndarray, gaps: PairGapTable, graph: ConfusionGraph
) -> CandidateSet:
    logits = np.asarray(logits, dtype=np.float64)
    n, n_classes = logits.shape
    if n_classes != graph.n_classes:
        raise ValidationError("logit width must equal the class count")
    gap_matrix = gaps.as_matrix(n_classes)
    top1 = np.argmax(logits, axis=1).astype(np.int64)

    counts = np.array([len(graph.neighbors(int(c))) for c in top1], dtype=np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    nnz = int(indptr[-1])
    cand_class = np.empty(nnz, dtype=np.int64)
    cand_sigma = np.empty(nnz, dtype=np.float64)
    cand_margin = np.empty(nnz, dtype=np.float64)
    cand_logit = np.empty(nnz, dtype=np.float64)

    for klass in np.unique(top1):
        neigh = np.array(graph.neighbors(int(klass)), dtype=np.int64)
        rows = np.nonzero(top1 == klass)[0]
        if neigh.size == 0 or rows.size == 0:
            continue
        sig = gap_matrix[klass, neigh]
        if np.any(np.isnan(sig)):
            j = int(neigh[int(np.argmax(np.isnan(sig)))])
            raise ValidationError(f"gap table has no entry for graph edge ({int(klass)},{j})")
        block = logits[np.ix_(rows, neigh)]  # (n_rows, n_neigh)
        # stable argsort on -logit: ties keep neighbor order, i.e. lowest class
        order = np.argsort(-block, axis=1, kind="stable")
        sorted_logit = np.take_along_axis(block, order, axis=1)
        for pos, row in enumerate(rows):
            lo = indptr[row]
            hi = indptr[row + 1]
            o = order[pos]
            cand_class[lo:hi] = neigh[o]
            cand_sigma[lo:hi] = sig[o]
            cand_logit[lo:hi] = sorted_logit[pos]
            cand_margin[lo:hi] = logits[row, klass] - sorted_logit[pos]
    return CandidateSet(top1, indptr, cand_class, cand_sigma, cand_margin, cand_logit)


def decide_flips(
    cands: CandidateSet, gates: GateConfig
) -> np.ndarray:
    """Per-sample flip target class (-1: keep the original prediction)."""
    sel = _kernels.flip_targets(
        cands.indptr, cands.cand_sigma, cands.cand_margin, gates.tau_eff, gates.delta
    )
    out = np.where(sel >= 0, cands.cand_class[np.clip(sel, 0, None)], -1)
    return out.astype(np.int64)


def batch_correct(
    bundle: DomainBundle,
    gaps: PairGapTable,
    graph: ConfusionGraph,
    gates: GateConfig,
) -> tuple[list[CorrectionOutcome], CorrectionSummary]:
    """Apply the decision rule to every sample of a bundle.

    Outcomes are returned in sample order regardless of internal batching;
    the summary adds labeled metrics when the bundle carries labels.
    """
    if bundle.n_samples == 0:
        raise ValidationError("batch_correct requires a nonempty feature matrix")
    logits = bundle.features @ bundle.prototypes_ft.T
    cands = build_candidates(logits, gaps, graph)
    targets = decide_flips(cands, gates)
    beta = gates.intercept.beta_hat

    outcomes: list[CorrectionOutcome] = []
    for s in range(bundle.n_samples):
        i = int(cands.top1[s])
        lo, hi = int(cands.indptr[s]), int(cands.indptr[s + 1])
        scores = {
            (i, int(cands.cand_class[c])): surrogate_score(
                float(cands.cand_margin[c]), float(cands.cand_sigma[c]), beta
            )
            for c in range(lo, hi)
        }
        retained = tuple(
            (int(cands.cand_class[c]), float(cands.cand_sigma[c]), float(cands.cand_margin[c]))
            for c in range(lo, hi)
            if in_prior_dominated_region(cands.cand_sigma[c], cands.cand_margin[c], gates)
        )
        t = int(targets[s])
        if t >= 0:
            outcomes.append(CorrectionOutcome(s, i, t, True, retained, scores))
        else:
            outcomes.append(CorrectionOutcome(s, i, i, False, retained, scores))

    flips = int(np.count_nonzero(targets >= 0))
    if bundle.labels is None:
        summary = CorrectionSummary(bundle.n_samples, flips)
    else:
        labels = bundle.labels
        corrected = np.where(targets >= 0, targets, cands.top1)
        acc_before = float(np.mean(cands.top1 == labels))
        acc_after = float(np.mean(corrected == labels))
        flipped = targets >= 0
        wrong_flips = int(np.count_nonzero(flipped & (corrected != labels)))
        fer = (wrong_flips / flips) if flips else 0.0
        summary = CorrectionSummary(bundle.n_samples, flips, acc_before, acc_after, fer)
    return outcomes, summary


def outcomes_to_json(outcomes: Sequence[CorrectionOutcome], summary: CorrectionSummary) -> dict:
    return {
        "schema_version": 1,
        "summary": summary.to_json_dict(),
        "outcomes": [
            {
                "sample_index": o.sample_index,
                "original_top1": o.original_top1,
                "corrected_top1": o.corrected_top1,
                "flipped": o.flipped,
                "flip_target_candidates": [
                    {"class": c, "sigma": s, "margin": m} for c, s, m in o.flip_target_candidates
                ],
                "surrogate_scores": {f"{i}->{j}": v for (i, j), v in o.surrogate_scores.items()},
            }
            for o in outcomes
        ],
    }


def load_gates(path) -> GateConfig:
    try:
        data = json.loads(open(path).read())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed gates file {path}: {exc}") from exc
    return GateConfig.from_json_dict(data)
