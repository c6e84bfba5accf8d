"""Neutral prior logits, residual forms, and per-pair composite gaps.

A prior logit correlates a class prototype with a class-agnostic anchor;
the residual form subtracts the correlation with the current-model anchor
(or fine-tuned prototype) to keep only domain-induced displacement.
Composite gaps are materialized on graph edges only, with exact
antisymmetry by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nerp.errors import ValidationError
from nerp.graph import ConfusionGraph

TEXT_PLAIN = "text_plain"
TEXT_RESIDUAL = "text_residual"
IMAGE_PLAIN = "image_plain"
IMAGE_RESIDUAL = "image_residual"

_BOUND = {TEXT_PLAIN: 1.0, IMAGE_PLAIN: 1.0, TEXT_RESIDUAL: 2.0, IMAGE_RESIDUAL: 2.0}


@dataclass(frozen=True)
class PriorTable:
    """Per-class prior logit values for one variant."""

    variant: str
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.variant not in _BOUND:
            raise ValidationError(f"unknown prior variant {self.variant!r}")
        bound = _BOUND[self.variant] + 1e-9
        if self.values.size and np.abs(self.values).max() > bound:
            raise ValidationError(
                f"{self.variant} prior magnitude exceeds {bound:.0f}; inputs are not unit vectors"
            )

    @property
    def is_residual(self) -> bool:
        return self.variant in (TEXT_RESIDUAL, IMAGE_RESIDUAL)

    @property
    def n_classes(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class PairGapTable:
    """Composite prior gaps on ordered graph edges; gaps[(j,i)] == -gaps[(i,j)] exactly."""

    mode: str  # "plain" | "residual"
    gaps: dict[tuple[int, int], float]

    def as_matrix(self, n_classes: int) -> np.ndarray:
        """Dense (n_classes, n_classes) matrix, NaN where no edge exists."""
        mat = np.full((n_classes, n_classes), np.nan)
        for (i, j), v in self.gaps.items():
            mat[i, j] = v
        return mat

    def max_abs(self) -> float:
        return max((abs(v) for v in self.gaps.values()), default=0.0)


def _check_dims(protos: np.ndarray, anchor: np.ndarray, op: str) -> None:
    if protos.ndim != 2 or anchor.ndim != 1 or protos.shape[1] != anchor.shape[0]:
        raise ValidationError(f"{op}: dimension mismatch {protos.shape} vs {anchor.shape}")


def text_prior(prototypes_ft: np.ndarray, u_txt_zs: np.ndarray) -> PriorTable:
    """Correlation of each fine-tuned prototype with the zero-shot neutral text anchor."""
    _check_dims(prototypes_ft, u_txt_zs, "text_prior")
    return PriorTable(TEXT_PLAIN, prototypes_ft @ u_txt_zs)


def image_prior(prototypes_zs: np.ndarray, u_img: np.ndarray) -> PriorTable:
    """Correlation of the mean-image anchor with each zero-shot prototype."""
    if u_img is None:
        raise ValidationError("image_prior requires the u_img anchor")
    _check_dims(prototypes_zs, u_img, "image_prior")
    return PriorTable(IMAGE_PLAIN, prototypes_zs @ u_img)


def residual_text_prior(
    prototypes_ft: np.ndarray, u_txt_zs: np.ndarray, u_txt_ft: np.ndarray
) -> PriorTable:
    """Text prior against the anchor displacement (zero-shot minus current)."""
    if u_txt_ft is None:
        raise ValidationError("residual_text_prior requires the u_txt_ft anchor")
    _check_dims(prototypes_ft, u_txt_zs, "residual_text_prior")
    _check_dims(prototypes_ft, u_txt_ft, "residual_text_prior")
    return PriorTable(TEXT_RESIDUAL, prototypes_ft @ u_txt_zs - prototypes_ft @ u_txt_ft)


def residual_image_prior(
    prototypes_zs: np.ndarray, prototypes_ft: np.ndarray, u_img: np.ndarray
) -> PriorTable:
    """Image prior against the prototype displacement (zero-shot minus fine-tuned)."""
    if u_img is None:
        raise ValidationError("residual_image_prior requires the u_img anchor")
    if prototypes_zs.shape != prototypes_ft.shape:
        raise ValidationError("residual_image_prior: prototype matrices differ in shape")
    _check_dims(prototypes_zs, u_img, "residual_image_prior")
    return PriorTable(IMAGE_RESIDUAL, prototypes_zs @ u_img - prototypes_ft @ u_img)


def composite_gap(txt: PriorTable, img: PriorTable, graph: ConfusionGraph) -> PairGapTable:
    """Sum of text and image prior gaps for every ordered graph edge.

    Both tables must be plain or both residual; each unordered edge is
    computed once and negated, so antisymmetry is exact.
    """
    if txt.variant not in (TEXT_PLAIN, TEXT_RESIDUAL) or img.variant not in (
        IMAGE_PLAIN,
        IMAGE_RESIDUAL,
    ):
        raise ValidationError("composite_gap expects one text and one image table")
    if txt.is_residual != img.is_residual:
        raise ValidationError("mixed plain/residual prior variants are not supported")
    if txt.n_classes != img.n_classes:
        raise ValidationError("prior tables disagree on the class count")
    if graph.n_classes != txt.n_classes:
        raise ValidationError("graph and prior tables disagree on the class count")

    gaps: dict[tuple[int, int], float] = {}
    for i, j in graph.edges():
        v = float((txt.values[i] - txt.values[j]) + (img.values[i] - img.values[j]))
        gaps[(i, j)] = v
        gaps[(j, i)] = -v
    return PairGapTable("residual" if txt.is_residual else "plain", gaps)


def bundle_priors(bundle, mode: str = "plain") -> tuple[PriorTable, PriorTable]:
    """Convenience: the (text, image) prior tables of a bundle in the given mode."""
    if mode == "plain":
        return (
            text_prior(bundle.prototypes_ft, bundle.anchors.u_txt_zs),
            image_prior(bundle.prototypes_zs, bundle.anchors.u_img),
        )
    if mode == "residual":
        return (
            residual_text_prior(bundle.prototypes_ft, bundle.anchors.u_txt_zs, bundle.anchors.u_txt_ft),
            residual_image_prior(bundle.prototypes_zs, bundle.prototypes_ft, bundle.anchors.u_img),
        )
    raise ValidationError(f"unknown prior mode {mode!r}")


def bundle_gaps(bundle, graph: ConfusionGraph, mode: str = "plain") -> PairGapTable:
    txt, img = bundle_priors(bundle, mode)
    return composite_gap(txt, img, graph)
