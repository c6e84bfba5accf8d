"""Symmetric confusable-neighbor graph over classes.

Edges come either from an externally generated edge-list file (JSON array
of index or name pairs) or from a cosine kNN construction over zero-shot
prototypes. Directed inputs are symmetrized by union; self-edges are
dropped.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from nerp.errors import ValidationError


@dataclass(frozen=True)
class ConfusionGraph:
    """Immutable symmetric, irreflexive neighborhood graph."""

    n_classes: int
    adjacency: tuple[tuple[int, ...], ...]

    @classmethod
    def from_edges(cls, n_classes: int, edges: Iterable[tuple[int, int]]) -> "ConfusionGraph":
        neigh: list[set[int]] = [set() for _ in range(n_classes)]
        for i, j in edges:
            i, j = int(i), int(j)
            if not (0 <= i < n_classes and 0 <= j < n_classes):
                raise ValidationError(f"edge ({i},{j}) out of range for {n_classes} classes")
            if i == j:
                continue
            neigh[i].add(j)
            neigh[j].add(i)
        return cls(n_classes, tuple(tuple(sorted(s)) for s in neigh))

    def neighbors(self, i: int) -> tuple[int, ...]:
        return self.adjacency[i]

    def edges(self) -> Iterator[tuple[int, int]]:
        """Unordered edges, each yielded once with i < j."""
        for i, neigh in enumerate(self.adjacency):
            for j in neigh:
                if i < j:
                    yield (i, j)

    def ordered_pairs(self) -> Iterator[tuple[int, int]]:
        """Every directed edge (both orientations)."""
        for i, neigh in enumerate(self.adjacency):
            for j in neigh:
                yield (i, j)

    @property
    def n_edges(self) -> int:
        return sum(len(n) for n in self.adjacency) // 2


def load_edge_list(
    path: str | os.PathLike,
    n_classes: int,
    class_names: Sequence[str] | None = None,
) -> ConfusionGraph:
    """Build a graph from a JSON array of ``[i, j]`` index or name pairs."""
    try:
        entries = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed edge list {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise ValidationError("edge list must be a JSON array of 2-element arrays")
    name_to_idx = {name: i for i, name in enumerate(class_names)} if class_names else {}

    def resolve(item) -> int:
        if isinstance(item, str):
            if item not in name_to_idx:
                raise ValidationError(f"unknown class name {item!r} in edge list")
            return name_to_idx[item]
        if isinstance(item, bool) or not isinstance(item, int):
            raise ValidationError(f"edge endpoint {item!r} is neither an index nor a name")
        return item

    edges = []
    for entry in entries:
        if not isinstance(entry, list) or len(entry) != 2:
            raise ValidationError(f"edge entry {entry!r} is not a 2-element array")
        edges.append((resolve(entry[0]), resolve(entry[1])))
    return ConfusionGraph.from_edges(n_classes, edges)


def save_edge_list(graph: ConfusionGraph, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps([[i, j] for i, j in graph.edges()]) + "\n")


def build_knn_graph(prototypes_zs: np.ndarray, k: int) -> ConfusionGraph:
    """Symmetrized union of each class's k nearest neighbors by cosine.

    Similarity ties break toward the lower class index, so the result is
    deterministic and independent of any parallel schedule.
    """
    protos = np.asarray(prototypes_zs, dtype=np.float64)
    n = protos.shape[0]
    if not 1 <= k < n:
        raise ValidationError(f"k={k} out of range for {n} classes")
    sims = protos @ protos.T
    np.fill_diagonal(sims, -np.inf)
    edges = []
    for i in range(n):
        # stable sort on -sim keeps the lowest index first among ties
        order = np.argsort(-sims[i], kind="stable")
        for j in order[:k]:
            edges.append((i, int(j)))
    return ConfusionGraph.from_edges(n, edges)
