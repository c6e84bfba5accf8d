"""Embedding data model and bit-exact on-disk container.

A bundle directory holds a ``bundle.json`` manifest plus raw binary
payloads: one little-endian float32 row-major file per matrix or anchor
(exactly ``rows * dim * 4`` bytes), and an optional little-endian uint32
labels file with one entry per sample.

All rows are L2-normalized on load; storage is float32, in-memory
arithmetic is float64.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from nerp.errors import ValidationError

SCHEMA_VERSION = 1
MANIFEST_NAME = "bundle.json"

# Row-norm policy: silent renormalization within UNIT_TOL of 1, hard error
# below DEGENERATE_TOL, renormalization with a warning in between.
UNIT_TOL = 1e-5
DEGENERATE_TOL = 1e-8

MATRIX_NAMES = ("features", "prototypes_ft", "prototypes_zs")
ANCHOR_NAMES = ("u_txt_zs", "u_txt_ft", "u_img")


def normalize_rows(mat: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Return a float64 copy of ``mat`` with unit rows.

    Rows with norm below ``DEGENERATE_TOL`` are rejected; rows further than
    ``UNIT_TOL`` from unit length are renormalized with a warning.
    """
    out = np.ascontiguousarray(mat, dtype=np.float64)
    if out.ndim == 1:
        out = out[None, :]
        squeeze = True
    else:
        squeeze = False
    norms = np.linalg.norm(out, axis=1)
    if np.any(norms < DEGENERATE_TOL):
        bad = int(np.argmax(norms < DEGENERATE_TOL))
        raise ValidationError(f"degenerate row {bad} in {name}: norm {norms[bad]:.3e}")
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        bad = int(np.argmax(np.abs(norms - 1.0) > UNIT_TOL))
        warnings.warn(
            f"{name}: row {bad} has norm {norms[bad]:.6f}; renormalizing",
            stacklevel=2,
        )
    out = out / norms[:, None]
    return out[0] if squeeze else out


@dataclass(frozen=True)
class NeutralAnchors:
    """Unit anchor vectors probing class-agnostic preference.

    ``u_txt_zs`` is always present (zero-shot neutral text anchor);
    ``u_txt_ft`` is needed for the residual text prior and ``u_img`` for
    any image prior.
    """

    u_txt_zs: np.ndarray
    u_txt_ft: np.ndarray | None = None
    u_img: np.ndarray | None = None

    def validate(self, dim: int) -> None:
        for name in ANCHOR_NAMES:
            vec = getattr(self, name)
            if vec is None:
                if name == "u_txt_zs":
                    raise ValidationError("anchor u_txt_zs is required")
                continue
            if vec.shape != (dim,):
                raise ValidationError(
                    f"anchor {name} has shape {vec.shape}, expected ({dim},)"
                )


@dataclass(frozen=True)
class DomainBundle:
    """All embeddings for one domain.

    ``features`` holds one unit row per sample, ``prototypes_ft`` /
    ``prototypes_zs`` one unit row per class (fine-tuned and zero-shot text
    prototypes), ``labels`` an optional per-sample class index.
    """

    domain_id: str
    features: np.ndarray
    prototypes_ft: np.ndarray
    prototypes_zs: np.ndarray
    anchors: NeutralAnchors
    class_names: tuple[str, ...]
    labels: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def validate(self) -> None:
        dim = self.dim
        for name in ("features", "prototypes_ft", "prototypes_zs"):
            mat = getattr(self, name)
            if mat.ndim != 2 or mat.shape[1] != dim:
                raise ValidationError(f"{name}: dimension mismatch (expected dim {dim})")
        n_classes = self.n_classes
        if self.prototypes_ft.shape[0] != n_classes or self.prototypes_zs.shape[0] != n_classes:
            raise ValidationError(
                "prototype row counts must equal the number of class names "
                f"({self.prototypes_ft.shape[0]}, {self.prototypes_zs.shape[0]} vs {n_classes})"
            )
        self.anchors.validate(dim)
        if self.labels is not None:
            if self.labels.shape != (self.n_samples,):
                raise ValidationError("labels length must equal the sample count")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n_classes):
                raise ValidationError("label out of range")

    def with_samples(self, indices: np.ndarray) -> "DomainBundle":
        """Bundle restricted to the given samples; class-level data is shared."""
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
        )


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint base/novel class-index sets."""

    base_classes: frozenset[int]
    novel_classes: frozenset[int]

    def __post_init__(self) -> None:
        if self.base_classes & self.novel_classes:
            raise ValidationError("base and novel class sets overlap")

    def validate_against(self, n_classes: int) -> None:
        union = self.base_classes | self.novel_classes
        if union and (min(union) < 0 or max(union) >= n_classes):
            raise ValidationError("split references a class index out of range")


def _read_f32_matrix(path: Path, rows: int, dim: int, name: str) -> np.ndarray:
    expected = rows * dim * 4
    data = path.read_bytes()
    if len(data) != expected:
        raise ValidationError(
            f"{name}: payload {path.name} has {len(data)} bytes, expected {expected}"
        )
    raw = np.frombuffer(data, dtype="<f4").reshape(rows, dim)
    return normalize_rows(raw, name)


def _write_f32(path: Path, mat: np.ndarray) -> None:
    np.ascontiguousarray(mat, dtype="<f4").tofile(path)


def load_bundle(path: str | os.PathLike) -> DomainBundle:
    """Load a bundle from a directory (or an explicit manifest path)."""
    p = Path(path)
    manifest_path = p / MANIFEST_NAME if p.is_dir() else p
    if not manifest_path.is_file():
        raise ValidationError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed manifest {manifest_path}: {exc}") from exc

    for key in ("domain_id", "dim", "class_names", "matrices", "anchors"):
        if key not in manifest:
            raise ValidationError(f"manifest missing field {key!r}")
    dim = int(manifest["dim"])
    class_names = tuple(str(c) for c in manifest["class_names"])

    matrices = {}
    for name in MATRIX_NAMES:
        entry = manifest["matrices"].get(name)
        if entry is None:
            raise ValidationError(f"manifest missing matrix {name!r}")
        matrices[name] = _read_f32_matrix(base / entry["file"], int(entry["rows"]), dim, name)

    anchors = {}
    for name in ANCHOR_NAMES:
        fname = manifest["anchors"].get(name)
        if fname is None:
            anchors[name] = None
            continue
        data = (base / fname).read_bytes()
        if len(data) != dim * 4:
            raise ValidationError(f"anchor {name}: expected {dim * 4} bytes, got {len(data)}")
        anchors[name] = normalize_rows(np.frombuffer(data, dtype="<f4"), name)

    labels = None
    if manifest.get("labels") is not None:
        raw = (base / manifest["labels"]).read_bytes()
        if len(raw) != matrices["features"].shape[0] * 4:
            raise ValidationError("labels payload size does not match the sample count")
        labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)

    bundle = DomainBundle(
        domain_id=str(manifest["domain_id"]),
        features=matrices["features"],
        prototypes_ft=matrices["prototypes_ft"],
        prototypes_zs=matrices["prototypes_zs"],
        anchors=NeutralAnchors(**anchors),
        class_names=class_names,
        labels=labels,
    )
    bundle.validate()
    return bundle


def save_bundle(bundle: DomainBundle, path: str | os.PathLike) -> None:
    """Write ``bundle`` to a directory in the container format."""
    bundle.validate()
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)

    matrices = {}
    for name in MATRIX_NAMES:
        fname = f"{name}.f32"
        _write_f32(out / fname, getattr(bundle, name))
        matrices[name] = {"rows": int(getattr(bundle, name).shape[0]), "file": fname}

    anchors: dict[str, str | None] = {}
    for name in ANCHOR_NAMES:
        vec = getattr(bundle.anchors, name)
        if vec is None:
            anchors[name] = None
        else:
            fname = f"{name}.f32"
            _write_f32(out / fname, vec)
            anchors[name] = fname

    labels_entry = None
    if bundle.labels is not None:
        labels_entry = "labels.u32"
        np.ascontiguousarray(bundle.labels, dtype="<u4").tofile(out / labels_entry)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "domain_id": bundle.domain_id,
        "dim": bundle.dim,
        "class_names": list(bundle.class_names),
        "matrices": matrices,
        "anchors": anchors,
        "labels": labels_entry,
    }
    tmp = out / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out / MANIFEST_NAME)
