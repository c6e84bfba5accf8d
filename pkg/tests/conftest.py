import numpy as np
import pytest

from nerp.embedding_store import DomainBundle, NeutralAnchors


def unit_rows(mat: np.ndarray) -> np.ndarray:
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def random_bundle(
    rng: np.random.Generator,
    n_samples: int = 6,
    n_classes: int = 4,
    dim: int = 8,
    with_labels: bool = True,
    with_optional_anchors: bool = True,
) -> DomainBundle:
    def mat(rows):
        return unit_rows(rng.standard_normal((rows, dim)))

    def vec():
        v = rng.standard_normal(dim)
        return v / np.linalg.norm(v)

    return DomainBundle(
        domain_id=f"rnd-{rng.integers(1 << 30)}",
        features=mat(n_samples),
        prototypes_ft=mat(n_classes),
        prototypes_zs=mat(n_classes),
        anchors=NeutralAnchors(
            u_txt_zs=vec(),
            u_txt_ft=vec() if with_optional_anchors else None,
            u_img=vec() if with_optional_anchors else None,
        ),
        class_names=tuple(f"c{i}" for i in range(n_classes)),
        labels=rng.integers(0, n_classes, n_samples).astype(np.int64) if with_labels else None,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
