"""Synthetic generative oracle for the prior-probing theory.

The model: unit prototypes on the sphere, a low-rank deformation confined
to the span of base-class prototypes (fine-tuning), class-conditional
von Mises-Fisher features around shifted prototype directions, and
neutral anchors whose component along the novel-difference span tracks the
realized domain feature mean. A shared domain shift plants directional
bias on chosen novel pairs, so both the expected margins and the anchor
gaps carry the planted signal.

Each check regenerates fresh samples from seeded substreams and reports
measured constants; nothing is assumed.
"""

from __future__ import annotations

import functools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from nerp.embedding_store import DatasetSplit, DomainBundle, NeutralAnchors
from nerp.errors import ValidationError
from nerp.graph import ConfusionGraph
from nerp.margins import estimate_margin_stats, fit_intercept
from nerp.priors import bundle_gaps, bundle_priors

# ---------------------------------------------------------------------------
# von Mises-Fisher sampling and moments


@functools.lru_cache(maxsize=8)
def _leggauss(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(nodes)


def vmf_mean_cosine(kappa: float, dim: int, nodes: int = 800) -> float:
    """Mean resultant length E[cos(angle to the mean direction)].

    Gauss-Legendre quadrature of the cosine marginal; for concentrated
    distributions the integral is evaluated in the stretched variable
    t = kappa * (1 - cos) so the integrand keeps an O(1) scale at any
    kappa.
    """
    if kappa < 0:
        raise ValidationError("kappa must be nonnegative")
    if dim < 2:
        raise ValidationError("vMF requires dimension >= 2")
    if kappa == 0:
        return 0.0
    if math.isinf(kappa):
        return 1.0
    x, w = _leggauss(nodes)
    if kappa < 50:
        # angle parameterization: the (1 - cos^2)^((d-3)/2) endpoint
        # singularity becomes the smooth sin^(d-2)
        phi = 0.5 * math.pi * (x + 1.0)
        weight = 0.5 * math.pi * w
        cos = np.cos(phi)
        logf = (dim - 2) * np.log(np.sin(phi)) + kappa * (cos - 1.0)
        f = np.exp(logf - logf.max())
        return float(np.sum(weight * cos * f) / np.sum(weight * f))
    # concentrated regime: t = kappa * (1 - cos) stretched, then t = s^2 to
    # remove the sqrt branch point at t = 0
    hi = min(2.0 * kappa, 200.0 + 20.0 * dim)
    s = 0.5 * math.sqrt(hi) * (x + 1.0)
    weight = 0.5 * math.sqrt(hi) * w
    t = s**2
    logf = -t + (dim - 2) * np.log(np.maximum(s, 1e-300)) + (dim - 3) / 2.0 * np.log(
        2.0 - t / kappa
    )
    f = np.exp(logf - logf.max())
    mean_t = float(np.sum(weight * t * f) / np.sum(weight * f))
    return 1.0 - mean_t / kappa


def sample_vmf(mean_dir: np.ndarray, kappa: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n unit vectors from vMF(mean_dir, kappa).

    Uses the standard rejection scheme for the cosine marginal plus a
    uniform tangent direction; kappa=0 is the uniform sphere and
    kappa=inf returns exact copies of the mean direction.
    """
    mu = np.asarray(mean_dir, dtype=np.float64)
    d = mu.shape[0]
    if kappa < 0:
        raise ValidationError("kappa must be nonnegative")
    if d < 2:
        raise ValidationError("vMF requires dimension >= 2")
    if abs(np.linalg.norm(mu) - 1.0) > 1e-6:
        raise ValidationError("mean direction must be a unit vector")
    if math.isinf(kappa):
        return np.tile(mu, (n, 1))

    b = (d - 1) / (np.sqrt(4 * kappa**2 + (d - 1) ** 2) + 2 * kappa)
    x0 = (1 - b) / (1 + b)
    c = kappa * x0 + (d - 1) * np.log(1 - x0**2)
    w = np.empty(n, dtype=np.float64)
    todo = np.arange(n)
    while todo.size:
        z = rng.beta((d - 1) / 2.0, (d - 1) / 2.0, size=todo.size)
        prop = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        accept = kappa * prop + (d - 1) * np.log(1 - x0 * prop) - c >= np.log(
            rng.uniform(size=todo.size)
        )
        w[todo[accept]] = prop[accept]
        todo = todo[~accept]

    tangent = rng.standard_normal((n, d))
    tangent -= np.outer(tangent @ mu, mu)
    tnorm = np.linalg.norm(tangent, axis=1, keepdims=True)
    tnorm[tnorm == 0] = 1.0
    tangent /= tnorm
    return w[:, None] * mu + np.sqrt(np.clip(1 - w**2, 0.0, None))[:, None] * tangent


# ---------------------------------------------------------------------------
# subspace projections


def orthonormal_rows(mat: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal row basis of the row space of ``mat`` (SVD, rank-revealing)."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.size == 0:
        return np.zeros((0, mat.shape[1] if mat.ndim == 2 else 0))
    _, s, vt = np.linalg.svd(mat, full_matrices=False)
    rank = int(np.sum(s > tol * max(s[0], 1.0)))
    return vt[:rank]


def project_subspace(v: np.ndarray, basis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal decomposition of v into (component in span(basis rows), remainder).

    A rank-deficient basis triggers a warning and projection onto the
    reduced-rank span.
    """
    v = np.asarray(v, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.float64)
    ortho = orthonormal_rows(basis)
    if ortho.shape[0] < basis.shape[0]:
        warnings.warn(
            f"basis is rank deficient ({ortho.shape[0]} < {basis.shape[0]}); projecting onto the reduced span",
            stacklevel=2,
        )
    proj = ortho.T @ (ortho @ v)
    return proj, v - proj


# ---------------------------------------------------------------------------
# model configuration


@dataclass(frozen=True)
class SyntheticModelConfig:
    """Parameters of the generative model.

    ``planted_bias`` entries (i, j, b) shift the domain feature mean so the
    expected margin of (i, j) equals b and the neutral anchors pick up the
    same gap; both classes must be novel. ``pair_closeness`` is the cosine
    planted between the two prototypes of each biased pair.
    """

    dim: int = 32
    n_base: int = 10
    n_novel: int = 6
    rank: int = 4
    deform_scale_base: float = 0.6
    deform_scale_novel: float = 0.05
    kappa: float = 150.0
    planted_bias: tuple[tuple[int, int, float], ...] = ()
    seed: int = 0
    n_samples_per_class: int = 200
    anchor_cap_img: float = 0.15
    anchor_cap_txt: float = 0.15
    pair_closeness: float = 0.88
    image_text_coupling: float = 0.7
    anchor_deform_scale: float | None = None
    subspace_leak: float = 0.0
    novel_subspace_overlap: float = 0.15

    @property
    def n_classes(self) -> int:
        return self.n_base + self.n_novel

    def validate(self) -> None:
        if self.rank >= self.dim:
            raise ValidationError("rank must be below the embedding dimension")
        if self.rank > self.n_base:
            raise ValidationError("rank cannot exceed the number of base prototypes")
        if self.n_base + self.n_novel > self.dim:
            raise ValidationError("need n_base + n_novel <= dim for independent prototypes")
        if self.kappa < 0:
            raise ValidationError("kappa must be nonnegative")
        if min(self.deform_scale_base, self.deform_scale_novel) < 0:
            raise ValidationError("deformation scales must be nonnegative")
        if not 0 <= self.subspace_leak <= 1:
            raise ValidationError("subspace_leak must lie in [0, 1]")
        if not 0 <= self.image_text_coupling <= 1:
            raise ValidationError("image_text_coupling must lie in [0, 1]")
        if not 0 <= self.novel_subspace_overlap <= 1:
            raise ValidationError("novel_subspace_overlap must lie in [0, 1]")
        if not 0 < self.pair_closeness < 1:
            raise ValidationError("pair_closeness must lie in (0, 1)")
        novel = set(range(self.n_base, self.n_classes))
        seen_second: set[int] = set()
        for i, j, _ in self.planted_bias:
            if i == j or i not in novel or j not in novel:
                raise ValidationError("planted pairs must join two distinct novel classes")
            if j in seen_second:
                raise ValidationError(f"class {j} is constrained by two planted pairs")
            seen_second.add(j)

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dim,
            "n_base": self.n_base,
            "n_novel": self.n_novel,
            "rank": self.rank,
            "deform_scale_base": self.deform_scale_base,
            "deform_scale_novel": self.deform_scale_novel,
            "kappa": self.kappa,
            "planted_bias": [[i, j, b] for i, j, b in self.planted_bias],
            "seed": self.seed,
            "n_samples_per_class": self.n_samples_per_class,
            "anchor_cap_img": self.anchor_cap_img,
            "anchor_cap_txt": self.anchor_cap_txt,
            "pair_closeness": self.pair_closeness,
            "image_text_coupling": self.image_text_coupling,
            "anchor_deform_scale": self.anchor_deform_scale,
            "subspace_leak": self.subspace_leak,
            "novel_subspace_overlap": self.novel_subspace_overlap,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SyntheticModelConfig":
        kwargs = dict(d)
        if "planted_bias" in kwargs:
            kwargs["planted_bias"] = tuple(
                (int(i), int(j), float(b)) for i, j, b in kwargs["planted_bias"]
            )
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class WorldInternals:
    """Ground truth of one generated world, for the theory checks."""

    config: SyntheticModelConfig
    t0: np.ndarray  # zero-shot prototypes, unit rows
    t_raw: np.ndarray  # pre-normalization fine-tuned prototypes
    s_basis: np.ndarray  # orthonormal rows spanning the base subspace
    v_basis: np.ndarray  # orthonormal rows spanning novel prototype differences
    deform_txt: np.ndarray  # (dim, rank) text deformation directions
    deform_img: np.ndarray  # (dim, rank) image deformation directions
    text_coeff: np.ndarray  # (C, rank) per-class text coefficients
    mean_dirs: np.ndarray  # (C, dim) feature mean directions incl. domain shift
    class_scales: np.ndarray  # (C,) per-class deformation magnitude
    mean_resultant: float  # E[cos] at the configured kappa


@dataclass(frozen=True)
class SyntheticWorld:
    zero_shot: DomainBundle
    fine_tuned: DomainBundle
    split: DatasetSplit
    internals: WorldInternals

    def __iter__(self):
        return iter((self.zero_shot, self.fine_tuned, self.split, self.internals))


# ---------------------------------------------------------------------------
# world generation


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _sample_prototypes(
    n_classes: int,
    dim: int,
    n_base: int,
    closeness_pairs: Sequence[tuple[int, int]],
    closeness: float,
    novel_overlap: float,
    rng: np.random.Generator,
) -> np.ndarray:
    t0 = rng.standard_normal((n_classes, dim))
    t0 /= np.linalg.norm(t0, axis=1, keepdims=True)
    if novel_overlap < 1.0 and n_classes > n_base:
        # novel prototypes keep only a fraction of their natural energy in
        # the base-prototype span: fine-tuning reshapes that span, and the
        # stability of zero-shot novel geometry is what the model asserts
        s_basis = orthonormal_rows(t0[:n_base])
        novel_rows = t0[n_base:]
        in_s = novel_rows @ s_basis.T @ s_basis
        novel_rows = novel_rows - (1.0 - novel_overlap) * in_s
        t0[n_base:] = novel_rows / np.linalg.norm(novel_rows, axis=1, keepdims=True)
    for i, j in closeness_pairs:
        xi = rng.standard_normal(dim)
        xi -= (xi @ t0[i]) * t0[i]
        t0[j] = closeness * t0[i] + math.sqrt(1 - closeness**2) * _unit(xi)
    return t0


def _solve_domain_shift(
    t0: np.ndarray,
    planted: Sequence[tuple[int, int, float]],
    class_weights: np.ndarray,
    rng_unused: None = None,
) -> np.ndarray:
    """Shared shift w with sum_c w_c * norm(t0_c + w) matching each planted gap.

    ``class_weights`` absorb the mean resultant length and the expected
    deformation shrink, so targets refer to the realized feature mean.
    Newton iteration on the shift coefficients; raises when a target
    exceeds the feasible range.
    """
    dim = t0.shape[1]
    if not planted:
        return np.zeros(dim)
    d0 = np.stack([t0[i] - t0[j] for i, j, _ in planted])
    targets = np.array([b for _, _, b in planted], dtype=np.float64)
    wmax = float(np.max(class_weights))
    for (i, j, b), row in zip(planted, d0):
        limit = 0.95 * wmax * np.linalg.norm(row)
        if abs(b) > limit:
            raise ValidationError(
                f"planted bias {b} on pair ({i},{j}) exceeds the feasible gap {limit:.3f}"
            )

    def model_mean(alpha: np.ndarray) -> np.ndarray:
        dirs = t0 + alpha @ d0
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        return (class_weights[:, None] * dirs).mean(axis=0)

    alpha = np.zeros(len(planted))
    step = 1e-6
    for _ in range(200):
        res = targets - d0 @ model_mean(alpha)
        if np.abs(res).max() < 1e-11:
            break
        jac = np.empty((len(planted), len(planted)))
        for q in range(len(planted)):
            bumped = alpha.copy()
            bumped[q] += step
            jac[:, q] = (d0 @ model_mean(bumped) - (targets - res)) / step
        try:
            delta = np.linalg.solve(jac, res)
        except np.linalg.LinAlgError as exc:
            raise ValidationError(
                "planted-bias targets are jointly infeasible for this geometry"
            ) from exc
        norm = np.linalg.norm(delta)
        if norm > 2.0:  # trust region: saturated means flatten the Jacobian
            delta *= 2.0 / norm
        alpha += delta
    else:
        raise ValidationError("planted-bias targets are jointly infeasible for this geometry")
    return alpha @ d0


def _sample_deformed_features(
    internals: WorldInternals, n_per_class: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(zero-shot features, fine-tuned features, labels) for n per class."""
    cfg = internals.config
    n_classes = cfg.n_classes
    rank = internals.deform_img.shape[1]
    f0 = np.vstack(
        [sample_vmf(internals.mean_dirs[c], cfg.kappa, n_per_class, rng) for c in range(n_classes)]
    )
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), n_per_class)

    rho = cfg.image_text_coupling
    noise = rng.standard_normal((f0.shape[0], rank))
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    text_dirs = internals.text_coeff / np.maximum(
        np.linalg.norm(internals.text_coeff, axis=1, keepdims=True), 1e-12
    )
    coeff = rho * text_dirs[labels] + math.sqrt(1 - rho**2) * noise
    coeff *= internals.class_scales[labels][:, None]
    f = f0 + coeff @ internals.deform_img.T
    f /= np.linalg.norm(f, axis=1, keepdims=True)
    return f0, f, labels


def _capped_anchor(
    core: np.ndarray, filler: np.ndarray, s_basis: np.ndarray, cap: float
) -> np.ndarray:
    load = min(np.linalg.norm(core), 0.999)
    u = core + math.sqrt(max(0.0, 1.0 - load**2)) * filler
    u = _unit(u)
    in_s = s_basis.T @ (s_basis @ u)
    normi = np.linalg.norm(in_s)
    if normi > cap:
        out_s = u - in_s
        u = cap * in_s / normi + math.sqrt(1.0 - cap**2) * _unit(out_s)
    return u


def generate_world(config: SyntheticModelConfig) -> SyntheticWorld:
    """Sample one synthetic world (zero-shot and fine-tuned views plus ground truth)."""
    config.validate()
    rng_proto = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    t0 = _sample_prototypes(
        config.n_classes,
        config.dim,
        config.n_base,
        [(i, j) for i, j, _ in config.planted_bias],
        config.pair_closeness,
        config.novel_subspace_overlap,
        rng_proto,
    )
    return _build_world_on(
        t0, config, list(range(config.n_base)), config.planted_bias, config.seed
    )


def sample_world_features(
    world: SyntheticWorld, n_per_class: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Fresh fine-tuned features and labels from the world's generative law."""
    _, f, labels = _sample_deformed_features(world.internals, n_per_class, rng)
    return f, labels


# ---------------------------------------------------------------------------
# theory checks


def _novel_pairs(world: SyntheticWorld, graph: ConfusionGraph) -> list[tuple[int, int]]:
    novel = world.split.novel_classes
    return [(i, j) for i, j in graph.edges() if i in novel and j in novel]


def _base_pairs(world: SyntheticWorld, graph: ConfusionGraph) -> list[tuple[int, int]]:
    base = world.split.base_classes
    return [(i, j) for i, j in graph.edges() if i in base and j in base]


def complete_graph(n_classes: int) -> ConfusionGraph:
    return ConfusionGraph.from_edges(
        n_classes, [(i, j) for i in range(n_classes) for j in range(i + 1, n_classes)]
    )


def check_sign_consistency(
    world: SyntheticWorld,
    graph: ConfusionGraph,
    prior_mode: str = "plain",
    gamma: float = 0.1,
    n_per_class: int = 1000,
    rng: np.random.Generator | None = None,
) -> dict:
    """Margin-vs-gap alignment and the high-probability sign agreement bound.

    Measures eps per side as the worst |mu - gap| over novel pairs, then for
    every (pair, side) whose gap clears eps + gamma compares the empirical
    sign-disagreement frequency with sigma_m^2 / (|gap| - eps - gamma)^2.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    bundle = world.fine_tuned
    feats, _ = sample_world_features(world, n_per_class, rng)
    ef = feats.mean(axis=0)

    txt, img = bundle_priors(bundle, prior_mode)
    pairs = _novel_pairs(world, graph)
    records = []
    eps_img = 0.0
    eps_txt = 0.0
    sigma_sq_max = 0.0
    t = bundle.prototypes_ft
    for i, j in pairs:
        delta_t = t[i] - t[j]
        mu = float(ef @ delta_t)
        m = feats @ delta_t
        sigma_sq = float(np.var(m))
        sigma_sq_max = max(sigma_sq_max, sigma_sq)
        gap_img = float(img.values[i] - img.values[j])
        gap_txt = float(txt.values[i] - txt.values[j])
        eps_img = max(eps_img, abs(mu - gap_img))
        eps_txt = max(eps_txt, abs(mu - gap_txt))
        records.append(
            {"pair": (i, j), "mu": mu, "gap_img": gap_img, "gap_txt": gap_txt, "sigma_sq": sigma_sq, "m": m}
        )

    qualifying = []
    pair_agreements = []
    for rec in records:
        for side, eps in (("img", eps_img), ("txt", eps_txt)):
            gap = rec[f"gap_{side}"]
            if abs(gap) <= eps + gamma:
                continue
            m = rec["m"]
            disagree = float(np.mean(np.sign(m) != np.sign(gap)))
            bound = min(rec["sigma_sq"] / (abs(gap) - eps - gamma) ** 2, 1.0)
            qualifying.append(
                {
                    "pair": rec["pair"],
                    "side": side,
                    "gap": gap,
                    "mu": rec["mu"],
                    "disagreement": disagree,
                    "bound": bound,
                    "n": int(m.shape[0]),
                }
            )
            pair_agreements.append(float(np.sign(rec["mu"]) == np.sign(gap)))

    # expected-margin sign vs gap sign over qualifying entries; the
    # sample-level frequencies live in the per-pair records
    rate = float(np.mean(pair_agreements)) if pair_agreements else 1.0
    return {
        "eps_img": eps_img,
        "eps_txt": eps_txt,
        "sigma_m_sq": sigma_sq_max,
        "sign_consistency_rate": rate,
        "n_qualifying": len(qualifying),
        "qualifying": qualifying,
        "gamma": gamma,
    }


def check_base_suppression(world: SyntheticWorld, graph: ConfusionGraph) -> dict:
    """Anchor-energy bounds on base-pair gaps and the base/novel gap contrast."""
    bundle = world.fine_tuned
    t0 = world.internals.t0
    t = bundle.prototypes_ft
    s_basis = world.internals.s_basis
    u_img = bundle.anchors.u_img
    u_txt = bundle.anchors.u_txt_zs

    kappa_img = float(np.linalg.norm(s_basis @ u_img))
    kappa_txt = float(np.linalg.norm(s_basis @ u_txt))
    u_txt_perp = u_txt - s_basis.T @ (s_basis @ u_txt)

    min_slack_img = math.inf
    min_slack_txt = math.inf
    for i, j in _base_pairs(world, graph):
        d0 = t0[i] - t0[j]
        dt = t[i] - t[j]
        gap_img = abs(float(u_img @ d0))
        bound_img = kappa_img * float(np.linalg.norm(s_basis @ d0))
        min_slack_img = min(min_slack_img, bound_img - gap_img)

        gap_txt = abs(float(u_txt @ dt))
        in_s = float(np.linalg.norm(s_basis @ dt))
        out_s = float(np.linalg.norm(dt - s_basis.T @ (s_basis @ dt)))
        bound_txt = kappa_txt * in_s + float(np.linalg.norm(u_txt_perp)) * out_s
        min_slack_txt = min(min_slack_txt, bound_txt - gap_txt)

    txt_tab, img_tab = bundle_priors(bundle, "plain")

    def mean_abs_gap(pairs):
        vals = [
            abs(
                (txt_tab.values[i] - txt_tab.values[j]) + (img_tab.values[i] - img_tab.values[j])
            )
            for i, j in pairs
        ]
        return float(np.mean(vals)) if vals else 0.0

    return {
        "kappa_img": kappa_img,
        "kappa_txt": kappa_txt,
        "min_slack_img": min_slack_img,
        "min_slack_txt": min_slack_txt,
        "base_gap_mean": mean_abs_gap(_base_pairs(world, graph)),
        "novel_gap_mean": mean_abs_gap(_novel_pairs(world, graph)),
    }


def check_gap_projections(world: SyntheticWorld, graph: ConfusionGraph) -> dict:
    """Gap-as-projection identities on the ground-truth internals.

    The image-side gap is literally an inner product with the zero-shot
    difference direction; the raw text-side gap decomposes into that inner
    product plus a deformation term bounded by the spectral norm of the
    deformation times the coefficient norms. The discrepancy introduced by
    prototype normalization is reported separately.
    """
    intern = world.internals
    bundle = world.fine_tuned
    t0, t_raw = intern.t0, intern.t_raw
    t = bundle.prototypes_ft
    u_img = bundle.anchors.u_img
    u_txt = bundle.anchors.u_txt_zs
    u_norm = float(np.linalg.norm(intern.deform_txt, ord=2))

    txt_tab, img_tab = bundle_priors(bundle, "plain")
    pairs = _novel_pairs(world, graph)
    image_residual = 0.0
    text_identity_residual = 0.0
    text_bound_ratio = 0.0
    normalization_discrepancy = 0.0
    for i, j in pairs:
        d0 = t0[i] - t0[j]
        gap_img = float(img_tab.values[i] - img_tab.values[j])
        image_residual = max(image_residual, abs(gap_img - float(u_img @ d0)))

        gap_txt_raw = float((t_raw[i] - t_raw[j]) @ u_txt)
        deform_term = float((intern.deform_txt @ (intern.text_coeff[i] - intern.text_coeff[j])) @ u_txt)
        text_identity_residual = max(
            text_identity_residual, abs(gap_txt_raw - float(d0 @ u_txt) - deform_term)
        )
        bound = u_norm * (
            float(np.linalg.norm(intern.text_coeff[i])) + float(np.linalg.norm(intern.text_coeff[j]))
        )
        resid = abs(gap_txt_raw - float(d0 @ u_txt))
        if bound > 0:
            text_bound_ratio = max(text_bound_ratio, resid / bound)
        elif resid > 1e-12:
            text_bound_ratio = math.inf

        gap_txt_normalized = float(txt_tab.values[i] - txt_tab.values[j])
        normalization_discrepancy = max(
            normalization_discrepancy, abs(gap_txt_normalized - gap_txt_raw)
        )
    return {
        "image_identity_residual": image_residual,
        "text_identity_residual": text_identity_residual,
        "text_bound_max_ratio": text_bound_ratio,
        "normalization_discrepancy": normalization_discrepancy,
        "deform_spectral_norm": u_norm,
    }


def golden_section_minimize(objective, lo: float, hi: float, tol: float = 1e-12) -> float:
    """Scalar minimizer of a unimodal objective on [lo, hi]."""
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc, fd = objective(c), objective(d)
    while abs(b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = objective(d)
    return 0.5 * (a + b)


def chebyshev_false_flip_bound(sigma_m: float, tau: float, eps_int: float, delta: float) -> float:
    """Variance bound on the probability of a weak margin under a strong prior."""
    slack = tau - eps_int - delta
    if slack <= 0:
        raise ValidationError("bound requires tau > eps_int + delta")
    return sigma_m**2 / slack**2


def check_false_flip_bound(
    world: SyntheticWorld,
    graph: ConfusionGraph,
    gates,
    gamma: float = 0.0,
    prior_mode: str = "plain",
    n_per_class: int = 1000,
    rng: np.random.Generator | None = None,
) -> dict:
    """Empirical frequency of gate-passing margins on true-class samples vs the bound.

    Event pairs are ordered novel edges whose composite gap clears the
    effective gate; for each, the frequency of margins at or below the
    evidence gate is measured over fresh samples of the pair's first class
    and compared with sigma_m^2 / (tau - eps_int - delta)^2.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    bundle = world.fine_tuned

    sign = check_sign_consistency(
        world, graph, prior_mode=prior_mode, gamma=max(gamma, 0.1), n_per_class=n_per_class, rng=rng
    )
    eps_novel = sign["eps_img"] + sign["eps_txt"]

    gaps = bundle_gaps(bundle, graph, prior_mode)
    beta_hat = gates.intercept.beta_hat
    delta_beta = 0.0
    base_ordered = [
        (i, j)
        for i, j in graph.ordered_pairs()
        if i in world.split.base_classes and j in world.split.base_classes
    ]
    if base_ordered:
        stats = estimate_margin_stats(bundle.features, bundle.prototypes_ft, graph, base_ordered)
        fitted = fit_intercept(stats, gaps, base_ordered)
        residuals = [stats.mu_hat[p] - gaps.gaps[p] for p in base_ordered]

        def objective(beta: float) -> float:
            return float(sum((r - beta) ** 2 for r in residuals))

        lo = min(residuals) - 1.0
        hi = max(residuals) + 1.0
        beta_star = golden_section_minimize(objective, lo, hi)
        delta_beta = abs(fitted.beta_hat - beta_star)
        if gates.intercept.mode == "explicit":
            beta_hat = fitted.beta_hat

    eps_int = eps_novel + delta_beta
    tau = gates.tau_eff + beta_hat
    slack = tau - eps_int - gates.delta
    applicable = slack > max(gamma, 0.0)

    feats, labels = sample_world_features(world, n_per_class, rng)
    novel = world.split.novel_classes
    event_pairs = [
        (i, j)
        for i, j in graph.ordered_pairs()
        if i in novel and j in novel and gaps.gaps[(i, j)] >= gates.tau_eff
    ]
    hits = 0
    trials = 0
    sigma_sq = 0.0
    t = bundle.prototypes_ft
    for i, j in event_pairs:
        m_all = feats @ (t[i] - t[j])
        sigma_sq = max(sigma_sq, float(np.var(m_all)))
        m_true = m_all[labels == i]
        hits += int(np.count_nonzero(m_true <= gates.delta))
        trials += int(m_true.shape[0])

    rate = (hits / trials) if trials else 0.0
    result = {
        "applicable": applicable,
        "empirical_false_flip_rate": rate,
        "chebyshev_bound": (sigma_sq / slack**2) if applicable else math.inf,
        "slack": slack,
        "eps_int": eps_int,
        "eps_novel": eps_novel,
        "delta_beta": delta_beta,
        "beta_hat": beta_hat,
        "sigma_m_sq": sigma_sq,
        "n_event_pairs": len(event_pairs),
        "n_trials": trials,
    }
    if not applicable:
        result["note"] = "bound not applicable"
    return result


# ---------------------------------------------------------------------------
# aggregated suite


@dataclass(frozen=True)
class TheoryReport:
    sign_consistency_rate: float
    eps_img_novel: float
    eps_txt_novel: float
    base_gap_mean: float
    novel_gap_mean: float
    sigma_m_sq: float
    empirical_false_flip_rate: float
    chebyshev_bound: float
    projection_residuals: dict
    delta_beta: float
    details: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "sign_consistency_rate": self.sign_consistency_rate,
            "eps_img_novel": self.eps_img_novel,
            "eps_txt_novel": self.eps_txt_novel,
            "base_gap_mean": self.base_gap_mean,
            "novel_gap_mean": self.novel_gap_mean,
            "sigma_m_sq": self.sigma_m_sq,
            "empirical_false_flip_rate": self.empirical_false_flip_rate,
            "chebyshev_bound": self.chebyshev_bound,
            "projection_residuals": self.projection_residuals,
            "delta_beta": self.delta_beta,
            "details": self.details,
        }


def run_theory_suite(
    config: SyntheticModelConfig,
    graph: ConfusionGraph | None = None,
    gates=None,
    gamma: float = 0.1,
    n_check_per_class: int = 1000,
) -> TheoryReport:
    """Generate a world and run every check; deterministic given the seed."""
    from nerp.corrector import GateConfig

    world = generate_world(config)
    if graph is None:
        graph = complete_graph(config.n_classes)
    ss = np.random.SeedSequence(config.seed + 1_000_003)
    rng_sign, rng_flip = (np.random.default_rng(c) for c in ss.spawn(2))

    sign = check_sign_consistency(
        world, graph, gamma=gamma, n_per_class=n_check_per_class, rng=rng_sign
    )
    suppression = check_base_suppression(world, graph)
    projections = check_gap_projections(world, graph)

    if gates is None:
        gaps = bundle_gaps(world.fine_tuned, graph, "plain")
        novel_vals = [
            gaps.gaps[(i, j)]
            for i, j in graph.ordered_pairs()
            if i in world.split.novel_classes and j in world.split.novel_classes
        ]
        tau_eff = float(np.percentile(novel_vals, 99)) if novel_vals else 1.0
        eps_guess = sign["eps_img"] + sign["eps_txt"]
        delta = max(0.0, (tau_eff - eps_guess) / 2.0)
        gates = GateConfig(tau_eff=tau_eff, delta=delta)

    flip = check_false_flip_bound(
        world, graph, gates, gamma=0.0, n_per_class=n_check_per_class, rng=rng_flip
    )

    return TheoryReport(
        sign_consistency_rate=sign["sign_consistency_rate"],
        eps_img_novel=sign["eps_img"],
        eps_txt_novel=sign["eps_txt"],
        base_gap_mean=suppression["base_gap_mean"],
        novel_gap_mean=suppression["novel_gap_mean"],
        sigma_m_sq=sign["sigma_m_sq"],
        empirical_false_flip_rate=flip["empirical_false_flip_rate"],
        chebyshev_bound=flip["chebyshev_bound"],
        projection_residuals=projections,
        delta_beta=flip["delta_beta"],
        details={
            "suppression": suppression,
            "false_flip": {k: v for k, v in flip.items() if k != "qualifying"},
            "n_qualifying_sign_pairs": sign["n_qualifying"],
            "gates": gates.to_json_dict(),
        },
    )


# ---------------------------------------------------------------------------
# calibration suite generation (shared geometry across fold worlds)


@dataclass(frozen=True)
class CalibrationSuite:
    main: SyntheticWorld
    fold_worlds: tuple[SyntheticWorld, ...]
    fold_classes: tuple[tuple[int, ...], ...]

    def fold_targets(self) -> list[DomainBundle]:
        """Per-fold pseudo-target bundle: the fold classes' samples."""
        out = []
        for world, fold in zip(self.fold_worlds, self.fold_classes):
            labels = world.fine_tuned.labels
            idx = np.nonzero(np.isin(labels, sorted(fold)))[0]
            out.append(world.fine_tuned.with_samples(idx))
        return out


def generate_calibration_suite(
    config: SyntheticModelConfig, n_folds: int, fold_bias: float | None = None
) -> CalibrationSuite:
    """A main world plus fold worlds sharing its zero-shot geometry.

    Consecutive base classes are paired into confusable (close-prototype)
    pairs; the pairs are partitioned into folds. Each fold world treats its
    fold's classes as pseudo-novel and plants directional bias on the
    fold's first pair, while the remaining close pairs stay unbiased: they
    exercise the prior gate on symmetric confusion exactly as base pairs do
    in the main world. The zero-shot prototypes, and hence the main world,
    are identical for every fold count, so calibration settings stay
    comparable.
    """
    from nerp.calibration import partition_folds

    config.validate()
    if fold_bias is None:
        if not config.planted_bias:
            raise ValidationError("fold_bias is required when the config plants no bias")
        fold_bias = float(np.mean([abs(b) for _, _, b in config.planted_bias]))

    base_pairs = [(2 * k, 2 * k + 1) for k in range(config.n_base // 2)]
    if n_folds > len(base_pairs):
        raise ValidationError(
            f"cannot emulate {n_folds} folds with {len(base_pairs)} confusable base pairs"
        )
    pair_folds = partition_folds(range(len(base_pairs)), n_folds, config.seed)

    closeness_pairs = [(i, j) for i, j, _ in config.planted_bias] + base_pairs
    seconds = [j for _, j in closeness_pairs]
    if len(set(seconds)) != len(seconds):
        raise ValidationError("closeness constraints collide; adjust the planted pairs")

    ss = np.random.SeedSequence(config.seed)
    rng_proto = np.random.default_rng(ss.spawn(1)[0])
    t0 = _sample_prototypes(
        config.n_classes,
        config.dim,
        config.n_base,
        closeness_pairs,
        config.pair_closeness,
        config.novel_subspace_overlap,
        rng_proto,
    )

    main = _build_world_on(t0, config, list(range(config.n_base)), config.planted_bias, config.seed)
    fold_worlds = []
    fold_classes = []
    for e, pair_ids in enumerate(pair_folds):
        fold = sorted(c for k in pair_ids for c in base_pairs[k])
        fold_classes.append(tuple(fold))
        biased = base_pairs[min(pair_ids)]
        base_e = [c for c in range(config.n_base) if c not in fold]
        fold_worlds.append(
            _build_world_on(
                t0, config, base_e, ((biased[0], biased[1], fold_bias),), config.seed + 7919 * (e + 1)
            )
        )
    return CalibrationSuite(main, tuple(fold_worlds), tuple(fold_classes))


def _build_world_on(
    t0: np.ndarray,
    config: SyntheticModelConfig,
    base_classes: list[int],
    planted: tuple[tuple[int, int, float], ...],
    seed: int,
) -> SyntheticWorld:
    """World generation on fixed zero-shot prototypes with an explicit base set."""
    dim = config.dim
    n_classes = config.n_classes
    base = sorted(base_classes)
    novel = sorted(set(range(n_classes)) - set(base))
    split = DatasetSplit(frozenset(base), frozenset(novel))
    for i, j, _ in planted:
        if i not in split.novel_classes or j not in split.novel_classes:
            raise ValidationError("planted pairs must join two novel classes of the world")

    ss = np.random.SeedSequence(seed + 104729)
    rng_deform, rng_feat, rng_anchor = (np.random.default_rng(c) for c in ss.spawn(3))

    s_basis = orthonormal_rows(t0[base])
    v_basis = (
        orthonormal_rows(t0[novel[1:]] - t0[novel[0]]) if len(novel) >= 2 else np.zeros((0, dim))
    )
    rank = min(config.rank, len(base))
    mix = np.linalg.qr(rng_deform.standard_normal((len(base), rank)))[0]
    u_cols = s_basis.T @ mix
    if config.subspace_leak > 0:
        leak = rng_deform.standard_normal((dim, rank))
        leak -= s_basis.T @ (s_basis @ leak)
        leak /= np.linalg.norm(leak, axis=0, keepdims=True)
        u_cols = math.sqrt(1 - config.subspace_leak) * u_cols + math.sqrt(config.subspace_leak) * leak

    scales = np.where(
        np.isin(np.arange(n_classes), base), config.deform_scale_base, config.deform_scale_novel
    ).astype(np.float64)
    text_coeff = rng_deform.standard_normal((n_classes, rank))
    text_coeff /= np.linalg.norm(text_coeff, axis=1, keepdims=True)
    text_coeff *= scales[:, None]
    t_raw = t0 + text_coeff @ u_cols.T
    t = t_raw / np.linalg.norm(t_raw, axis=1, keepdims=True)

    resultant = vmf_mean_cosine(config.kappa, dim)
    shrink = 1.0 / np.sqrt(1.0 + scales**2)
    shift = _solve_domain_shift(t0, planted, resultant * shrink)
    mean_dirs = t0 + shift
    mean_dirs = mean_dirs / np.linalg.norm(mean_dirs, axis=1, keepdims=True)

    internals = WorldInternals(
        config=config,
        t0=t0,
        t_raw=t_raw,
        s_basis=s_basis,
        v_basis=v_basis,
        deform_txt=u_cols,
        deform_img=u_cols,
        text_coeff=text_coeff,
        mean_dirs=mean_dirs,
        class_scales=scales,
        mean_resultant=resultant,
    )
    f0, f, labels = _sample_deformed_features(internals, config.n_samples_per_class, rng_feat)

    joint = orthonormal_rows(np.vstack([s_basis, v_basis]))

    def filler() -> np.ndarray:
        g = rng_anchor.standard_normal(dim)
        g -= joint.T @ (joint @ g)
        norm = np.linalg.norm(g)
        if norm < 1e-9:
            g = rng_anchor.standard_normal(dim)
            g -= v_basis.T @ (v_basis @ g)
            norm = np.linalg.norm(g)
        return g / norm

    def v_component(mean_vec: np.ndarray) -> np.ndarray:
        if v_basis.shape[0] == 0:
            return np.zeros(dim)
        return v_basis.T @ (v_basis @ mean_vec)

    filler_img = filler()
    filler_txt = filler()
    u_img_ft = _capped_anchor(v_component(f.mean(axis=0)), filler_img, s_basis, config.anchor_cap_img)
    u_img_zs = _capped_anchor(v_component(f0.mean(axis=0)), filler_img, s_basis, config.anchor_cap_img)
    u_txt_zs = _capped_anchor(v_component(f.mean(axis=0)), filler_txt, s_basis, config.anchor_cap_txt)
    anchor_scale = (
        config.anchor_deform_scale
        if config.anchor_deform_scale is not None
        else config.deform_scale_base
    )
    anchor_coeff = rng_anchor.standard_normal(rank)
    anchor_coeff = anchor_coeff / np.linalg.norm(anchor_coeff) * anchor_scale
    u_txt_ft = _unit(u_txt_zs + u_cols @ anchor_coeff)

    class_names = tuple(f"class_{c:03d}" for c in range(n_classes))
    zero_shot = DomainBundle(
        domain_id=f"synthetic-{seed}-zs",
        features=f0,
        prototypes_ft=t0,
        prototypes_zs=t0,
        anchors=NeutralAnchors(u_txt_zs=u_txt_zs, u_txt_ft=u_txt_zs, u_img=u_img_zs),
        class_names=class_names,
        labels=labels,
    )
    fine_tuned = DomainBundle(
        domain_id=f"synthetic-{seed}-ft",
        features=f,
        prototypes_ft=t,
        prototypes_zs=t0,
        anchors=NeutralAnchors(u_txt_zs=u_txt_zs, u_txt_ft=u_txt_ft, u_img=u_img_ft),
        class_names=class_names,
        labels=labels,
    )
    zero_shot.validate()
    fine_tuned.validate()
    return SyntheticWorld(zero_shot, fine_tuned, split, internals)


def load_config(path) -> SyntheticModelConfig:
    try:
        data = json.loads(open(path).read())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed simulator config {path}: {exc}") from exc
    try:
        return SyntheticModelConfig.from_json_dict(data)
    except TypeError as exc:
        raise ValidationError(f"bad simulator config field: {exc}") from exc
