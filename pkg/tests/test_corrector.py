import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_bundle, unit_rows
from nerp.corrector import (
    GateConfig,
    apply_correction,
    batch_correct,
    in_prior_dominated_region,
    surrogate_score,
)
from nerp.errors import ValidationError
from nerp.graph import ConfusionGraph, build_knn_graph
from nerp.margins import InterceptEstimate
from nerp.priors import bundle_gaps


def straight_line_correct(logits, gaps, graph, gates):
    """Independent per-sample implementation of the decision rule.

    Plain loops and explicit max tracking; no shared code with the package
    beyond the data structures.
    """
    i = 0
    best = -np.inf
    for c, v in enumerate(logits):
        if v > best:
            best, i = v, c
    kept = []
    for j in graph.neighbors(i):
        sigma = gaps.gaps[(i, j)]
        m = logits[i] - logits[j]
        if sigma >= gates.tau_eff and m <= gates.delta:
            kept.append(j)
    if not kept:
        return i, i, False
    j_star = kept[0]
    for j in kept[1:]:
        if logits[j] > logits[j_star]:
            j_star = j
    new_logits = list(logits)
    new_logits[j_star] = max(new_logits[j_star], logits[i] + gates.epsilon0)
    corrected = 0
    best = -np.inf
    for c, v in enumerate(new_logits):
        if v > best:
            best, corrected = v, c
    return i, corrected, True


def random_instance(rng, n_classes=6, n_samples=40):
    """Random logits, gaps on a random graph; gaps in [-1, 1]."""
    protos = unit_rows(rng.standard_normal((n_classes, 8)))
    graph = build_knn_graph(protos, rng.integers(1, n_classes - 1))
    gaps = {}
    for i, j in graph.edges():
        v = float(rng.uniform(-1, 1))
        gaps[(i, j)] = v
        gaps[(j, i)] = -v
    from nerp.priors import PairGapTable

    logits = rng.uniform(-1, 1, (n_samples, n_classes))
    return logits, PairGapTable("plain", gaps), graph


class TestSurrogateAndRegion:
    def test_surrogate_direct_sum(self):
        assert surrogate_score(0.05, 0.5, -0.1) == pytest.approx(0.45)
        assert surrogate_score(0.0, 0.0, 0.0) == 0.0
        assert surrogate_score(-0.3, 0.3, 0.0) == pytest.approx(0.0)

    def test_region_membership(self):
        gates = GateConfig(tau_eff=0.4, delta=0.1)
        assert in_prior_dominated_region(0.5, 0.05, gates)
        assert not in_prior_dominated_region(0.3, 0.05, gates)
        assert not in_prior_dominated_region(0.5, 0.2, gates)

    def test_region_boundary_inclusive(self):
        gates = GateConfig(tau_eff=0.4, delta=0.1)
        assert in_prior_dominated_region(0.4, 0.1, gates)

    def test_epsilon0_must_be_positive(self):
        with pytest.raises(ValidationError):
            GateConfig(tau_eff=0.0, delta=0.0, epsilon0=0.0)


class TestApplyCorrection:
    def setup_method(self):
        self.graph = ConfusionGraph.from_edges(3, [(0, 1), (0, 2)])
        from nerp.priors import PairGapTable

        self.gaps = PairGapTable(
            "plain", {(0, 1): 0.5, (1, 0): -0.5, (0, 2): 0.05, (2, 0): -0.05}
        )

    def test_forced_flip(self):
        logits = np.array([0.90, 0.88, 0.50])
        gates = GateConfig(tau_eff=0.4, delta=0.1, epsilon0=1e-4)
        out = apply_correction(logits, self.gaps, self.graph, gates)
        assert out.flipped and out.original_top1 == 0 and out.corrected_top1 == 1
        assert 1 in [c for c, _, _ in out.flip_target_candidates]

    def test_identity_when_nothing_passes(self):
        logits = np.array([0.90, 0.88, 0.50])
        gates = GateConfig(tau_eff=0.99, delta=0.1)
        out = apply_correction(logits, self.gaps, self.graph, gates)
        assert not out.flipped and out.corrected_top1 == 0
        assert out.flip_target_candidates == ()

    def test_argmax_among_retained(self):
        from nerp.priors import PairGapTable

        gaps = PairGapTable(
            "plain", {(0, 1): 0.5, (1, 0): -0.5, (0, 2): 0.5, (2, 0): -0.5}
        )
        logits = np.array([0.90, 0.88, 0.50])
        gates = GateConfig(tau_eff=0.4, delta=0.5)
        out = apply_correction(logits, gaps, self.graph, gates)
        assert out.flipped and out.corrected_top1 == 1  # 0.88 > 0.50

    def test_retained_ties_break_to_lowest_class(self):
        from nerp.priors import PairGapTable

        gaps = PairGapTable(
            "plain", {(0, 1): 0.5, (1, 0): -0.5, (0, 2): 0.5, (2, 0): -0.5}
        )
        logits = np.array([0.90, 0.70, 0.70])
        gates = GateConfig(tau_eff=0.4, delta=0.5)
        out = apply_correction(logits, gaps, self.graph, gates)
        assert out.corrected_top1 == 1

    def test_tie_break_raises_logit_by_epsilon(self):
        logits = np.array([0.90, 0.88, 0.50])
        gates = GateConfig(tau_eff=0.4, delta=0.1, epsilon0=0.5)
        out = apply_correction(logits, self.gaps, self.graph, gates)
        assert out.flipped and out.corrected_top1 == 1

    def test_input_argmax_tie_resolves_to_lowest(self):
        from nerp.priors import PairGapTable

        graph = ConfusionGraph.from_edges(2, [(0, 1)])
        gaps = PairGapTable("plain", {(0, 1): 1.0, (1, 0): -1.0})
        logits = np.array([0.7, 0.7])
        out = apply_correction(logits, gaps, graph, GateConfig(tau_eff=0.5, delta=0.5))
        assert out.original_top1 == 0 and out.corrected_top1 == 1

    def test_surrogate_scores_reported_for_all_neighbors(self):
        logits = np.array([0.90, 0.88, 0.50])
        gates = GateConfig(
            tau_eff=0.99,
            delta=0.1,
            intercept=InterceptEstimate(beta_hat=-0.1, n_pairs_used=1),
        )
        out = apply_correction(logits, self.gaps, self.graph, gates)
        assert out.surrogate_scores[(0, 1)] == pytest.approx(0.02 + 0.5 - 0.1)
        assert out.surrogate_scores[(0, 2)] == pytest.approx(0.40 + 0.05 - 0.1)

    def test_missing_gap_entry_errors(self):
        from nerp.priors import PairGapTable

        gaps = PairGapTable("plain", {(0, 1): 0.5, (1, 0): -0.5})
        with pytest.raises(ValidationError, match="no entry"):
            apply_correction(
                np.array([0.9, 0.1, 0.0]), gaps, self.graph, GateConfig(0.0, 1.0)
            )


class TestBatchCorrect:
    def test_blocking_gate_changes_nothing(self, rng):
        bundle = random_bundle(rng, n_samples=30, n_classes=5, dim=8)
        graph = build_knn_graph(bundle.prototypes_zs, 2)
        gaps = bundle_gaps(bundle, graph, "plain")
        gates = GateConfig(tau_eff=gaps.max_abs() + 1.0, delta=2.0)
        outcomes, summary = batch_correct(bundle, gaps, graph, gates)
        assert summary.flips == 0
        assert summary.accuracy_before == summary.accuracy_after
        assert all(not o.flipped for o in outcomes)

    def test_pass_everything_gates_flip_to_max_logit_neighbor(self, rng):
        bundle = random_bundle(rng, n_samples=25, n_classes=5, dim=8)
        graph = build_knn_graph(bundle.prototypes_zs, 2)
        gaps = bundle_gaps(bundle, graph, "plain")
        gates = GateConfig(tau_eff=-8.0, delta=2.0)
        logits = bundle.features @ bundle.prototypes_ft.T
        outcomes, summary = batch_correct(bundle, gaps, graph, gates)
        assert summary.flips == summary.n_samples
        for o in outcomes:
            neigh = graph.neighbors(o.original_top1)
            best = max(neigh, key=lambda j: (logits[o.sample_index, j], -j))
            assert o.flipped and o.corrected_top1 == best

    def test_matches_straight_line_oracle_on_simulator_output(self):
        from nerp.simulator import SyntheticModelConfig, generate_world

        config = SyntheticModelConfig(
            n_samples_per_class=10,
            planted_bias=((10, 11, 0.25),),
            seed=7,
        )
        world = generate_world(config)
        bundle = world.fine_tuned
        graph = build_knn_graph(bundle.prototypes_zs, 3)
        gaps = bundle_gaps(bundle, graph, "plain")
        gates = GateConfig(tau_eff=0.3, delta=0.35)
        outcomes, summary = batch_correct(bundle, gaps, graph, gates)
        logits = bundle.features @ bundle.prototypes_ft.T
        flips = 0
        wrong = 0
        correct_before = correct_after = 0
        for s in range(bundle.n_samples):
            orig, corrected, flipped = straight_line_correct(
                logits[s], gaps, graph, gates
            )
            assert outcomes[s].original_top1 == orig
            assert outcomes[s].corrected_top1 == corrected
            assert outcomes[s].flipped == flipped
            flips += flipped
            label = int(bundle.labels[s])
            correct_before += orig == label
            correct_after += corrected == label
            wrong += flipped and corrected != label
        assert summary.flips == flips
        assert summary.accuracy_before == pytest.approx(correct_before / bundle.n_samples)
        assert summary.accuracy_after == pytest.approx(correct_after / bundle.n_samples)
        assert summary.fer == pytest.approx(wrong / flips if flips else 0.0)
        assert flips > 0

    def test_order_invariance(self, rng):
        bundle = random_bundle(rng, n_samples=40, n_classes=6, dim=8)
        graph = build_knn_graph(bundle.prototypes_zs, 2)
        gaps = bundle_gaps(bundle, graph, "plain")
        gates = GateConfig(tau_eff=-0.05, delta=0.3)
        outcomes, _ = batch_correct(bundle, gaps, graph, gates)
        perm = rng.permutation(bundle.n_samples)
        shuffled = bundle.with_samples(perm)
        outcomes_shuffled, _ = batch_correct(shuffled, gaps, graph, gates)
        for new_pos, old_pos in enumerate(perm):
            assert outcomes_shuffled[new_pos].corrected_top1 == outcomes[old_pos].corrected_top1

    def test_empty_bundle_rejected(self, rng):
        bundle = random_bundle(rng, n_samples=3)
        empty = bundle.with_samples(np.array([], dtype=np.int64))
        graph = build_knn_graph(bundle.prototypes_zs, 2)
        gaps = bundle_gaps(bundle, graph, "plain")
        with pytest.raises(ValidationError, match="nonempty"):
            batch_correct(empty, gaps, graph, GateConfig(0.0, 0.0))


class TestCorrectionProperties:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_locality_and_identity(self, seed):
        rng = np.random.default_rng(seed)
        logits, gaps, graph = random_instance(rng, n_samples=15)
        gates = GateConfig(
            tau_eff=float(rng.uniform(-1, 1)), delta=float(rng.uniform(-1, 1))
        )
        for s in range(logits.shape[0]):
            out = apply_correction(logits[s], gaps, graph, gates)
            assert out.corrected_top1 == out.original_top1 or out.corrected_top1 in graph.neighbors(
                out.original_top1
            )
            if not out.flipped:
                assert out.corrected_top1 == out.original_top1

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_monotone_in_delta_and_tau(self, seed):
        rng = np.random.default_rng(seed)
        logits, gaps, graph = random_instance(rng, n_samples=25)

        def flipped_set(tau, delta):
            gates = GateConfig(tau_eff=tau, delta=delta)
            return {
                s
                for s in range(logits.shape[0])
                if apply_correction(logits[s], gaps, graph, gates).flipped
            }

        tau = float(rng.uniform(-1, 1))
        deltas = sorted(rng.uniform(-1, 1, 3))
        sets = [flipped_set(tau, d) for d in deltas]
        assert sets[0] <= sets[1] <= sets[2]

        delta = float(rng.uniform(-1, 1))
        taus = sorted(rng.uniform(-1, 1, 3))
        sets = [flipped_set(t, delta) for t in taus]
        assert sets[0] >= sets[1] >= sets[2]

    def test_identity_gate_bound(self, rng):
        logits, gaps, graph = random_instance(rng)
        gates = GateConfig(tau_eff=4.001, delta=2.0)
        for s in range(logits.shape[0]):
            assert not apply_correction(logits[s], gaps, graph, gates).flipped

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_flip_tie_break_raises_winner_above_original(self, seed):
        rng = np.random.default_rng(seed)
        logits, gaps, graph = random_instance(rng, n_samples=10)
        gates = GateConfig(tau_eff=-1.5, delta=2.0, epsilon0=1e-4)
        for s in range(logits.shape[0]):
            out = apply_correction(logits[s], gaps, graph, gates)
            if out.flipped:
                i, j = out.original_top1, out.corrected_top1
                updated = max(logits[s, j], logits[s, i] + gates.epsilon0)
                assert updated >= logits[s, i] + gates.epsilon0 or updated == logits[s, j]
