import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import unit_rows
from nerp.errors import ValidationError
from nerp.graph import ConfusionGraph, build_knn_graph, load_edge_list, save_edge_list


def brute_force_knn_edges(protos: np.ndarray, k: int) -> set:
    """Independent oracle: all-pairs cosine, top-k per row, symmetrized union."""
    n = protos.shape[0]
    edges = set()
    for i in range(n):
        sims = [(float(protos[i] @ protos[j]), j) for j in range(n) if j != i]
        # highest similarity first; ties -> lowest index
        sims.sort(key=lambda t: (-t[0], t[1]))
        for _, j in sims[:k]:
            edges.add((min(i, j), max(i, j)))
    return edges


class TestEdgeList:
    def test_symmetrized_union(self, tmp_path):
        path = tmp_path / "edges.json"
        path.write_text(json.dumps([[0, 1], [1, 0], [2, 0]]))
        g = load_edge_list(path, 3)
        assert g.adjacency == ((1, 2), (0,), (0,))

    def test_self_edges_dropped(self, tmp_path):
        path = tmp_path / "edges.json"
        path.write_text(json.dumps([[0, 0]]))
        g = load_edge_list(path, 2)
        assert g.adjacency == ((), ())

    def test_out_of_range_index(self, tmp_path):
        path = tmp_path / "edges.json"
        path.write_text(json.dumps([[0, 5]]))
        with pytest.raises(ValidationError, match="out of range"):
            load_edge_list(path, 3)

    def test_name_pairs_resolved(self, tmp_path):
        path = tmp_path / "edges.json"
        path.write_text(json.dumps([["cat", "dog"]]))
        g = load_edge_list(path, 3, class_names=["cat", "dog", "bird"])
        assert g.adjacency == ((1,), (0,), ())

    def test_unknown_name_errors(self, tmp_path):
        path = tmp_path / "edges.json"
        path.write_text(json.dumps([["cat", "wolf"]]))
        with pytest.raises(ValidationError, match="unknown class name"):
            load_edge_list(path, 2, class_names=["cat", "dog"])

    def test_save_load_round_trip(self, tmp_path):
        g = ConfusionGraph.from_edges(4, [(0, 1), (2, 3), (1, 3)])
        save_edge_list(g, tmp_path / "e.json")
        g2 = load_edge_list(tmp_path / "e.json", 4)
        assert g == g2


class TestKnn:
    def test_constructed_nearest_pair(self):
        e = np.eye(4)[:3]
        extra = np.array([1.0, 0.1, 0.0, 0.0])
        protos = np.vstack([e, extra / np.linalg.norm(extra)])
        g = build_knn_graph(protos, k=1)
        assert 3 in g.neighbors(0) and 0 in g.neighbors(3)

    def test_ties_break_to_lowest_index(self):
        g = build_knn_graph(np.eye(3), k=1)
        # every class sees similarity 0 to both others: picks the lowest index
        assert g.adjacency == ((1, 2), (0,), (0,))
        for i in range(3):
            for j in g.neighbors(i):
                assert i in g.neighbors(j)

    def test_matches_brute_force_oracle(self, rng):
        protos = unit_rows(rng.standard_normal((10, 6)))
        g = build_knn_graph(protos, k=3)
        assert set(g.edges()) == brute_force_knn_edges(protos, 3)

    def test_k_out_of_range(self, rng):
        protos = unit_rows(rng.standard_normal((4, 3)))
        for k in (0, 4, 7):
            with pytest.raises(ValidationError):
                build_knn_graph(protos, k)

    def test_row_permutation_invariance(self, rng):
        protos = unit_rows(rng.standard_normal((8, 5)))
        g = build_knn_graph(protos, k=2)
        perm = rng.permutation(8)
        g2 = build_knn_graph(protos[perm], k=2)
        relabeled = {(min(perm[i], perm[j]), max(perm[i], perm[j])) for i, j in g2.edges()}
        # ties are measure-zero for random inputs, so relabeling matches exactly
        assert set(g.edges()) == relabeled


class TestGraphProperties:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(3, 12), k=st.integers(1, 4))
    def test_symmetry_irreflexivity_degree(self, seed, n, k):
        rng = np.random.default_rng(seed)
        k = min(k, n - 1)
        protos = unit_rows(rng.standard_normal((n, 5)))
        g = build_knn_graph(protos, k)
        for i in range(n):
            assert i not in g.neighbors(i)
            for j in g.neighbors(i):
                assert i in g.neighbors(j)
            assert k <= len(g.neighbors(i)) <= n - 1
