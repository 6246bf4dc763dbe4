#!/usr/bin/env python3
"""
Test suite for radius graph construction
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from detector_errors import ParameterError
from graph_builder import SpatialHash, brute_force_graph, build_graph, format_edge_list, write_edge_list
from pointcloud_io import PointCloud


def _cloud(seed, count, extent=8.0):
    return np.random.default_rng(seed).uniform(-extent, extent, (count, 3))


class TestBuildGraph:
    """반경 그래프 테스트"""

    def test_collinear_points(self):
        graph = build_graph(np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]]), radius=1.5)
        assert [graph.neighbors(u).tolist() for u in range(3)] == [[1], [0, 2], [1]]
        assert graph.neighbor_offsets(1).tolist() == [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for seed in range(20):
            positions = _cloud(seed, int(rng.integers(50, 2001)))
            graph = build_graph(positions, radius=1.0, max_neighbors=None)
            assert graph.edge_set() == brute_force_graph(positions, 1.0).edge_set()

    def test_structure(self):
        positions = _cloud(1, 800, 5.0)
        graph = build_graph(PointCloud.from_arrays(positions, np.zeros(800)), radius=1.2)
        assert np.all(graph.edges_u != graph.edges_v)
        lengths = np.linalg.norm(graph.offsets, axis=1)
        assert np.all(lengths <= 1.2 + 1e-9)
        assert np.allclose(graph.offsets, positions[graph.edges_v] - positions[graph.edges_u], atol=1e-12)
        for u in range(0, 800, 37):
            neighbors = graph.neighbors(u)
            assert np.all(np.diff(neighbors) > 0)
        assert graph.degrees().sum() == graph.num_edges

    def test_symmetric_without_cap(self):
        graph = build_graph(_cloud(2, 500, 4.0), radius=1.0, max_neighbors=None)
        edges = graph.edge_set()
        assert all((v, u) in edges for u, v in edges)

    def test_permutation_equivariance(self):
        positions = _cloud(3, 600, 5.0)
        perm = np.random.default_rng(3).permutation(600)
        original = build_graph(positions, radius=1.1, max_neighbors=None).edge_set()
        permuted = build_graph(positions[perm], radius=1.1, max_neighbors=None).edge_set()
        assert {(int(perm[u]), int(perm[v])) for u, v in permuted} == original

    def test_neighbor_cap_keeps_nearest(self):
        positions = _cloud(4, 600, 3.0)
        full = brute_force_graph(positions, 1.5)
        capped = build_graph(positions, radius=1.5, max_neighbors=8)
        assert np.all(capped.degrees() <= 8)
        for u in range(600):
            kept = capped.neighbors(u)
            dropped = np.setdiff1d(full.neighbors(u), kept)
            if kept.size and dropped.size:
                kept_far = np.max(np.linalg.norm(positions[kept] - positions[u], axis=1))
                dropped_near = np.min(np.linalg.norm(positions[dropped] - positions[u], axis=1))
                assert dropped_near >= kept_far
            assert kept.size == min(8, full.neighbors(u).size)

    def test_cap_ties_prefer_lower_index(self):
        positions = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
        graph = build_graph(positions, radius=1.5, max_neighbors=2)
        assert graph.neighbors(0).tolist() == [1, 2]

    def test_isolated_vertex(self):
        graph = build_graph(np.array([[0.0, 0, 0], [0.5, 0, 0], [10.0, 0, 0]]), radius=1.0)
        assert graph.neighbors(2).size == 0
        assert graph.degrees().tolist() == [1, 1, 0]

    def test_empty_input(self):
        graph = build_graph(np.zeros((0, 3)))
        assert graph.num_vertices == 0
        assert graph.num_edges == 0

    def test_seed_does_not_matter(self):
        positions = _cloud(5, 300, 3.0)
        a = build_graph(positions, radius=1.0, max_neighbors=4, seed=1)
        b = build_graph(positions, radius=1.0, max_neighbors=4, seed=2)
        assert a.edge_set() == b.edge_set()

    @pytest.mark.parametrize("radius,max_neighbors", [(0.0, 5), (-1.0, 5), (1.0, 0)])
    def test_invalid_arguments(self, radius, max_neighbors):
        with pytest.raises(ParameterError):
            build_graph(np.zeros((2, 3)), radius=radius, max_neighbors=max_neighbors)


class TestSpatialHash:
    """spatial hash 질의 테스트"""

    def test_query_matches_scan(self):
        positions = _cloud(6, 400, 4.0)
        table = SpatialHash(positions, 1.0)
        for u in range(0, 400, 41):
            expected = np.nonzero(np.linalg.norm(positions - positions[u], axis=1) <= 1.0)[0]
            assert table.query(positions[u], 1.0).tolist() == expected.tolist()


class TestEdgeList:
    """edge list 파일 테스트"""

    def test_format(self, tmp_path):
        graph = build_graph(np.array([[0.0, 0, 0], [1.0, 0, 0]]), radius=1.5)
        text = format_edge_list(graph)
        assert text == "2\n0 1 1.000000 0.000000 0.000000\n1 0 -1.000000 0.000000 0.000000\n"
        assert write_edge_list(tmp_path / "edges.txt", graph).read_text() == text
