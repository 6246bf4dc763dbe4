#!/usr/bin/env python3
"""
Radius Graph Builder for gatdet
spatial hash (cell = radius, 27 cell 탐색) 기반 고정 반경 이웃 그래프
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Set, Tuple, Union

import numpy as np

from detector_errors import ParameterError
from pointcloud_io import PointCloud

logger = logging.getLogger("gatdet-graph")

DEFAULT_RADIUS = 1.8
DEFAULT_MAX_NEIGHBORS = 256

_CELL_OFFSETS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
                         dtype=np.int64)


class SpatialHash:
    """정수 cell 좌표 → 포함된 점 index"""

    def __init__(self, positions: np.ndarray, cell_edge: float):
        if not cell_edge > 0:
            raise ParameterError(f"cell edge must be positive, got {cell_edge}")
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.cell_edge = float(cell_edge)
        keys = np.floor(self.positions / self.cell_edge).astype(np.int64)
        if keys.shape[0]:
            self.cells, inverse = np.unique(keys, axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
        else:
            self.cells, inverse = np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
        self.order = np.argsort(inverse, kind="stable")
        self.counts = np.bincount(inverse, minlength=self.cells.shape[0])
        self.starts = np.concatenate([[0], np.cumsum(self.counts)[:-1]]).astype(np.int64)
        self.index: Dict[Tuple[int, int, int], int] = {tuple(cell): i for i, cell in enumerate(self.cells.tolist())}

    def __len__(self) -> int:
        return self.cells.shape[0]

    def members(self, cell: Tuple[int, int, int]) -> np.ndarray:
        slot = self.index.get(tuple(cell))
        if slot is None:
            return np.zeros(0, dtype=np.int64)
        return self.order[self.starts[slot]:self.starts[slot] + self.counts[slot]]

    def query(self, point: np.ndarray, radius: float) -> np.ndarray:
        """point 에서 radius 이내 점 index (오름차순)"""
        base = np.floor(np.asarray(point, dtype=np.float64) / self.cell_edge).astype(np.int64)
        candidates = np.concatenate([self.members(tuple(base + offset)) for offset in _CELL_OFFSETS])
        diff = self.positions[candidates] - point
        return np.sort(candidates[np.sum(diff * diff, axis=1) <= radius * radius])

    def candidate_pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        """인접 cell 쌍의 모든 점 쌍 (u, v)"""
        if len(self) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
        cell_a, cell_b = [], []
        for offset in _CELL_OFFSETS:
            slots = [self.index.get(key) for key in map(tuple, (self.cells + offset).tolist())]
            found = np.array([s is not None for s in slots])
            cell_a.append(np.nonzero(found)[0])
            cell_b.append(np.array([s for s in slots if s is not None], dtype=np.int64))
        cell_a, cell_b = np.concatenate(cell_a), np.concatenate(cell_b)

        count_a, count_b = self.counts[cell_a], self.counts[cell_b]
        sizes = count_a * count_b
        pair = np.repeat(np.arange(cell_a.shape[0]), sizes)
        local = np.arange(int(sizes.sum())) - np.repeat(np.cumsum(sizes) - sizes, sizes)
        first = self.order[self.starts[cell_a][pair] + local // count_b[pair]]
        second = self.order[self.starts[cell_b][pair] + local % count_b[pair]]
        return first, second


@dataclass
class Graph:
    """(u, v) 로 정렬된 방향 간선과 오프셋 δx = x_v − x_u"""

    positions: np.ndarray
    edges_u: np.ndarray
    edges_v: np.ndarray
    offsets: np.ndarray
    radius: float
    max_neighbors: Optional[int] = None

    def __post_init__(self):
        self.row_splits = np.concatenate(
            [[0], np.cumsum(np.bincount(self.edges_u, minlength=self.num_vertices))]).astype(np.int64)

    @property
    def num_vertices(self) -> int:
        return self.positions.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges_u.shape[0]

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_splits)

    def neighbors(self, u: int) -> np.ndarray:
        return self.edges_v[self.row_splits[u]:self.row_splits[u + 1]]

    def neighbor_offsets(self, u: int) -> np.ndarray:
        return self.offsets[self.row_splits[u]:self.row_splits[u + 1]]

    def edge_set(self) -> Set[Tuple[int, int]]:
        return set(zip(self.edges_u.tolist(), self.edges_v.tolist()))


def graph_from_edges(positions: np.ndarray, edges_u: np.ndarray, edges_v: np.ndarray, radius: float,
                     max_neighbors: Optional[int]) -> Graph:
    order = np.lexsort((edges_v, edges_u))
    edges_u, edges_v = edges_u[order], edges_v[order]
    return Graph(positions, edges_u, edges_v, positions[edges_v] - positions[edges_u], radius, max_neighbors)


def build_graph(cloud: Union[PointCloud, np.ndarray], radius: float = DEFAULT_RADIUS,
                max_neighbors: Optional[int] = DEFAULT_MAX_NEIGHBORS, seed: int = 0) -> Graph:
    """반경 이내 이웃 그래프; 이웃이 max_neighbors 보다 많으면 가까운 순 (동률은 낮은 index)으로 자름"""
    # seed 는 동률 처리에 쓰이지 않음 (index 순으로 결정)
    del seed
    positions = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    if not radius > 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    if max_neighbors is not None and max_neighbors < 1:
        raise ParameterError(f"max_neighbors must be at least 1, got {max_neighbors}")

    first, second = SpatialHash(positions, radius).candidate_pairs()
    diff = positions[second] - positions[first]
    squared = np.sum(diff * diff, axis=1)
    keep = (first != second) & (squared <= radius * radius)
    edges_u, edges_v, squared = first[keep], second[keep], squared[keep]

    if max_neighbors is not None and edges_u.size:
        order = np.lexsort((edges_v, squared, edges_u))
        edges_u, edges_v = edges_u[order], edges_v[order]
        group_start = np.searchsorted(edges_u, edges_u, side="left")
        rank = np.arange(edges_u.shape[0]) - group_start
        truncated = rank < max_neighbors
        if not np.all(truncated):
            logger.debug(f"neighbor cap {max_neighbors} dropped {int((~truncated).sum())} edges")
        edges_u, edges_v = edges_u[truncated], edges_v[truncated]

    graph = graph_from_edges(positions, edges_u, edges_v, float(radius), max_neighbors)
    logger.debug(f"graph: {graph.num_vertices} vertices, {graph.num_edges} edges (r={radius})")
    return graph


def brute_force_graph(positions: np.ndarray, radius: float) -> Graph:
    """O(N²) 전체 쌍 거리 비교 기준 구현"""
    positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    diff = positions[None, :, :] - positions[:, None, :]
    squared = np.sum(diff * diff, axis=2)
    within = squared <= radius * radius
    np.fill_diagonal(within, False)
    edges_u, edges_v = np.nonzero(within)
    return graph_from_edges(positions, edges_u.astype(np.int64), edges_v.astype(np.int64), float(radius), None)


def format_edge_list(graph: Graph) -> str:
    """첫 줄 vertex 수, 이후 "u v dx dy dz" 줄"""
    lines = [str(graph.num_vertices)]
    for u, v, (dx, dy, dz) in zip(graph.edges_u.tolist(), graph.edges_v.tolist(), graph.offsets.tolist()):
        lines.append(f"{u} {v} {dx:.6f} {dy:.6f} {dz:.6f}")
    return "\n".join(lines) + "\n"


def write_edge_list(path: Union[str, Path], graph: Graph) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_edge_list(graph))
    return path
