"""Skeleton graph layout, spatial partitioning, and adjacency normalization.

The default layout is the 18-joint 2D keypoint skeleton (OpenPose/COCO order:
0 nose, 1 neck, 2-4 right arm, 5-7 left arm, 8-10 right leg, 11-13 left leg,
14/15 eyes, 16/17 ears). The neck stands in for the body center when
classifying edges as root / centripetal / centrifugal, since this layout has
no pelvis joint.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

DEGREE_FLOOR = 1e-6

COCO18_EDGES = (
    (0, 1),
    (1, 2), (2, 3), (3, 4),
    (1, 5), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10),
    (1, 11), (11, 12), (12, 13),
    (0, 14), (14, 16),
    (0, 15), (15, 17),
)

COCO18_CENTER = 1  # neck


@dataclass(frozen=True)
class SkeletonLayout:
    """Undirected joint graph with a designated center joint."""

    num_joints: int
    edges: tuple[tuple[int, int], ...]
    center_joint: int

    def __post_init__(self):
        for i, j in self.edges:
            if not (0 <= i < self.num_joints and 0 <= j < self.num_joints):
                raise ConfigError(f"edge ({i},{j}) references a joint outside [0,{self.num_joints})")
            if i == j:
                raise ConfigError(f"self-loop ({i},{j}) not allowed in the edge list")
        if not (0 <= self.center_joint < self.num_joints):
            raise ConfigError(f"center joint {self.center_joint} out of range")
        if self.num_joints > 0:
            dist = hop_distances(self, 0, _validate=False)
            if np.any(dist < 0):
                raise ConfigError("skeleton graph must be connected")

    def adjacency(self) -> np.ndarray:
        """Binary symmetric adjacency without self-loops."""
        a = np.zeros((self.num_joints, self.num_joints))
        for i, j in self.edges:
            a[i, j] = 1.0
            a[j, i] = 1.0
        return a


@dataclass(frozen=True)
class PartitionedAdjacency:
    """Stack of P normalized V x V matrices whose supports partition A' = norm(A + I)."""

    matrices: np.ndarray  # (P, V, V)

    @property
    def num_partitions(self) -> int:
        return self.matrices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.matrices.shape[1]

    def combined(self) -> np.ndarray:
        return self.matrices.sum(axis=0)


def build_coco18_layout() -> SkeletonLayout:
    return SkeletonLayout(num_joints=18, edges=COCO18_EDGES, center_joint=COCO18_CENTER)


def hop_distances(layout: SkeletonLayout, source: int, _validate: bool = True) -> np.ndarray:
    """Breadth-first hop counts from ``source``; unreached joints get -1."""
    if _validate and not (0 <= source < layout.num_joints):
        raise ConfigError(f"source joint {source} out of range")
    neighbors: list[list[int]] = [[] for _ in range(layout.num_joints)]
    for i, j in layout.edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    dist = np.full(layout.num_joints, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in neighbors[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    if _validate and np.any(dist < 0):
        raise ConfigError("graph is disconnected; hop distances undefined")
    return dist


def normalized_adjacency(layout: SkeletonLayout) -> np.ndarray:
    """Column-normalized (A + I) with a degree floor to avoid division by zero."""
    a1 = layout.adjacency() + np.eye(layout.num_joints)
    degree = a1.sum(axis=0)
    return a1 / np.maximum(degree, DEGREE_FLOOR)[None, :]


def build_partitioned_adjacency(layout: SkeletonLayout) -> PartitionedAdjacency:
    """Split the normalized adjacency into root / centripetal / centrifugal parts.

    Entry (i, j) of the column-normalized (A + I) goes to the root partition when
    i and j are equidistant from the center joint, to the centripetal partition
    when j is closer, and to the centrifugal partition when j is farther. Entries
    are copied as-is, so the partition stack sums back to the normalized matrix.
    """
    norm = normalized_adjacency(layout)
    dist = hop_distances(layout, layout.center_joint)
    v = layout.num_joints
    parts = np.zeros((3, v, v))
    for i in range(v):
        for j in range(v):
            if norm[i, j] == 0.0:
                continue
            if dist[i] == dist[j]:
                parts[0, i, j] = norm[i, j]
            elif dist[j] < dist[i]:
                parts[1, i, j] = norm[i, j]
            else:
                parts[2, i, j] = norm[i, j]
    return PartitionedAdjacency(matrices=parts)


def layout_to_json(layout: SkeletonLayout) -> str:
    doc = {
        "num_joints": layout.num_joints,
        "edges": [list(e) for e in layout.edges],
        "center": layout.center_joint,
    }
    return json.dumps(doc, sort_keys=True)


def layout_from_json(text: str) -> SkeletonLayout:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"layout document is not valid JSON: {exc}") from exc
    for key in ("num_joints", "edges", "center"):
        if key not in doc:
            raise DataError(f"layout document missing field '{key}'")
    try:
        edges = tuple((int(i), int(j)) for i, j in doc["edges"])
    except (TypeError, ValueError) as exc:
        raise DataError(f"layout 'edges' must be pairs of joint indices: {exc}") from exc
    try:
        return SkeletonLayout(int(doc["num_joints"]), edges, int(doc["center"]))
    except ConfigError as exc:
        raise DataError(str(exc)) from exc
