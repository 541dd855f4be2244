"""Group retrieved prior frames into places by shared landmarks.

Two prior frames belong to the same place when a chain of shared landmarks
connects them. Only the retrieved frames are considered: connectivity through
keyframes outside the prior set is not followed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .map_model import VisualMap, landmarks_of_keyframes


@dataclass(frozen=True, eq=False)
class Place:
    keyframe_ids: tuple[int, ...]  # ascending
    landmark_ids: np.ndarray  # ascending, union over keyframe_ids
    rank: int

    @property
    def size(self) -> int:
        return len(self.keyframe_ids)


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


def cluster_priors(vmap: VisualMap, prior_ids) -> list[Place]:
    """Connected components of the prior frames / observed landmarks graph.

    Places come out largest first; equal sizes are ordered by their smallest
    keyframe id, so the result does not depend on the order of ``prior_ids``.
    """
    frames = sorted({int(k) for k in prior_ids})
    if not frames:
        raise ValidationError("at least one prior frame is required")
    observed = [vmap.observed_landmarks(k) for k in frames]  # raises on unknown ids

    uf = UnionFind(len(frames))
    first_seen: dict[int, int] = {}
    for i, lms in enumerate(observed):
        for lm in lms.tolist():
            j = first_seen.setdefault(lm, i)
            if j != i:
                uf.union(i, j)

    groups: dict[int, list[int]] = {}
    for i, k in enumerate(frames):
        groups.setdefault(uf.find(i), []).append(k)
    components = sorted(groups.values(), key=lambda g: (-len(g), g[0]))
    return [
        Place(tuple(g), landmarks_of_keyframes(vmap, g), rank)
        for rank, g in enumerate(components)
    ]
