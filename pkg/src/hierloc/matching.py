"""2D-3D matching between query keypoints and map landmarks.

A k-d tree is built over the observation descriptors of the candidate
landmarks (one entry per observation, labeled with its landmark id) and
queried with every query keypoint descriptor. The ratio test compares the
nearest landmark with the nearest *other* landmark, so several observations
of the same landmark never fail it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .ann_index import KdTree
from .covisibility import Place
from .errors import DimensionMismatchError, SchemaError, ValidationError
from .geometry import PinholeCamera, Pose
from .map_model import VisualMap

DEFAULT_EPSILON = 3.0
DEFAULT_RATIO = 0.8


@dataclass(frozen=True, eq=False)
class QueryFrame:
    camera: PinholeCamera
    keypoints: np.ndarray  # (n, 2)
    local_descriptors: np.ndarray  # (n, D_l) float32
    global_descriptor: np.ndarray  # (D_g,) float32
    gt_pose: Pose | None = None
    id: int = 0
    camera_id: int = 0
    true_place: int | None = None

    def __post_init__(self):
        kps = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        desc = np.asarray(self.local_descriptors, dtype=np.float32)
        if desc.size == 0:
            desc = desc.reshape(0, desc.shape[-1] if desc.ndim == 2 else 0)
        if len(desc) != len(kps):
            raise SchemaError(f"query {self.id}: {len(kps)} keypoints but {len(desc)} local descriptors")
        inside = self.camera.contains(kps)
        if not np.all(inside):
            bad = int(np.flatnonzero(~inside)[0])
            raise SchemaError(f"query {self.id}: keypoint {bad} outside the image")
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "local_descriptors", desc)
        object.__setattr__(self, "global_descriptor",
                           np.asarray(self.global_descriptor, dtype=np.float32).reshape(-1))

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)


class Match2D3D(NamedTuple):
    keypoint_index: int
    landmark_id: int
    descriptor_distance: float  # squared Euclidean


@dataclass(frozen=True)
class MatchParams:
    epsilon: float = DEFAULT_EPSILON
    ratio_threshold: float = DEFAULT_RATIO  # on Euclidean distances; 1.0 disables
    max_descriptor_distance: float = math.inf  # squared

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValidationError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 < self.ratio_threshold <= 1:
            raise ValidationError(f"ratio_threshold must be in (0, 1], got {self.ratio_threshold}")
        if not self.max_descriptor_distance > 0:
            raise ValidationError("max_descriptor_distance must be positive")


def accept_matches(labels: np.ndarray, dists: np.ndarray, params: MatchParams) -> list[Match2D3D]:
    """Apply the ratio test, distance gate and one-keypoint-per-landmark rule.

    ``labels``/``dists`` are (n, 2) nearest and second-nearest distinct
    landmarks per keypoint, -1/inf when missing.
    """
    best_lm = labels[:, 0]
    d1 = dists[:, 0]
    d2 = dists[:, 1]
    ok = best_lm >= 0
    if params.ratio_threshold < 1.0:
        ok &= ~np.isfinite(d2) | (d1 <= params.ratio_threshold ** 2 * d2)
    ok &= d1 <= params.max_descriptor_distance
    kp = np.flatnonzero(ok)
    if len(kp) == 0:
        return []
    lm = best_lm[kp]
    dd = d1[kp]
    # for every landmark keep the keypoint with the lowest (distance, index)
    order = np.lexsort((kp, dd, lm))
    first = np.ones(len(order), dtype=bool)
    first[1:] = lm[order][1:] != lm[order][:-1]
    keep = np.sort(order[first])
    return [Match2D3D(int(kp[i]), int(lm[i]), float(dd[i])) for i in keep]


def match_with_tree(tree: KdTree, query: QueryFrame, params: MatchParams) -> list[Match2D3D]:
    if query.num_keypoints == 0 or tree.size == 0:
        return []
    if query.local_descriptors.shape[1] != tree.dimension:
        raise DimensionMismatchError(
            f"query local descriptors have dimension {query.local_descriptors.shape[1]}, map has {tree.dimension}"
        )
    labels, dists = tree.knn_labels_batch(query.local_descriptors, 2, params.epsilon)
    return accept_matches(labels, dists, params)


def place_tree(vmap: VisualMap, landmark_ids) -> KdTree:
    desc, labels = vmap.observation_descriptors(landmark_ids)
    return KdTree(desc, labels=labels, dimension=vmap.local_descriptor_dim)


def match_place(vmap: VisualMap, place: Place, query: QueryFrame, params: MatchParams = MatchParams()) -> list[Match2D3D]:
    """Match the query against the landmarks of one place; the tree is built per call."""
    if len(place.landmark_ids) == 0:
        return []
    return match_with_tree(place_tree(vmap, place.landmark_ids), query, params)


def match_all(vmap: VisualMap, query: QueryFrame, params: MatchParams = MatchParams()) -> list[Match2D3D]:
    """Match against every landmark in the map (direct baseline).

    The whole-map tree does not depend on the query, so it is built once per
    map and reused.
    """
    return match_with_tree(vmap.observation_tree(), query, params)
