"""k-d tree with exact and (1+eps)-approximate k-nearest-neighbor search.

Distances are squared Euclidean everywhere. Results are ordered by
``(distance, id)`` so equal distances resolve to the smaller payload id.

Approximate search prunes a subtree when its bounding-box distance times
``(1 + eps)**2`` exceeds the current k-th best distance, so every returned
distance is within ``(1 + eps)**2`` of the true one at the same rank.
"""
from __future__ import annotations

from typing import Iterable, NamedTuple

import numba
import numpy as np

from .errors import DimensionMismatchError, DuplicateIdError, ValidationError

LEAF_SIZE = 8


class Neighbor(NamedTuple):
    id: int
    distance: float


# ----------------------------------------------------------------------------
# construction


@numba.njit(cache=True, nogil=True)
def _build_nodes(data, leaf_size):
    n, d = data.shape
    min_leaf = max(1, (leaf_size + 1) // 2)
    max_nodes = 2 * (n // min_leaf) + 1
    start = np.empty(max_nodes, np.int64)
    end = np.empty(max_nodes, np.int64)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    lo = np.empty((max_nodes, d))
    hi = np.empty((max_nodes, d))
    perm = np.arange(n)

    num_nodes = 1
    start[0] = 0
    end[0] = n
    stack = np.empty(max_nodes, np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        s = start[node]
        e = end[node]
        for j in range(d):
            lo[node, j] = np.inf
            hi[node, j] = -np.inf
        for i in range(s, e):
            row = perm[i]
            for j in range(d):
                v = data[row, j]
                if v < lo[node, j]:
                    lo[node, j] = v
                if v > hi[node, j]:
                    hi[node, j] = v
        if e - s <= leaf_size:
            continue
        split_dim = 0
        best_spread = -1.0
        for j in range(d):
            spread = hi[node, j] - lo[node, j]
            if spread > best_spread:
                best_spread = spread
                split_dim = j
        if best_spread <= 0.0:
            continue  # all points identical: keep as an oversized leaf
        keys = np.empty(e - s)
        for i in range(s, e):
            keys[i - s] = data[perm[i], split_dim]
        order = np.argsort(keys, kind="mergesort")
        segment = perm[s:e].copy()
        for i in range(e - s):
            perm[s + i] = segment[order[i]]
        mid = s + (e - s) // 2
        l_node = num_nodes
        r_node = num_nodes + 1
        num_nodes += 2
        start[l_node] = s
        end[l_node] = mid
        start[r_node] = mid
        end[r_node] = e
        left[node] = l_node
        right[node] = r_node
        stack[top] = r_node
        stack[top + 1] = l_node
        top += 2
    return (perm, start[:num_nodes].copy(), end[:num_nodes].copy(), left[:num_nodes].copy(),
            right[:num_nodes].copy(), lo[:num_nodes].copy(), hi[:num_nodes].copy())


# ----------------------------------------------------------------------------
# search


@numba.njit(cache=True, nogil=True, inline="always")
def _box_dist(q, lo, hi, node):
    acc = 0.0
    for j in range(q.shape[0]):
        v = q[j]
        if v < lo[node, j]:
            diff = lo[node, j] - v
            acc += diff * diff
        elif v > hi[node, j]:
            diff = v - hi[node, j]
            acc += diff * diff
    return acc


@numba.njit(cache=True, nogil=True)
def _search_one(q, data, keys, start, end, left, right, lo, hi, k, factor, distinct,
                out_keys, out_dists):
    """Fill ``out_keys``/``out_dists`` (length k) sorted by (dist, key).

    With ``distinct`` the heap holds at most one entry per key, i.e. the best
    distance per label.
    """
    for i in range(k):
        out_keys[i] = -1
        out_dists[i] = np.inf
    if start.shape[0] == 0 or end[0] == 0:
        return 0
    count = 0
    d = q.shape[0]
    stack_nodes = np.empty(64 + 2 * start.shape[0], np.int64)
    stack_bounds = np.empty(64 + 2 * start.shape[0])
    stack_nodes[0] = 0
    stack_bounds[0] = _box_dist(q, lo, hi, 0)
    top = 1
    while top > 0:
        top -= 1
        node = stack_nodes[top]
        if count == k and stack_bounds[top] * factor > out_dists[k - 1]:
            continue
        if left[node] < 0:
            for i in range(start[node], end[node]):
                acc = 0.0
                for j in range(d):
                    diff = data[i, j] - q[j]
                    acc += diff * diff
                key = keys[i]
                if distinct:
                    pos = -1
                    for m in range(count):
                        if out_keys[m] == key:
                            pos = m
                            break
                    if pos >= 0:
                        if acc < out_dists[pos]:
                            # improve in place, then bubble toward the front
                            out_dists[pos] = acc
                            m = pos
                            while m > 0 and (out_dists[m - 1] > acc or (out_dists[m - 1] == acc and out_keys[m - 1] > key)):
                                out_dists[m] = out_dists[m - 1]
                                out_keys[m] = out_keys[m - 1]
                                m -= 1
                            out_dists[m] = acc
                            out_keys[m] = key
                        continue
                if count == k:
                    worst = out_dists[k - 1]
                    if acc > worst or (acc == worst and key > out_keys[k - 1]):
                        continue
                    m = k - 1
                else:
                    m = count
                    count += 1
                while m > 0 and (out_dists[m - 1] > acc or (out_dists[m - 1] == acc and out_keys[m - 1] > key)):
                    out_dists[m] = out_dists[m - 1]
                    out_keys[m] = out_keys[m - 1]
                    m -= 1
                out_dists[m] = acc
                out_keys[m] = key
            continue
        l_node = left[node]
        r_node = right[node]
        bl = _box_dist(q, lo, hi, l_node)
        br = _box_dist(q, lo, hi, r_node)
        # push the farther child first so the nearer one is expanded next
        if bl <= br:
            first, b_first, second, b_second = r_node, br, l_node, bl
        else:
            first, b_first, second, b_second = l_node, bl, r_node, br
        if not (count == k and b_first * factor > out_dists[k - 1]):
            stack_nodes[top] = first
            stack_bounds[top] = b_first
            top += 1
        if not (count == k and b_second * factor > out_dists[k - 1]):
            stack_nodes[top] = second
            stack_bounds[top] = b_second
            top += 1
    return count


@numba.njit(cache=True, nogil=True)
def _search_batch(queries, data, keys, start, end, left, right, lo, hi, k, factor, distinct):
    m = queries.shape[0]
    out_keys = np.full((m, k), -1, np.int64)
    out_dists = np.full((m, k), np.inf)
    for i in range(m):
        _search_one(queries[i], data, keys, start, end, left, right, lo, hi, k, factor,
                    distinct, out_keys[i], out_dists[i])
    return out_keys, out_dists


# ----------------------------------------------------------------------------
# public API


class KdTree:
    """Balanced k-d tree: median split on the widest dimension, leaves of 8.

    ``ids`` are unique payloads returned by :meth:`knn`. Optional ``labels``
    (not necessarily unique) support :meth:`knn_labels`, which keeps only
    the best entry per label.
    """

    def __init__(self, data, ids=None, labels=None, dimension: int | None = None,
                 leaf_size: int = LEAF_SIZE):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 1 and data.size == 0:
            data = data.reshape(0, dimension or 0)
        if data.ndim != 2:
            raise DimensionMismatchError(f"expected a 2-D array of vectors, got shape {data.shape}")
        if dimension is not None and data.shape[1] != dimension:
            raise DimensionMismatchError(f"vectors have dimension {data.shape[1]}, expected {dimension}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("vectors contain non-finite values")
        n = len(data)
        ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64).reshape(-1)
        if len(ids) != n:
            raise ValidationError(f"{len(ids)} ids for {n} vectors")
        if len(np.unique(ids)) != n:
            uniq, counts = np.unique(ids, return_counts=True)
            raise DuplicateIdError(f"duplicate id {int(uniq[counts > 1][0])}")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64).reshape(-1)
            if len(labels) != n:
                raise ValidationError(f"{len(labels)} labels for {n} vectors")
        if leaf_size < 1:
            raise ValidationError("leaf_size must be >= 1")

        self.dimension = data.shape[1]
        self.size = n
        perm, self._start, self._end, self._left, self._right, self._lo, self._hi = (
            _build_nodes(data, leaf_size) if n else _empty_nodes(self.dimension)
        )
        self._data = np.ascontiguousarray(data[perm])
        self._ids = np.ascontiguousarray(ids[perm])
        self._labels = None if labels is None else np.ascontiguousarray(labels[perm])

    @property
    def num_nodes(self) -> int:
        return len(self._start)

    def _check_query(self, queries: np.ndarray, k: int, epsilon: float) -> np.ndarray:
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        if epsilon < 0:
            raise ValidationError(f"epsilon must be >= 0, got {epsilon}")
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        if queries.ndim != 2 or queries.shape[1] != self.dimension:
            raise DimensionMismatchError(
                f"query dimension {queries.shape[-1] if queries.ndim else 0} does not match tree dimension {self.dimension}"
            )
        return queries

    def _run(self, queries, k, epsilon, keys, distinct):
        queries = self._check_query(queries, k, epsilon)
        factor = (1.0 + epsilon) ** 2
        return _search_batch(queries, self._data, keys, self._start, self._end, self._left,
                             self._right, self._lo, self._hi, int(k), factor, distinct)

    def knn_batch(self, queries, k: int, epsilon: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Arrays ``(ids, dists)`` of shape (m, k); missing slots are -1 / inf."""
        return self._run(np.atleast_2d(queries), k, epsilon, self._ids, False)

    def knn(self, query, k: int, epsilon: float = 0.0) -> list[Neighbor]:
        ids, dists = self.knn_batch(np.asarray(query, dtype=np.float64).reshape(1, -1), k, epsilon)
        n = min(k, self.size)
        return [Neighbor(int(i), float(dd)) for i, dd in zip(ids[0, :n], dists[0, :n])]

    def knn_labels_batch(self, queries, k: int, epsilon: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Best ``k`` distinct labels per query: arrays ``(labels, dists)``."""
        if self._labels is None:
            raise ValidationError("tree was built without labels")
        return self._run(np.atleast_2d(queries), k, epsilon, self._labels, True)


def _empty_nodes(d):
    z = np.zeros(0, np.int64)
    return z, z.copy(), z.copy(), z.copy(), z.copy(), np.zeros((0, d)), np.zeros((0, d))


def build(items: Iterable[tuple[int, np.ndarray]], dimension: int) -> KdTree:
    """Build from ``(id, vector)`` pairs."""
    items = list(items)
    for item_id, vec in items:
        if np.asarray(vec).shape != (dimension,):
            raise DimensionMismatchError(f"vector {item_id} has shape {np.asarray(vec).shape}, expected ({dimension},)")
    if not items:
        return KdTree(np.zeros((0, dimension)), np.zeros(0, np.int64), dimension=dimension)
    ids = [i for i, _ in items]
    data = np.stack([np.asarray(v, dtype=np.float64) for _, v in items])
    return KdTree(data, ids, dimension=dimension)


def knn(tree: KdTree, query, k: int, epsilon: float = 0.0) -> list[Neighbor]:
    return tree.knn(query, k, epsilon)
