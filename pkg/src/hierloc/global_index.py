"""Global-descriptor retrieval: PCA reduction, L2 normalization, k-d tree lookup.

PCA is fitted with a dense symmetric eigensolver on the sample covariance,
which costs O(D^3) in the input dimension D (about a minute for D = 4096).
No whitening is applied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ann_index import KdTree
from .errors import (
    DimensionMismatchError,
    InsufficientSamplesError,
    SchemaError,
    ValidationError,
    ZeroProjectionError,
)
from .binio import read_block, write_block

DEFAULT_PCA_DIM = 512
DEFAULT_NUM_PRIORS = 10
ZERO_NORM = 1e-12
INDEX_FORMAT_VERSION = 2  # float64 payload; map sidecars use version 1 (float32)


@dataclass(frozen=True, eq=False)
class PcaProjector:
    mean: np.ndarray  # (D,)
    basis: np.ndarray  # (D, d_p), orthonormal columns
    explained_variance: np.ndarray  # (d_p,), nonincreasing

    @property
    def input_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[1]

    def project(self, descriptor) -> np.ndarray:
        return project(self, descriptor)


def fit_pca(descriptors, d_p: int) -> PcaProjector:
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D descriptor matrix, got shape {X.shape}")
    n, D = X.shape
    if n < 2:
        raise InsufficientSamplesError(f"PCA needs at least 2 descriptors, got {n}")
    if not 1 <= d_p <= min(D, n - 1):
        raise ValidationError(f"PCA dimension {d_p} outside [1, min(D={D}, n-1={n - 1})]")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1][:d_p]
    basis = evecs[:, order]
    variances = np.clip(evals[order], 0.0, None)
    # sign convention: the largest-magnitude entry of each column is positive
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(d_p)])
    signs[signs == 0] = 1.0
    basis = basis * signs
    return PcaProjector(mean, np.ascontiguousarray(basis), variances)


def project(projector: PcaProjector, descriptor) -> np.ndarray:
    """Reduce one (D,) descriptor or a batch (m, D) and L2-normalize."""
    x = np.asarray(descriptor, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != projector.input_dim:
        raise DimensionMismatchError(f"descriptor dimension {x.shape[1]}, projector expects {projector.input_dim}")
    y = (x - projector.mean) @ projector.basis
    norms = np.linalg.norm(y, axis=1, keepdims=True)
    if np.any(norms < ZERO_NORM):
        raise ZeroProjectionError("descriptor projects to the zero vector (equals the mean in the retained subspace)")
    y = y / norms
    return y[0] if single else y


@dataclass(eq=False)
class GlobalIndex:
    projector: PcaProjector
    tree: KdTree
    keyframe_ids: np.ndarray

    @property
    def size(self) -> int:
        return self.tree.size


def build_global_index(vmap, d_p: int = DEFAULT_PCA_DIM) -> GlobalIndex:
    if not vmap.keyframes:
        raise ValidationError("cannot index an empty map")
    projector = fit_pca(vmap.global_descriptor_matrix(), d_p)
    return index_with_projector(vmap, projector)


def index_with_projector(vmap, projector: PcaProjector) -> GlobalIndex:
    ids = vmap.keyframe_ids
    G = vmap.global_descriptor_matrix()
    if G.shape[1] != projector.input_dim:
        raise DimensionMismatchError(
            f"map global descriptors have dimension {G.shape[1]}, projector expects {projector.input_dim}"
        )
    projected = project(projector, G)
    return GlobalIndex(projector, KdTree(projected, ids), np.asarray(ids, dtype=np.int64))


def retrieve_priors(index: GlobalIndex, query_descriptor, n: int = DEFAULT_NUM_PRIORS) -> list[int]:
    """Keyframe ids of the ``n`` nearest projected descriptors, nearest first."""
    if n < 1:
        raise ValidationError(f"number of priors must be >= 1, got {n}")
    y = project(index.projector, query_descriptor)
    return [nb.id for nb in index.tree.knn(y, n, epsilon=0.0)]


# ----------------------------------------------------------------------------
# persistence: four float64 HLOC blocks holding the mean, the basis (one row
# per component), the explained variances and the indexed keyframe ids


def save_index(index: GlobalIndex, path) -> None:
    p = index.projector
    with open(path, "wb") as fh:
        write_block(fh, p.mean.reshape(1, -1), np.float64, INDEX_FORMAT_VERSION)
        write_block(fh, p.basis.T, np.float64, INDEX_FORMAT_VERSION)
        write_block(fh, p.explained_variance.reshape(1, -1), np.float64, INDEX_FORMAT_VERSION)
        write_block(fh, index.keyframe_ids.astype(np.float64).reshape(1, -1), np.float64, INDEX_FORMAT_VERSION)


def load_projector(path) -> tuple[PcaProjector, np.ndarray]:
    with open(path, "rb") as fh:
        mean = read_block(fh, np.float64, INDEX_FORMAT_VERSION)
        basis_rows = read_block(fh, np.float64, INDEX_FORMAT_VERSION)
        variances = read_block(fh, np.float64, INDEX_FORMAT_VERSION)
        ids = read_block(fh, np.float64, INDEX_FORMAT_VERSION)
        if fh.read(1):
            raise SchemaError(f"{path}: trailing bytes after index blocks")
    if basis_rows.shape[1] != mean.shape[1] or variances.shape[1] != basis_rows.shape[0]:
        raise SchemaError(f"{path}: inconsistent index block shapes")
    projector = PcaProjector(mean[0], np.ascontiguousarray(basis_rows.T), variances[0])
    return projector, ids[0].astype(np.int64)


def load_index(path, vmap) -> GlobalIndex:
    """Load a saved projector and rebuild the tree over ``vmap``'s keyframes."""
    projector, ids = load_projector(path)
    if not np.array_equal(np.sort(ids), np.sort(vmap.keyframe_ids)):
        raise ValidationError(f"{path}: index was built for a different set of keyframes")
    return index_with_projector(vmap, projector)


__all__ = [
    "GlobalIndex",
    "PcaProjector",
    "build_global_index",
    "fit_pca",
    "load_index",
    "load_projector",
    "project",
    "retrieve_priors",
    "save_index",
]
