"""Sparse visual map: keyframes, landmarks and their observations.

The map is the bipartite graph between keyframes and landmarks. Each
observation links a landmark to one keypoint of one keyframe; the local
descriptor of that keypoint is the descriptor of the observation.

On disk a map is a JSON document, one entity per line. Descriptor matrices
are either written inline (``%.9g``, exact for float32) or to a binary
sidecar next to the document (see :mod:`hierloc.binio`).
"""
from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    DanglingReferenceError,
    DimensionMismatchError,
    DuplicateIdError,
    SchemaError,
    UnknownIdError,
    ValidationError,
)
from .geometry import PinholeCamera, Pose
from .binio import read_block, write_block

MAP_FORMAT = "hierloc-map"
FORMAT_VERSION = 1
SIDECAR_VERSION = 1


@dataclass(frozen=True, eq=False)
class Keyframe:
    id: int
    camera_id: int
    camera: PinholeCamera
    pose: Pose
    global_descriptor: np.ndarray  # (D_g,) float32
    keypoints: np.ndarray  # (n, 2) float64 pixels
    local_descriptors: np.ndarray  # (n, D_l) float32

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)


@dataclass(frozen=True, eq=False)
class Landmark:
    id: int
    position: np.ndarray  # (3,) world meters
    observations: np.ndarray  # (m, 2) int64 rows of (keyframe_id, keypoint_index)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def make_keyframe(id, camera_id, camera, pose, global_descriptor, keypoints, local_descriptors) -> Keyframe:
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    desc = np.asarray(local_descriptors, dtype=np.float32)
    if desc.size == 0:
        desc = desc.reshape(0, desc.shape[-1] if desc.ndim == 2 else 0)
    return Keyframe(
        int(id), int(camera_id), camera, pose,
        _readonly(np.array(global_descriptor, dtype=np.float32).reshape(-1)),
        _readonly(kps.copy()),
        _readonly(desc.copy()),
    )


def make_landmark(id, position, observations) -> Landmark:
    obs = np.asarray(observations, dtype=np.int64).reshape(-1, 2)
    return Landmark(int(id), _readonly(np.array(position, dtype=np.float64).reshape(3)), _readonly(obs.copy()))


class VisualMap:
    """Validated, immutable map with a keyframe -> landmarks reverse index.

    Besides the entity dictionaries it keeps flat arrays used by the matcher:
    every observation as ``(landmark_id, row into the stacked local
    descriptor matrix)``, grouped by landmark in ascending id order.
    """

    def __init__(self, cameras: dict[int, PinholeCamera], keyframes: Iterable[Keyframe],
                 landmarks: Iterable[Landmark], global_descriptor_dim: int, local_descriptor_dim: int):
        self.cameras = dict(cameras)
        self.global_descriptor_dim = int(global_descriptor_dim)
        self.local_descriptor_dim = int(local_descriptor_dim)
        self.keyframes: dict[int, Keyframe] = {}
        for kf in sorted(keyframes, key=lambda k: k.id):
            if kf.id in self.keyframes:
                raise DuplicateIdError(f"keyframe {kf.id}: duplicate id")
            self._check_keyframe(kf)
            self.keyframes[kf.id] = kf
        self.landmarks: dict[int, Landmark] = {}
        for lm in sorted(landmarks, key=lambda l: l.id):
            if lm.id in self.landmarks:
                raise DuplicateIdError(f"landmark {lm.id}: duplicate id")
            self.landmarks[lm.id] = lm
        self._index()
        self._tree_lock = threading.Lock()
        self._observation_tree = None

    # -- validation -----------------------------------------------------------

    def _check_keyframe(self, kf: Keyframe) -> None:
        if kf.camera_id not in self.cameras:
            raise DanglingReferenceError(f"keyframe {kf.id}: unknown camera {kf.camera_id}")
        if kf.global_descriptor.shape != (self.global_descriptor_dim,):
            raise DimensionMismatchError(
                f"keyframe {kf.id}: global descriptor has dimension {kf.global_descriptor.size}, "
                f"map declares {self.global_descriptor_dim}"
            )
        n = len(kf.keypoints)
        if kf.local_descriptors.shape != (n, self.local_descriptor_dim):
            if len(kf.local_descriptors) != n:
                raise SchemaError(f"keyframe {kf.id}: {n} keypoints but {len(kf.local_descriptors)} local descriptors")
            raise DimensionMismatchError(
                f"keyframe {kf.id}: local descriptors have dimension {kf.local_descriptors.shape[-1]}, "
                f"map declares {self.local_descriptor_dim}"
            )
        if not (np.all(np.isfinite(kf.keypoints)) and np.all(np.isfinite(kf.local_descriptors))
                and np.all(np.isfinite(kf.global_descriptor))):
            raise SchemaError(f"keyframe {kf.id}: non-finite values")
        inside = kf.camera.contains(kf.keypoints)
        if not np.all(inside):
            bad = int(np.flatnonzero(~inside)[0])
            raise SchemaError(f"keyframe {kf.id}: keypoint {bad} {kf.keypoints[bad].tolist()} outside the image")

    def _index(self) -> None:
        kf_ids = np.array(list(self.keyframes), dtype=np.int64)
        self.keyframe_ids = _readonly(kf_ids)
        offsets = np.zeros(len(kf_ids) + 1, dtype=np.int64)
        if len(kf_ids):
            offsets[1:] = np.cumsum([kf.num_keypoints for kf in self.keyframes.values()])
        self._kf_offset = {int(k): int(o) for k, o in zip(kf_ids, offsets[:-1])}
        self._local_stack = _readonly(
            np.concatenate([kf.local_descriptors for kf in self.keyframes.values()])
            if self.keyframes else np.zeros((0, self.local_descriptor_dim), np.float32)
        )

        lm_ids = np.array(list(self.landmarks), dtype=np.int64)
        self.landmark_ids = _readonly(lm_ids)
        self._lm_positions = _readonly(
            np.array([lm.position for lm in self.landmarks.values()]).reshape(-1, 3)
        )
        obs_lm, obs_row = [], []
        reverse: dict[int, list[int]] = {int(k): [] for k in kf_ids}
        seen: set[tuple[int, int]] = set()
        for lm in self.landmarks.values():
            if len(lm.observations) == 0:
                raise SchemaError(f"landmark {lm.id}: no observations")
            if not np.all(np.isfinite(lm.position)):
                raise SchemaError(f"landmark {lm.id}: non-finite position")
            for kf_id, kp in lm.observations.tolist():
                kf = self.keyframes.get(kf_id)
                if kf is None:
                    raise DanglingReferenceError(f"landmark {lm.id}: observation references missing keyframe {kf_id}")
                if not 0 <= kp < kf.num_keypoints:
                    raise DanglingReferenceError(
                        f"landmark {lm.id}: observation references keypoint {kp} of keyframe {kf_id}, "
                        f"which has {kf.num_keypoints}"
                    )
                if (kf_id, kp) in seen:
                    raise SchemaError(f"landmark {lm.id}: keypoint {kp} of keyframe {kf_id} already observes a landmark")
                seen.add((kf_id, kp))
                reverse[kf_id].append(lm.id)
                obs_lm.append(lm.id)
                obs_row.append(self._kf_offset[kf_id] + kp)
        self._reverse = {k: _readonly(np.unique(np.array(v, dtype=np.int64))) for k, v in reverse.items()}
        self._obs_landmark = _readonly(np.array(obs_lm, dtype=np.int64))
        self._obs_row = _readonly(np.array(obs_row, dtype=np.int64))
        counts = np.array([len(lm.observations) for lm in self.landmarks.values()], dtype=np.int64)
        self._obs_offsets = np.zeros(len(lm_ids) + 1, dtype=np.int64)
        self._obs_offsets[1:] = np.cumsum(counts)

    # -- queries --------------------------------------------------------------

    @property
    def num_observations(self) -> int:
        return len(self._obs_landmark)

    def global_descriptor_matrix(self) -> np.ndarray:
        if not self.keyframes:
            return np.zeros((0, self.global_descriptor_dim), np.float32)
        return np.stack([kf.global_descriptor for kf in self.keyframes.values()])

    def observed_landmarks(self, keyframe_id: int) -> np.ndarray:
        try:
            return self._reverse[int(keyframe_id)]
        except KeyError:
            raise UnknownIdError(f"unknown keyframe id {keyframe_id}") from None

    @property
    def reverse_index(self) -> dict[int, np.ndarray]:
        return dict(self._reverse)

    def _landmark_rows(self, landmark_ids) -> np.ndarray:
        ids = np.asarray(landmark_ids, dtype=np.int64).reshape(-1)
        rows = np.searchsorted(self.landmark_ids, ids)
        rows = np.minimum(rows, max(len(self.landmark_ids) - 1, 0))
        if len(ids) and (len(self.landmark_ids) == 0 or np.any(self.landmark_ids[rows] != ids)):
            bad = ids[self.landmark_ids[rows] != ids][0] if len(self.landmark_ids) else ids[0]
            raise UnknownIdError(f"unknown landmark id {int(bad)}")
        return rows

    def landmark_positions(self, landmark_ids) -> np.ndarray:
        return self._lm_positions[self._landmark_rows(landmark_ids)]

    def observation_descriptors(self, landmark_ids) -> tuple[np.ndarray, np.ndarray]:
        """All observation descriptors of the given landmarks.

        Returns ``(descriptors (m, D_l) float32, landmark id per row)``.
        """
        rows = self._landmark_rows(landmark_ids)
        starts = self._obs_offsets[rows]
        counts = self._obs_offsets[rows + 1] - starts
        total = int(counts.sum())
        if total == 0:
            return np.zeros((0, self.local_descriptor_dim), np.float32), np.zeros(0, np.int64)
        # concatenated ranges [start, start + count) without a Python loop
        idx = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts) + np.arange(total)
        return self._local_stack[self._obs_row[idx]], self._obs_landmark[idx]

    def all_observation_descriptors(self) -> tuple[np.ndarray, np.ndarray]:
        return self._local_stack[self._obs_row], self._obs_landmark

    def observation_tree(self):
        """Whole-map descriptor tree, built on first use and then shared."""
        from .ann_index import KdTree

        with self._tree_lock:
            if self._observation_tree is None:
                desc, labels = self.all_observation_descriptors()
                self._observation_tree = KdTree(desc, labels=labels, dimension=self.local_descriptor_dim)
            return self._observation_tree

    # -- comparison -----------------------------------------------------------

    def __eq__(self, other) -> bool:
        if not isinstance(other, VisualMap):
            return NotImplemented
        if (self.cameras != other.cameras
                or self.global_descriptor_dim != other.global_descriptor_dim
                or self.local_descriptor_dim != other.local_descriptor_dim
                or list(self.keyframes) != list(other.keyframes)
                or list(self.landmarks) != list(other.landmarks)):
            return False
        for a, b in zip(self.keyframes.values(), other.keyframes.values()):
            if not (a.camera_id == b.camera_id
                    and np.array_equal(a.pose.q, b.pose.q) and np.array_equal(a.pose.t, b.pose.t)
                    and np.array_equal(a.global_descriptor, b.global_descriptor)
                    and np.array_equal(a.keypoints, b.keypoints)
                    and np.array_equal(a.local_descriptors, b.local_descriptors)):
                return False
        for a, b in zip(self.landmarks.values(), other.landmarks.values()):
            if not (np.array_equal(a.position, b.position) and np.array_equal(a.observations, b.observations)):
                return False
        return True

    __hash__ = None

    def __repr__(self) -> str:
        return (f"VisualMap({len(self.keyframes)} keyframes, {len(self.landmarks)} landmarks, "
                f"{self.num_observations} observations, D_g={self.global_descriptor_dim}, "
                f"D_l={self.local_descriptor_dim})")


def landmarks_of_keyframes(vmap: VisualMap, keyframe_ids) -> np.ndarray:
    """Sorted union of the landmarks observed by ``keyframe_ids``."""
    parts = [vmap.observed_landmarks(k) for k in keyframe_ids]
    if not parts:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(parts))


# ----------------------------------------------------------------------------
# serialization


def _fmt_float32(values: np.ndarray) -> str:
    return "[" + ",".join(f"{v:.9g}" for v in np.asarray(values, dtype=np.float32).tolist()) + "]"


def _fmt_float64(values) -> str:
    return "[" + ",".join(repr(float(v)) for v in np.asarray(values, dtype=np.float64).reshape(-1)) + "]"


def _camera_json(cam_id: int, cam: PinholeCamera) -> str:
    return json.dumps({"id": cam_id, "fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx),
                       "cy": float(cam.cy), "width": int(cam.width), "height": int(cam.height)})


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".desc")


def save_map(vmap: VisualMap, path, binary: bool = True) -> None:
    """Write ``vmap`` to ``path``; with ``binary`` descriptors go to ``<path>.desc``."""
    path = Path(path)
    lines = ["{", f'"format": "{MAP_FORMAT}",', f'"version": {FORMAT_VERSION},']
    lines.append('"cameras": [' + ",\n".join(_camera_json(i, c) for i, c in sorted(vmap.cameras.items())) + "],")
    lines.append(f'"global_descriptor_dim": {vmap.global_descriptor_dim},')
    lines.append(f'"local_descriptor_dim": {vmap.local_descriptor_dim},')
    if binary:
        lines.append(f'"descriptor_sidecar": {json.dumps(sidecar_path(path).name)},')
    kf_lines = []
    for kf in vmap.keyframes.values():
        parts = [f'"id": {kf.id}', f'"camera_id": {kf.camera_id}',
                 f'"q_wxyz": {_fmt_float64(kf.pose.q)}', f'"t_xyz": {_fmt_float64(kf.pose.t)}']
        if not binary:
            parts.append(f'"global_descriptor": {_fmt_float32(kf.global_descriptor)}')
        parts.append('"keypoints": [' + ",".join(_fmt_float64(p) for p in kf.keypoints) + "]")
        if not binary:
            parts.append('"local_descriptors": [' + ",".join(_fmt_float32(d) for d in kf.local_descriptors) + "]")
        kf_lines.append("{" + ", ".join(parts) + "}")
    lines.append('"keyframes": [\n' + ",\n".join(kf_lines) + "\n],")
    lm_lines = []
    for lm in vmap.landmarks.values():
        obs = "[" + ",".join(f"[{a},{b}]" for a, b in lm.observations.tolist()) + "]"
        lm_lines.append(f'{{"id": {lm.id}, "p_xyz": {_fmt_float64(lm.position)}, "observations": {obs}}}')
    lines.append('"landmarks": [\n' + ",\n".join(lm_lines) + "\n]")
    lines.append("}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if binary:
        side_tmp = sidecar_path(path).with_name(sidecar_path(path).name + ".tmp")
        with open(side_tmp, "wb") as fh:
            write_block(fh, vmap.global_descriptor_matrix().reshape(-1, vmap.global_descriptor_dim),
                        np.float32, SIDECAR_VERSION)
            write_block(fh, vmap._local_stack.reshape(-1, vmap.local_descriptor_dim), np.float32, SIDECAR_VERSION)
        os.replace(side_tmp, sidecar_path(path))
    os.replace(tmp, path)


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing field '{key}'")
    return obj[key]


def _int_field(obj: dict, key: str, where: str) -> int:
    value = _require(obj, key, where)
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{where}: field '{key}' must be an integer")
    return value


def _vector(obj: dict, key: str, where: str, length: int | None = None, dtype=np.float64) -> np.ndarray:
    value = _require(obj, key, where)
    try:
        arr = np.asarray(value, dtype=dtype)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: field '{key}' is not numeric") from None
    if length is not None and arr.shape != (length,):
        raise SchemaError(f"{where}: field '{key}' must have {length} values, got shape {arr.shape}")
    return arr


def parse_cameras(doc: dict) -> dict[int, PinholeCamera]:
    cameras = {}
    for i, c in enumerate(_require(doc, "cameras", "document")):
        where = f"camera #{i}"
        cam_id = _int_field(c, "id", where)
        where = f"camera {cam_id}"
        if cam_id in cameras:
            raise DuplicateIdError(f"{where}: duplicate id")
        try:
            cameras[cam_id] = PinholeCamera(
                float(_require(c, "fx", where)), float(_require(c, "fy", where)),
                float(_require(c, "cx", where)), float(_require(c, "cy", where)),
                _int_field(c, "width", where), _int_field(c, "height", where),
            )
        except ValidationError as exc:
            raise SchemaError(f"{where}: {exc}") from None
    return cameras


def parse_pose(obj: dict, where: str) -> Pose:
    try:
        return Pose(_vector(obj, "q_wxyz", where, 4), _vector(obj, "t_xyz", where, 3))
    except SchemaError:
        raise
    except ValidationError as exc:
        raise SchemaError(f"{where}: {exc}") from None


def _matrix(value, dim: int, where: str, what: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: {what} are not a numeric matrix") from None
    if arr.size == 0:
        return arr.reshape(0, dim)
    if arr.ndim != 2:
        raise SchemaError(f"{where}: {what} must be a list of vectors")
    return arr


def load_map(path) -> VisualMap:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    if doc.get("format", MAP_FORMAT) != MAP_FORMAT:
        raise SchemaError(f"{path}: unexpected format {doc.get('format')!r}")
    version = _int_field(doc, "version", "document")
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported map version {version}")
    cameras = parse_cameras(doc)
    d_g = _int_field(doc, "global_descriptor_dim", "document")
    d_l = _int_field(doc, "local_descriptor_dim", "document")
    kf_docs = _require(doc, "keyframes", "document")
    lm_docs = _require(doc, "landmarks", "document")

    sidecar = doc.get("descriptor_sidecar")
    global_block = local_block = None
    if sidecar is not None:
        kp_total = sum(len(k.get("keypoints", [])) for k in kf_docs)
        with open(path.parent / sidecar, "rb") as fh:
            try:
                global_block = read_block(fh, np.float32, SIDECAR_VERSION, expect_dim=d_g, expect_count=len(kf_docs))
                local_block = read_block(fh, np.float32, SIDECAR_VERSION, expect_dim=d_l, expect_count=kp_total)
            except SchemaError as exc:
                if "dimension" in str(exc):
                    raise DimensionMismatchError(f"{sidecar}: {exc}") from None
                raise SchemaError(f"{sidecar}: {exc}") from None

    keyframes = []
    kp_offset = 0
    for i, k in enumerate(kf_docs):
        kf_id = _int_field(k, "id", f"keyframe #{i}")
        where = f"keyframe {kf_id}"
        cam_id = _int_field(k, "camera_id", where)
        if cam_id not in cameras:
            raise DanglingReferenceError(f"{where}: unknown camera {cam_id}")
        pose = parse_pose(k, where)
        keypoints = _matrix(_require(k, "keypoints", where), 2, where, "keypoints")
        if keypoints.shape[1] != 2:
            raise SchemaError(f"{where}: keypoints must be [u, v] pairs")
        n = len(keypoints)
        if global_block is not None:
            gdesc = global_block[i]
            ldesc = local_block[kp_offset:kp_offset + n]
            kp_offset += n
        else:
            gdesc = _vector(k, "global_descriptor", where, dtype=np.float32)
            if gdesc.ndim != 1:
                raise SchemaError(f"{where}: global_descriptor must be a vector")
            ldesc = _matrix(_require(k, "local_descriptors", where), d_l, where, "local descriptors")
        keyframes.append(make_keyframe(kf_id, cam_id, cameras[cam_id], pose, gdesc, keypoints, ldesc))

    landmarks = []
    for i, l in enumerate(lm_docs):
        lm_id = _int_field(l, "id", f"landmark #{i}")
        where = f"landmark {lm_id}"
        pos = _vector(l, "p_xyz", where, 3)
        obs = _require(l, "observations", where)
        try:
            obs_arr = np.asarray(obs, dtype=np.int64).reshape(-1, 2) if len(obs) else np.zeros((0, 2), np.int64)
        except (TypeError, ValueError):
            raise SchemaError(f"{where}: observations must be [keyframe_id, keypoint_index] pairs") from None
        landmarks.append(make_landmark(lm_id, pos, obs_arr))
    return VisualMap(cameras, keyframes, landmarks, d_g, d_l)
