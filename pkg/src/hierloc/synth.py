"""Deterministic synthetic worlds for end-to-end tests and benchmarks.

A world is a set of places laid out along a piecewise-linear trajectory.
Each place is a straight segment of keyframes looking sideways at a box of
landmarks; places are far apart, so keyframes of different places never
share landmarks.

Appearance model:

* local descriptors live near a low-dimensional subspace of the descriptor
  space (as real gradient-histogram descriptors do); every landmark owns a
  random unit prototype in it and each observation is the prototype plus
  noise of norm about ``sigma`` in the subspace and ``sigma / 2`` outside it,
  renormalized;
* every place owns a global prototype plus a smooth function of the position
  along its segment, so neighboring keyframes have neighboring global
  descriptors;
* an aliased place pair shares both the local prototypes (landmark by
  landmark) and the global appearance, while its landmarks keep distinct ids
  and independent positions.

Randomness comes from PCG64 streams keyed by ``(seed, entity class, place)``;
changing one class of draws (say the number of landmarks) leaves the others
untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ValidationError
from .geometry import PinholeCamera, Pose, project_points
from .map_model import VisualMap, make_keyframe, make_landmark
from .matching import QueryFrame

DEFAULT_SEED = 7
DEFAULT_CAMERA = PinholeCamera(500.0, 500.0, 320.0, 240.0, 640, 480)

# stream ids per entity class
_LAYOUT, _LANDMARKS, _LOCAL_PROTO, _GLOBAL_PROTO, _KF_POSES, _KF_OBS, _QUERIES, _DESC_BASIS = range(8)


@dataclass(frozen=True)
class SynthConfig:
    rng_seed: int = DEFAULT_SEED
    num_places: int = 10
    keyframes_per_place: int = 20
    landmarks_per_place: int = 2000
    keyframe_spacing_m: float = 1.0
    place_separation_m: float = 200.0
    keypoint_noise_px: float = 1.0
    local_descriptor_noise_sigma: float = 0.25
    global_descriptor_noise_sigma: float = 0.1
    aliasing_pairs: tuple[tuple[int, int], ...] = ((0, 1), (2, 3))
    distractor_keypoints_per_query: int = 100
    query_offset_m: float = 0.5
    query_offset_deg: float = 5.0
    num_queries: int = 500
    detection_probability: float = 0.5
    query_detection_range: tuple[float, float] = (0.01, 0.12)
    local_descriptor_dim: int = 128
    local_descriptor_latent_dim: int = 8
    global_descriptor_dim: int = 64
    depth_range_m: tuple[float, float] = (4.0, 14.0)
    height_range_m: tuple[float, float] = (-3.0, 3.0)

    def __post_init__(self):
        object.__setattr__(self, "aliasing_pairs", tuple(tuple(int(x) for x in p) for p in self.aliasing_pairs))
        for name in ("num_places", "keyframes_per_place", "landmarks_per_place",
                     "local_descriptor_dim", "global_descriptor_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("num_queries", "distractor_keypoints_per_query"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("keypoint_noise_px", "local_descriptor_noise_sigma", "global_descriptor_noise_sigma",
                     "query_offset_m", "query_offset_deg", "keyframe_spacing_m"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not 0 < self.detection_probability <= 1:
            raise ValidationError("detection_probability must be in (0, 1]")
        lo, hi = self.query_detection_range
        if not 0 < lo <= hi <= 1:
            raise ValidationError("query_detection_range must satisfy 0 < low <= high <= 1")
        if not 1 <= self.local_descriptor_latent_dim <= self.local_descriptor_dim:
            raise ValidationError("local_descriptor_latent_dim must be in [1, local_descriptor_dim]")
        if not 0 < self.depth_range_m[0] < self.depth_range_m[1]:
            raise ValidationError("depth_range_m must be increasing and positive")
        if self.place_separation_m <= 0:
            raise ValidationError("place_separation_m must be positive")
        seen = set()
        for a, b in self.aliasing_pairs:
            if not (0 <= a < self.num_places and 0 <= b < self.num_places) or a == b:
                raise ValidationError(f"invalid aliasing pair ({a}, {b})")
            if a in seen or b in seen:
                raise ValidationError(f"place appears in more than one aliasing pair: ({a}, {b})")
            seen.update((a, b))

    @property
    def segment_length_m(self) -> float:
        return (self.keyframes_per_place - 1) * self.keyframe_spacing_m


class World(NamedTuple):
    map: VisualMap
    queries: list[QueryFrame]
    keyframe_place: dict[int, int]
    landmark_place: dict[int, int]
    config: SynthConfig


def _rng(config: SynthConfig, stream: int, place: int = 0) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=config.rng_seed, spawn_key=(stream, place))
    return np.random.Generator(np.random.PCG64(seq))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class _PlaceFrame:
    origin: np.ndarray  # world position of the segment start
    along: np.ndarray  # unit direction of the segment (horizontal)
    facing: np.ndarray  # unit direction the cameras look at (horizontal)

    def to_world(self, local: np.ndarray) -> np.ndarray:
        """Local (along, depth, height) coordinates to world (z up)."""
        local = np.atleast_2d(local)
        return (self.origin + local[:, :1] * self.along + local[:, 1:2] * self.facing
                + local[:, 2:3] * np.array([0.0, 0.0, 1.0]))


def _camera_pose(center: np.ndarray, facing: np.ndarray, yaw: float = 0.0, pitch: float = 0.0,
                 roll: float = 0.0) -> Pose:
    """World-to-camera pose of a camera at ``center`` looking along ``facing``."""
    c, s = math.cos(yaw), math.sin(yaw)
    fwd = np.array([c * facing[0] - s * facing[1], s * facing[0] + c * facing[1], 0.0])
    fwd /= np.linalg.norm(fwd)
    down = np.array([0.0, 0.0, -1.0])
    right = np.cross(down, fwd)
    R_cw = np.column_stack([right, down, fwd])  # camera axes in world coordinates
    cp, sp, cr, sr = math.cos(pitch), math.sin(pitch), math.cos(roll), math.sin(roll)
    tilt = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]]) @ np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    R_cw = R_cw @ tilt
    R = R_cw.T
    return Pose.from_Rt(R, -R @ center)


class _Appearance:
    """Global appearance of one place family: prototype + smooth position term."""

    def __init__(self, rng: np.random.Generator, dim: int, terms: int = 4):
        self.prototype = rng.normal(size=dim)
        self.freqs = rng.uniform(0.15, 0.6, size=terms)  # rad per meter
        self.phases = rng.uniform(0, 2 * np.pi, size=terms)
        self.coeffs = rng.normal(scale=0.6, size=(terms, dim))

    def __call__(self, s: float) -> np.ndarray:
        return self.prototype + np.cos(self.freqs * s + self.phases) @ self.coeffs


class _DescriptorModel:
    def __init__(self, rng: np.random.Generator, dim: int, latent_dim: int, sigma: float):
        self.basis = np.linalg.qr(rng.normal(size=(dim, latent_dim)))[0]
        self.sigma = sigma

    def prototypes(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return _unit_rows(rng.normal(size=(n, self.basis.shape[1])) @ self.basis.T)

    def observe(self, rng: np.random.Generator, protos: np.ndarray) -> np.ndarray:
        n, (d, m) = len(protos), self.basis.shape
        if n == 0:
            return np.zeros((0, d))
        latent = rng.normal(size=(n, m)) @ self.basis.T / math.sqrt(m)
        ambient = rng.normal(size=(n, d)) / math.sqrt(d)
        return _unit_rows(protos + self.sigma * (latent + 0.5 * ambient))


def _observe(camera: PinholeCamera, pose: Pose, positions: np.ndarray, max_depth: float):
    uv, front = project_points(camera, pose, positions)
    depth = pose.transform(positions)[:, 2]
    visible = front & (depth <= max_depth)
    visible &= camera.contains(np.where(np.isfinite(uv), uv, -1.0))
    return uv, visible


def generate_world(config: SynthConfig = SynthConfig()) -> World:
    cam = DEFAULT_CAMERA
    P, K, L = config.num_places, config.keyframes_per_place, config.landmarks_per_place
    d_l, d_g = config.local_descriptor_dim, config.global_descriptor_dim
    seg = config.segment_length_m
    margin = 8.0
    max_depth = config.depth_range_m[1] + 6.0

    # layout: a polyline whose heading turns at every place
    layout_rng = _rng(config, _LAYOUT)
    frames = []
    position = np.zeros(3)
    heading = layout_rng.uniform(0, 2 * np.pi)
    for _ in range(P):
        along = np.array([math.cos(heading), math.sin(heading), 0.0])
        facing = np.array([-along[1], along[0], 0.0])
        frames.append(_PlaceFrame(position.copy(), along, facing))
        position = position + along * (seg + config.place_separation_m)
        heading += layout_rng.uniform(-0.8, 0.8)

    # which place provides the descriptor prototypes of each place
    source = list(range(P))
    for a, b in config.aliasing_pairs:
        source[b] = a

    appearance = {p: _Appearance(_rng(config, _GLOBAL_PROTO, p), d_g) for p in range(P) if source[p] == p}
    descriptors = _DescriptorModel(_rng(config, _DESC_BASIS), d_l, config.local_descriptor_latent_dim,
                                   config.local_descriptor_noise_sigma)
    local_proto = {
        p: descriptors.prototypes(_rng(config, _LOCAL_PROTO, p), L)
        for p in range(P) if source[p] == p
    }

    landmark_pos = []
    for p in range(P):
        rng = _rng(config, _LANDMARKS, p)
        local = np.column_stack([
            rng.uniform(-margin, seg + margin, L),
            rng.uniform(*config.depth_range_m, L),
            rng.uniform(*config.height_range_m, L),
        ])
        landmark_pos.append(frames[p].to_world(local))

    keyframes = []
    observations: dict[int, list[tuple[int, int]]] = {}
    keyframe_place, landmark_place = {}, {}
    for p in range(P):
        pose_rng = _rng(config, _KF_POSES, p)
        obs_rng = _rng(config, _KF_OBS, p)
        appear = appearance[source[p]]
        protos = local_proto[source[p]]
        for k in range(K):
            kf_id = p * K + k
            s = k * config.keyframe_spacing_m
            yaw = pose_rng.uniform(-1.0, 1.0) * math.radians(3.0)
            center = frames[p].to_world(np.array([s, 0.0, 0.0]))[0]
            pose = _camera_pose(center, frames[p].facing, yaw=yaw)
            uv, visible = _observe(cam, pose, landmark_pos[p], max_depth)
            detected = visible & (obs_rng.random(L) < config.detection_probability)
            idx = np.flatnonzero(detected)
            kps = uv[idx] + obs_rng.normal(scale=config.keypoint_noise_px, size=(len(idx), 2))
            inside = cam.contains(kps)
            idx, kps = idx[inside], kps[inside]
            desc = descriptors.observe(obs_rng, protos[idx])
            gdesc = appear(s) + obs_rng.normal(scale=config.global_descriptor_noise_sigma, size=d_g)
            keyframes.append(make_keyframe(kf_id, 0, cam, pose, gdesc, kps, desc.astype(np.float32)))
            keyframe_place[kf_id] = p
            for kp_index, j in enumerate(idx.tolist()):
                observations.setdefault(p * L + j, []).append((kf_id, kp_index))

    landmarks = []
    for lm_id in sorted(observations):
        p, j = divmod(lm_id, L)
        landmarks.append(make_landmark(lm_id, landmark_pos[p][j], observations[lm_id]))
        landmark_place[lm_id] = p
    vmap = VisualMap({0: cam}, keyframes, landmarks, d_g, d_l)

    queries = []
    q_rng = _rng(config, _QUERIES)
    off_m, off_rad = config.query_offset_m, math.radians(config.query_offset_deg)
    for qid in range(config.num_queries):
        p = int(q_rng.integers(P))
        s = int(q_rng.integers(K)) * config.keyframe_spacing_m  # perturb a keyframe pose
        local = np.array([s + q_rng.uniform(-off_m, off_m), q_rng.uniform(-off_m, off_m),
                          q_rng.uniform(-0.2 * off_m, 0.2 * off_m)])
        yaw, pitch, roll = q_rng.uniform(-1, 1, 3) * off_rad * np.array([1.0, 0.5, 0.5])
        pose = _camera_pose(frames[p].to_world(local)[0], frames[p].facing, yaw, pitch, roll)
        uv, visible = _observe(cam, pose, landmark_pos[p], max_depth)
        detected = visible & (q_rng.random(L) < q_rng.uniform(*config.query_detection_range))
        idx = np.flatnonzero(detected)
        kps = uv[idx] + q_rng.normal(scale=config.keypoint_noise_px, size=(len(idx), 2))
        inside = cam.contains(kps)
        idx, kps = idx[inside], kps[inside]
        protos = local_proto[source[p]]
        desc = descriptors.observe(q_rng, protos[idx])
        n_dis = config.distractor_keypoints_per_query
        dis_kps = np.column_stack([q_rng.uniform(0, cam.width, n_dis), q_rng.uniform(0, cam.height, n_dis)])
        dis_desc = descriptors.observe(q_rng, descriptors.prototypes(q_rng, n_dis))
        all_kps = np.concatenate([kps, dis_kps])
        all_desc = np.concatenate([desc, dis_desc])
        order = q_rng.permutation(len(all_kps))
        gdesc = appearance[source[p]](local[0]) + q_rng.normal(scale=config.global_descriptor_noise_sigma, size=d_g)
        queries.append(QueryFrame(cam, all_kps[order], all_desc[order].astype(np.float32),
                                  gdesc.astype(np.float32), pose, qid, 0, p))
    return World(vmap, queries, keyframe_place, landmark_place, config)
