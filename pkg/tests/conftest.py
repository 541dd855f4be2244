import numpy as np
import pytest

from hierloc.geometry import PinholeCamera, Pose, axis_angle_quat
from hierloc.map_model import VisualMap, make_keyframe, make_landmark
from hierloc.synth import SynthConfig, generate_world

CAM = PinholeCamera(500.0, 500.0, 320.0, 240.0, 640, 480)


def random_pose(rng, max_angle=np.pi, max_t=2.0):
    axis = rng.normal(size=3)
    q = axis_angle_quat(axis / np.linalg.norm(axis), rng.uniform(0, max_angle))
    return Pose(q, rng.uniform(-max_t, max_t, size=3))


def bipartite_map(observations, num_frames=None, d_g=4, d_l=4, seed=0):
    """Map whose keyframe i observes the landmarks listed in observations[i].

    Geometry is irrelevant here: every keypoint sits at the image center.
    """
    rng = np.random.default_rng(seed)
    num_frames = len(observations) if num_frames is None else num_frames
    kfs = []
    obs_of = {}
    for f in range(num_frames):
        lms = sorted(set(observations[f])) if f < len(observations) else []
        kfs.append(make_keyframe(f, 0, CAM, Pose.identity(), rng.normal(size=d_g),
                                 np.tile([320.0, 240.0], (len(lms), 1)), rng.normal(size=(len(lms), d_l))))
        for k, lm in enumerate(lms):
            obs_of.setdefault(lm, []).append((f, k))
    lms = [make_landmark(lm, rng.normal(size=3), obs) for lm, obs in obs_of.items()]
    return VisualMap({0: CAM}, kfs, lms, d_g, d_l)


@pytest.fixture(scope="session")
def small_world():
    cfg = SynthConfig(num_places=3, keyframes_per_place=8, landmarks_per_place=400, num_queries=30,
                      aliasing_pairs=((0, 1),))
    return generate_world(cfg)


@pytest.fixture(scope="session")
def world100():
    """100 keyframes over 5 places with 200 queries."""
    cfg = SynthConfig(num_places=5, keyframes_per_place=20, landmarks_per_place=300, num_queries=200,
                      aliasing_pairs=((0, 1),))
    return generate_world(cfg)


class PnPScenario:
    """Random 2D-3D correspondences seen by a random camera.

    Points are drawn in front of the camera (uniform pixel, depth in
    ``depth``) and moved to the world frame; inlier pixels get Gaussian noise,
    outlier pixels are uniform over the image.
    """

    def __init__(self, seed, n=200, outlier_ratio=0.5, noise_px=0.5, depth=(4.0, 12.0), camera=CAM):
        rng = np.random.default_rng(seed)
        self.camera = camera
        self.gt = random_pose(rng, max_t=5.0)
        px = rng.uniform([0, 0], [camera.width, camera.height], size=(n, 2))
        z = rng.uniform(*depth, size=n)
        cam_pts = np.column_stack([(px[:, 0] - camera.cx) / camera.fx * z, (px[:, 1] - camera.cy) / camera.fy * z, z])
        self.points = self.gt.inverse().transform(cam_pts)
        n_out = int(round(outlier_ratio * n))
        self.is_outlier = np.zeros(n, dtype=bool)
        self.is_outlier[rng.choice(n, n_out, replace=False)] = True
        obs = px + rng.normal(scale=noise_px, size=(n, 2)) if noise_px > 0 else px.copy()
        obs[self.is_outlier] = rng.uniform([0, 0], [camera.width, camera.height], size=(n_out, 2))
        self.keypoints = np.clip(obs, 0, [camera.width, camera.height])
        self.matches = [(i, 1000 + i, 0.0) for i in range(n)]
        self.landmarks = {1000 + i: self.points[i] for i in range(n)}
