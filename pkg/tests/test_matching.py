import numpy as np
import pytest

from hierloc.covisibility import Place, cluster_priors
from hierloc.errors import DimensionMismatchError, SchemaError, ValidationError
from hierloc.geometry import Pose
from hierloc.map_model import VisualMap, make_keyframe, make_landmark
from hierloc.matching import MatchParams, QueryFrame, accept_matches, match_all, match_place

from conftest import CAM


def brute_matcher(vmap, landmark_ids, query, params):
    """Exhaustive matcher applying the documented acceptance rules."""
    desc, labels = vmap.observation_descriptors(landmark_ids)
    data = desc.astype(np.float64)
    candidates = []
    for i, q in enumerate(query.local_descriptors.astype(np.float64)):
        acc = np.zeros(len(data))
        for j in range(data.shape[1]):
            diff = data[:, j] - q[j]
            acc += diff * diff
        best = {}
        for lab, dd in zip(labels.tolist(), acc.tolist()):
            if lab not in best or dd < best[lab]:
                best[lab] = dd
        ranked = sorted(best.items(), key=lambda kv: (kv[1], kv[0]))
        if not ranked:
            continue
        lm, d1 = ranked[0]
        d2 = ranked[1][1] if len(ranked) > 1 else np.inf
        if params.ratio_threshold < 1 and np.isfinite(d2) and not d1 <= params.ratio_threshold ** 2 * d2:
            continue
        if d1 > params.max_descriptor_distance:
            continue
        candidates.append((i, lm, d1))
    kept = {}
    for i, lm, d in candidates:
        if lm not in kept or (d, i) < (kept[lm][1], kept[lm][0]):
            kept[lm] = (i, d)
    return sorted((i, lm, d) for lm, (i, d) in kept.items())


def one_landmark_map(desc):
    kf = make_keyframe(0, 0, CAM, Pose.identity(), [1.0], [[10.0, 10.0]], [desc])
    lm = make_landmark(5, [0, 0, 3], [[0, 0]])
    return VisualMap({0: CAM}, [kf], [lm], 1, len(desc))


def query_with(desc, kps=None):
    desc = np.atleast_2d(np.asarray(desc, dtype=np.float32))
    kps = np.tile([100.0, 100.0], (len(desc), 1)) if kps is None else kps
    return QueryFrame(CAM, kps, desc, np.ones(1))


def test_single_landmark_exact_match():
    d = np.array([0.6, 0.8, 0.0], dtype=np.float32)
    vmap = one_landmark_map(d)
    place = cluster_priors(vmap, [0])[0]
    q = query_with([d, [0, 0, 1]])
    params = MatchParams(ratio_threshold=1.0)
    got = match_place(vmap, place, q, params)
    assert [(m.keypoint_index, m.landmark_id, m.descriptor_distance) for m in got] == [(0, 5, 0.0)]
    # the whole-map tree behaves identically on a one-place map
    assert match_all(vmap, q, params) == got


def test_dedup_keeps_lowest_distance():
    labels = np.array([[7, -1], [7, -1], [8, -1]])
    dists = np.array([[0.3, np.inf], [0.1, np.inf], [0.2, np.inf]])
    got = accept_matches(labels, dists, MatchParams())
    assert [(m.keypoint_index, m.landmark_id) for m in got] == [(1, 7), (2, 8)]


def test_ratio_and_distance_gates():
    labels = np.array([[1, 2], [3, 4], [5, 6]])
    dists = np.array([[0.64, 1.0], [0.65, 1.0], [0.15, 0.2]])
    got = accept_matches(labels, dists, MatchParams(ratio_threshold=0.8))
    assert [m.keypoint_index for m in got] == [0]  # squared distances: 0.64 <= 0.64 passes, 0.65 and 0.15 / 0.2 fail
    got = accept_matches(labels, dists, MatchParams(ratio_threshold=1.0, max_descriptor_distance=0.5))
    assert [m.keypoint_index for m in got] == [2]


def test_params_validation():
    with pytest.raises(ValidationError):
        MatchParams(epsilon=-1)
    with pytest.raises(ValidationError):
        MatchParams(ratio_threshold=0)
    with pytest.raises(ValidationError):
        MatchParams(ratio_threshold=1.5)


def test_query_validation():
    with pytest.raises(SchemaError):
        QueryFrame(CAM, [[1.0, 1.0]], np.zeros((2, 3)), np.ones(2))
    with pytest.raises(SchemaError):
        QueryFrame(CAM, [[-1.0, 1.0]], np.zeros((1, 3)), np.ones(2))


def test_dimension_mismatch():
    vmap = one_landmark_map(np.ones(3, dtype=np.float32))
    with pytest.raises(DimensionMismatchError):
        match_all(vmap, query_with(np.ones(4)), MatchParams())


def test_empty_query():
    vmap = one_landmark_map(np.ones(3, dtype=np.float32))
    q = QueryFrame(CAM, np.zeros((0, 2)), np.zeros((0, 3)), np.ones(1))
    assert match_all(vmap, q) == []


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_matches_brute_force_oracle_on_noisy_place():
    rng = np.random.default_rng(0)
    n_lm, d = 200, 32
    protos = unit(rng.normal(size=(n_lm, d)))
    # two keyframes observe every landmark with independent noise
    kfs = []
    for f in range(2):
        desc = unit(protos + 0.05 * rng.normal(size=protos.shape))
        kfs.append(make_keyframe(f, 0, CAM, Pose.identity(), [float(f)], rng.uniform(0, 400, (n_lm, 2)), desc))
    lms = [make_landmark(i, [0, 0, 1], [[0, i], [1, i]]) for i in range(n_lm)]
    vmap = VisualMap({0: CAM}, kfs, lms, 1, d)
    place = cluster_priors(vmap, [0, 1])[0]
    picks = rng.choice(n_lm, 120)
    qdesc = np.vstack([unit(protos[picks] + 0.05 * rng.normal(size=(120, d))), unit(rng.normal(size=(30, d)))])
    query = query_with(qdesc, rng.uniform(0, 400, (150, 2)))
    params = MatchParams(epsilon=0.0, ratio_threshold=0.8)
    got = match_place(vmap, place, query, params)
    expected = brute_matcher(vmap, place.landmark_ids, query, params)
    assert [(m.keypoint_index, m.landmark_id, m.descriptor_distance) for m in got] == expected
    lm_ids = [m.landmark_id for m in got]
    kp_ids = [m.keypoint_index for m in got]
    assert len(set(lm_ids)) == len(lm_ids) and kp_ids == sorted(set(kp_ids))
    # approximate search only returns a subset of what exact search could
    approx = match_place(vmap, place, query, MatchParams(epsilon=3.0))
    assert len(approx) > 0.5 * len(got)


def test_aliasing_splits_direct_matches(small_world):
    """Places 0 and 1 share descriptors: whole-map matching spreads matches over both."""
    world = small_world
    vmap = world.map
    place_of = world.landmark_place
    q = next(q for q in world.queries if q.true_place == 0)
    direct = match_all(vmap, q, MatchParams(ratio_threshold=1.0))
    direct_places = {place_of[m.landmark_id] for m in direct}
    assert {0, 1} <= direct_places
    true_lms = np.array([i for i in vmap.landmark_ids if place_of[i] == 0])
    own = match_place(vmap, Place((0,), true_lms, 0), q, MatchParams(ratio_threshold=1.0))
    assert all(place_of[m.landmark_id] == 0 for m in own)
    frac_direct = np.mean([place_of[m.landmark_id] == 0 for m in direct])
    assert frac_direct < 1.0


def test_restriction_keeps_true_match_distances(small_world):
    """Searching a subset never lowers the descriptor distance of a match found in both."""
    world = small_world
    vmap = world.map
    place_of = world.landmark_place
    params = MatchParams(epsilon=0.0, ratio_threshold=1.0)
    for q in world.queries[:5]:
        lms = np.array([i for i in vmap.landmark_ids if place_of[i] == q.true_place])
        restricted = {m.keypoint_index: m for m in match_place(vmap, Place((0,), lms, 0), q, params)}
        for m in match_all(vmap, q, params):
            r = restricted.get(m.keypoint_index)
            if r is not None:
                assert r.descriptor_distance >= m.descriptor_distance
