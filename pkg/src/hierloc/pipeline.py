"""Hierarchical localization and the direct-matching baseline."""
from __future__ import annotations

import enum
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .covisibility import cluster_priors
from .errors import ValidationError
from .geometry import Pose
from .global_index import DEFAULT_NUM_PRIORS, GlobalIndex, retrieve_priors
from .map_model import VisualMap
from .matching import MatchParams, QueryFrame, match_all, match_place
from .pnp import PoseEstimate, RansacParams, ransac_pnp

log = logging.getLogger(__name__)

THREADS_ENV = "HIERLOC_THREADS"
STAGES = ("global_search", "clustering", "matching", "pnp_ransac")


class Mode(str, enum.Enum):
    HIERARCHICAL = "hierarchical"
    DIRECT = "direct"


@dataclass(frozen=True)
class PipelineParams:
    num_priors: int = DEFAULT_NUM_PRIORS
    match: MatchParams = field(default_factory=MatchParams)
    ransac: RansacParams = field(default_factory=RansacParams)
    mode: Mode = Mode.HIERARCHICAL

    def __post_init__(self):
        if self.num_priors < 1:
            raise ValidationError(f"num_priors must be >= 1, got {self.num_priors}")
        object.__setattr__(self, "mode", Mode(self.mode))


@dataclass(eq=False)
class LocalizationResult:
    query_id: int
    status: str  # "localized" | "failed"
    pose: Pose | None = None
    num_inliers: int = 0
    places_retrieved: int = 0
    places_evaluated: int = 0
    stage_timings: dict[str, float] = field(default_factory=dict)  # milliseconds
    inlier_matches: list = field(default_factory=list, repr=False)
    error: str | None = None

    @property
    def localized(self) -> bool:
        return self.status == "localized"


class _Clock:
    def __init__(self):
        self.timings = {name: 0.0 for name in STAGES}

    def add(self, stage: str, start: float) -> None:
        self.timings[stage] += (time.perf_counter() - start) * 1e3


def _finish(result: LocalizationResult, clock: _Clock, t0: float, estimate) -> LocalizationResult:
    result.stage_timings = dict(clock.timings)
    result.stage_timings["total"] = (time.perf_counter() - t0) * 1e3
    if isinstance(estimate, PoseEstimate):
        result.status = "localized"
        result.pose = estimate.pose
        result.num_inliers = estimate.num_inliers
        result.inlier_matches = estimate.inlier_matches
    return result


def localize(index: GlobalIndex | None, vmap: VisualMap, query: QueryFrame,
             params: PipelineParams = PipelineParams()) -> LocalizationResult:
    t0 = time.perf_counter()
    clock = _Clock()
    result = LocalizationResult(query.id, "failed")

    if params.mode is Mode.DIRECT:
        result.places_retrieved = result.places_evaluated = 1
        s = time.perf_counter()
        matches = match_all(vmap, query, params.match)
        clock.add("matching", s)
        s = time.perf_counter()
        estimate = ransac_pnp(matches, vmap, query, params.ransac)
        clock.add("pnp_ransac", s)
        return _finish(result, clock, t0, estimate)

    if index is None:
        raise ValidationError("hierarchical mode needs a global index")
    s = time.perf_counter()
    priors = retrieve_priors(index, query.global_descriptor, params.num_priors)
    clock.add("global_search", s)
    s = time.perf_counter()
    places = cluster_priors(vmap, priors)
    clock.add("clustering", s)
    result.places_retrieved = len(places)

    estimate = None
    for place in places:
        result.places_evaluated = place.rank + 1
        s = time.perf_counter()
        matches = match_place(vmap, place, query, params.match)
        clock.add("matching", s)
        s = time.perf_counter()
        estimate = ransac_pnp(matches, vmap, query, params.ransac)
        clock.add("pnp_ransac", s)
        if isinstance(estimate, PoseEstimate):
            break
    return _finish(result, clock, t0, estimate)


def thread_count(threads: int | None = None) -> int:
    if threads is None:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            threads = int(raw)
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ValidationError(f"thread count must be >= 1, got {threads}")
    return threads


def localize_batch(index: GlobalIndex | None, vmap: VisualMap, queries: list[QueryFrame],
                   params: PipelineParams = PipelineParams(), threads: int | None = None) -> list[LocalizationResult]:
    """Localize every query; output order equals input order.

    Errors raised for a single query are recorded on its result instead of
    aborting the batch.
    """
    threads = thread_count(threads)

    def run(query: QueryFrame) -> LocalizationResult:
        try:
            return localize(index, vmap, query, params)
        except (ValidationError, ArithmeticError, ValueError) as exc:
            log.warning("query %s failed: %s", query.id, exc)
            return LocalizationResult(query.id, "failed", error=str(exc),
                                      stage_timings={name: 0.0 for name in (*STAGES, "total")})

    if params.mode is Mode.DIRECT and queries:
        vmap.observation_tree()  # build once before fanning out
    if threads == 1:
        return [run(q) for q in queries]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, queries))


# ----------------------------------------------------------------------------
# results files: one JSON object per line, in query order


def result_to_record(result: LocalizationResult) -> dict:
    pose = result.pose
    return {
        "query_id": int(result.query_id),
        "status": result.status,
        "q_wxyz": None if pose is None else [float(v) for v in pose.q],
        "t_xyz": None if pose is None else [float(v) for v in pose.t],
        "num_inliers": int(result.num_inliers),
        "places_retrieved": int(result.places_retrieved),
        "places_evaluated": int(result.places_evaluated),
        "stage_timings_ms": {k: round(v, 4) for k, v in result.stage_timings.items()},
        "error": result.error,
    }


def result_from_record(record: dict) -> LocalizationResult:
    try:
        pose = None
        if record.get("q_wxyz") is not None:
            pose = Pose(record["q_wxyz"], record["t_xyz"])
        status = record["status"]
        if status not in ("localized", "failed"):
            raise ValidationError(f"unknown status {status!r}")
        return LocalizationResult(
            query_id=int(record["query_id"]),
            status=status,
            pose=pose,
            num_inliers=int(record.get("num_inliers", 0)),
            places_retrieved=int(record.get("places_retrieved", 0)),
            places_evaluated=int(record.get("places_evaluated", 0)),
            stage_timings={k: float(v) for k, v in record.get("stage_timings_ms", {}).items()},
            error=record.get("error"),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed result record: {exc}") from None


def write_results(results, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(result_to_record(r)) + "\n")


def read_results(path) -> list[LocalizationResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc})") from None
            out.append(result_from_record(record))
    return out
