"""Retrieval and localization metrics, plus their CSV outputs.

Conventions for localization metrics:

* recall: queries localized within the position threshold / all queries;
* precision: the same count / queries that returned a pose;
* median error: over queries that returned a pose;
* per-query averages (inliers, places) are taken over all queries;
* the cumulative error curve counts failed queries as never localized.

Orientation is ignored by the position-threshold metrics.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .geometry import Pose, pose_error
from .global_index import retrieve_priors

CSV_SCHEMA = "hierloc-eval v1"
DEFAULT_RETRIEVAL_N = (1, 2, 5, 10, 20)


@dataclass(frozen=True)
class EvalParams:
    position_threshold_m: float = 0.1
    gt_match_distance_m: float = 5.0
    gt_match_angle_deg: float = 90.0
    retrieval_n_values: tuple[int, ...] = DEFAULT_RETRIEVAL_N

    def __post_init__(self):
        object.__setattr__(self, "retrieval_n_values", tuple(int(n) for n in self.retrieval_n_values))
        for name in ("position_threshold_m", "gt_match_distance_m", "gt_match_angle_deg"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if any(n < 1 for n in self.retrieval_n_values):
            raise ValidationError("retrieval n values must be >= 1")


@dataclass
class EvalReport:
    num_queries: int
    num_localized: int
    recall_at_threshold: float
    precision_at_threshold: float | None  # None when nothing was localized
    median_error_m: float | None
    mean_places_retrieved: float
    mean_places_evaluated: float
    mean_inliers: float
    retrieval_recall_at_n: list[tuple[int, float]] = field(default_factory=list)
    cumulative_error_curve: list[tuple[float, float]] = field(default_factory=list)
    position_threshold_m: float = 0.1


def is_ground_truth_match(a: Pose, b: Pose, params: EvalParams) -> bool:
    dist, angle = pose_error(a, b)
    return dist < params.gt_match_distance_m and angle < params.gt_match_angle_deg


def retrieval_recall(index, vmap, queries, gt_poses: Sequence[Pose] | None = None,
                     n_values: Sequence[int] | None = None, params: EvalParams = EvalParams()) -> list[tuple[int, float]]:
    """Fraction of queries whose top-n priors contain a ground-truth match.

    Queries without any ground-truth match in the map are left out.
    """
    n_values = sorted(set(params.retrieval_n_values if n_values is None else n_values))
    if gt_poses is None:
        gt_poses = [q.gt_pose for q in queries]
    if any(p is None for p in gt_poses):
        raise ValidationError("every query needs a ground-truth pose")
    hits = {n: 0 for n in n_values}
    counted = 0
    max_n = max(n_values)
    for query, gt in zip(queries, gt_poses):
        good = {kf_id for kf_id, kf in vmap.keyframes.items() if is_ground_truth_match(gt, kf.pose, params)}
        if not good:
            continue
        counted += 1
        ranked = retrieve_priors(index, query.global_descriptor, max_n)
        first_hit = next((rank for rank, kf_id in enumerate(ranked) if kf_id in good), None)
        for n in n_values:
            if first_hit is not None and first_hit < n:
                hits[n] += 1
    if counted == 0:
        raise ValidationError("no query has a ground-truth match in the map")
    return [(n, hits[n] / counted) for n in n_values]


def position_errors(results, gt_poses: Sequence[Pose]) -> np.ndarray:
    """Per-query position error, ``inf`` for queries without a pose."""
    if len(results) != len(gt_poses):
        raise ValidationError(f"{len(results)} results for {len(gt_poses)} ground-truth poses")
    return np.array([
        pose_error(r.pose, gt)[0] if r.pose is not None and r.status == "localized" else math.inf
        for r, gt in zip(results, gt_poses)
    ])


def localization_metrics(results, gt_poses: Sequence[Pose], params: EvalParams = EvalParams()) -> EvalReport:
    errors = position_errors(results, gt_poses)
    total = len(errors)
    localized = np.isfinite(errors)
    n_loc = int(localized.sum())
    within = int(np.sum(errors <= params.position_threshold_m))
    finite = np.sort(errors[localized])
    curve = [(float(e), (i + 1) / total) for i, e in enumerate(finite)]

    def mean(values):
        return float(np.mean(values)) if total else 0.0

    return EvalReport(
        num_queries=total,
        num_localized=n_loc,
        recall_at_threshold=within / total if total else 0.0,
        precision_at_threshold=within / n_loc if n_loc else None,
        median_error_m=float(np.median(finite)) if n_loc else None,
        mean_places_retrieved=mean([r.places_retrieved for r in results]),
        mean_places_evaluated=mean([r.places_evaluated for r in results]),
        mean_inliers=mean([r.num_inliers for r in results]),
        cumulative_error_curve=curve,
        position_threshold_m=params.position_threshold_m,
    )


def cumulative_fraction_at(curve: list[tuple[float, float]], error: float) -> float:
    """Fraction of all queries localized with position error <= ``error``."""
    frac = 0.0
    for e, f in curve:
        if e > error:
            break
        frac = f
    return frac


# ----------------------------------------------------------------------------
# CSV / table output


def _fmt(value, scale: float = 1.0, digits: int = 6) -> str:
    return "NA" if value is None else f"{value * scale:.{digits}g}"


def metric_labels(threshold_m: float) -> tuple[str, str, str]:
    return (f"Recall@{threshold_m:g}m (%)", f"Precision@{threshold_m:g}m (%)", "Median error (m)")


def format_table(reports: dict[str, EvalReport]) -> str:
    """Plain-text table with one column per run and one row per metric."""
    if not reports:
        return ""
    first = next(iter(reports.values()))
    labels = metric_labels(first.position_threshold_m)
    rows = [
        (labels[0], [_fmt(r.recall_at_threshold, 100, 4) for r in reports.values()]),
        (labels[1], [_fmt(r.precision_at_threshold, 100, 4) for r in reports.values()]),
        (labels[2], [_fmt(r.median_error_m, 1, 3) for r in reports.values()]),
    ]
    width = max(len(label) for label, _ in rows) + 2
    cols = [max(len(name), 8) + 2 for name in reports]
    out = [" " * width + "".join(name.rjust(c) for name, c in zip(reports, cols))]
    for label, values in rows:
        out.append(label.ljust(width) + "".join(v.rjust(c) for v, c in zip(values, cols)))
    return "\n".join(out)


def _write(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {CSV_SCHEMA}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_csvs(out_dir, runs: dict[str, EvalReport], results: dict[str, list] | None = None,
               retrieval: list[tuple[int, float]] | None = None) -> list[Path]:
    """Write one CSV per table or figure analog into ``out_dir``.

    ``metrics.csv``, ``stats.csv`` and ``cumulative_errors.csv`` hold one
    block of rows per run. ``recall_at_n.csv`` is written when ``retrieval``
    is given and ``timings.csv`` when per-query ``results`` are given. Every
    file starts with a ``# hierloc-eval v1`` comment line.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, header, rows):
        path = out / name
        _write(path, header, rows)
        written.append(path)

    emit("metrics.csv",
         ["run", "num_queries", "num_localized", "position_threshold_m", "recall_pct", "precision_pct",
          "median_error_m"],
         [[run, r.num_queries, r.num_localized, f"{r.position_threshold_m:g}",
           _fmt(r.recall_at_threshold, 100, 10), _fmt(r.precision_at_threshold, 100, 10),
           _fmt(r.median_error_m, 1, 10)] for run, r in runs.items()])
    emit("stats.csv", ["run", "mean_inliers", "mean_places_retrieved", "mean_places_evaluated"],
         [[run, _fmt(r.mean_inliers, 1, 10), _fmt(r.mean_places_retrieved, 1, 10),
           _fmt(r.mean_places_evaluated, 1, 10)] for run, r in runs.items()])
    emit("cumulative_errors.csv", ["run", "position_error_m", "fraction"],
         [[run, repr(e), repr(f)] for run, r in runs.items() for e, f in r.cumulative_error_curve])
    if retrieval is not None:
        emit("recall_at_n.csv", ["n", "recall"], [[n, repr(v)] for n, v in retrieval])
    if results is not None:
        rows = []
        for run, res in results.items():
            for stage in sorted({k for r in res for k in r.stage_timings}):
                values = np.array([r.stage_timings.get(stage, 0.0) for r in res])
                rows.append([run, stage, f"{values.mean():.4f}", f"{np.median(values):.4f}", f"{values.sum():.4f}"])
        emit("timings.csv", ["run", "stage", "mean_ms", "median_ms", "total_ms"], rows)
    return written
