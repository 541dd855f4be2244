"""Command-line interface: ``hierloc {synth,index,localize,eval}``.

Exit codes: 0 success, 2 invalid input or parameters, 3 I/O failure,
4 internal error. The thread count for ``localize`` comes from the
``HIERLOC_THREADS`` environment variable (default 1).

Every tunable parameter is exposed as a flag whose default is read from the
corresponding dataclass, so the library defaults are the only source of
truth.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from . import evaluation, pipeline, synth
from .errors import ValidationError
from .global_index import DEFAULT_PCA_DIM, build_global_index, load_index, save_index
from .map_model import load_map, save_map
from .matching import MatchParams
from .pipeline import Mode, PipelineParams
from .pnp import RansacParams
from .queries import load_queries, save_queries

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_INTERNAL = 4

log = logging.getLogger("hierloc")

# flag help, keyed by dataclass field name
_HELP = {
    "num_priors": "number of prior keyframes retrieved per query (N)",
    "mode": "hierarchical: retrieval, places, per-place matching; direct: match against the whole map",
    "epsilon": "approximate search precision of the k-d tree; 0 gives exact search",
    "ratio_threshold": "nearest/second-nearest distance ratio for accepting a match; 1 disables the test",
    "max_descriptor_distance": "reject matches whose squared descriptor distance exceeds this",
    "reprojection_threshold_px": "inlier threshold on reprojection error in pixels",
    "confidence": "RANSAC success probability used for adaptive termination",
    "max_iterations": "hard cap on RANSAC iterations",
    "min_inliers": "minimum inlier count for a pose to be accepted",
    "rng_seed": "seed for all random draws",
    "refine": "refine the best RANSAC pose on its inliers",
    "position_threshold_m": "position error threshold for recall and precision",
    "gt_match_distance_m": "a keyframe is a true retrieval match within this distance of the query",
    "gt_match_angle_deg": "...and within this orientation difference",
    "retrieval_n_values": "values of n for retrieval recall@n",
    "aliasing_pairs": "place pairs sharing descriptor prototypes, e.g. 0:1,2:3 (empty string for none)",
    "query_detection_range": "range of the per-query landmark detection probability",
    "detection_probability": "probability that a visible landmark is detected in a keyframe",
}


def _parse_pairs(text: str) -> tuple[tuple[int, int], ...]:
    pairs = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        a, sep, b = item.partition(":")
        if not sep:
            raise argparse.ArgumentTypeError(f"expected a:b, got {item!r}")
        try:
            pairs.append((int(a), int(b)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected integers in {item!r}") from None
    return tuple(pairs)


def _flag(name: str) -> str:
    return "--seed" if name == "rng_seed" else "--" + name.replace("_", "-")


def add_dataclass_flags(parser: argparse.ArgumentParser, cls, skip=()) -> None:
    """One flag per dataclass field, defaulting to the field default."""
    defaults = cls()
    group = parser.add_argument_group(f"{cls.__name__} options")
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = getattr(defaults, f.name)
        kwargs = {"dest": f.name, "default": default, "help": _HELP.get(f.name, f.name.replace("_", " "))}
        if isinstance(default, bool):
            kwargs["action"] = argparse.BooleanOptionalAction
        elif isinstance(default, Mode):
            kwargs.update(type=Mode, choices=list(Mode))
        elif f.name == "aliasing_pairs":
            kwargs["type"] = _parse_pairs
        elif isinstance(default, tuple):
            kwargs.update(nargs=len(default) if f.name.endswith("_range") or f.name.endswith("_range_m") else "+",
                          type=type(default[0]))
        else:
            kwargs["type"] = type(default)
        kwargs["help"] += " (default: %(default)s)"
        group.add_argument(_flag(f.name), **kwargs)


def _take(args: argparse.Namespace, cls, **overrides):
    values = {f.name: getattr(args, f.name) for f in dataclasses.fields(cls) if hasattr(args, f.name)}
    values.update(overrides)
    for key, value in values.items():
        if isinstance(value, list):
            values[key] = tuple(value)
    return cls(**values)


def pipeline_params(args: argparse.Namespace) -> PipelineParams:
    return PipelineParams(num_priors=args.num_priors, mode=args.mode,
                          match=_take(args, MatchParams), ransac=_take(args, RansacParams))


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    config = _take(args, synth.SynthConfig)
    world = synth.generate_world(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    binary = not args.text
    save_map(world.map, out / "map.json", binary=binary)
    save_queries(world.queries, out / "queries.json", world.map.global_descriptor_dim,
                 world.map.local_descriptor_dim, binary=binary)
    print(f"wrote {out / 'map.json'}: {len(world.map.keyframes)} keyframes, {len(world.map.landmarks)} landmarks")
    print(f"wrote {out / 'queries.json'}: {len(world.queries)} queries")
    return EXIT_OK


def cmd_index(args) -> int:
    vmap = load_map(args.map)
    t0 = time.perf_counter()
    index = build_global_index(vmap, args.pca_dim)
    elapsed = time.perf_counter() - t0
    save_index(index, args.out)
    print(f"indexed {index.size} keyframes, d_p={index.projector.output_dim}, build time {elapsed:.3f} s")
    return EXIT_OK


def cmd_localize(args) -> int:
    params = pipeline_params(args)
    threads = pipeline.thread_count()
    vmap = load_map(args.map)
    queries = load_queries(args.queries)
    index = None
    if params.mode is Mode.HIERARCHICAL:
        if args.index is None:
            raise ValidationError("hierarchical mode needs --index")
        index = load_index(args.index, vmap)
    t0 = time.perf_counter()
    results = pipeline.localize_batch(index, vmap, queries, params, threads=threads)
    elapsed = time.perf_counter() - t0
    pipeline.write_results(results, args.out)
    n_loc = sum(r.localized for r in results)
    print(f"{params.mode.value}: localized {n_loc}/{len(results)} queries in {elapsed:.2f} s "
          f"({threads} thread{'s' if threads != 1 else ''}); results in {args.out}")
    return EXIT_OK


def _run_name(path: str, used: set) -> str:
    name = Path(path).stem
    base, k = name, 2
    while name in used:
        name, k = f"{base}_{k}", k + 1
    used.add(name)
    return name


def cmd_eval(args) -> int:
    params = _take(args, evaluation.EvalParams)
    queries = load_queries(args.queries)
    by_id = {q.id: q for q in queries}
    reports, all_results, used = {}, {}, set()
    for path in args.results:
        results = pipeline.read_results(path)
        gt = []
        for r in results:
            q = by_id.get(r.query_id)
            if q is None:
                raise ValidationError(f"{path}: result for unknown query {r.query_id}")
            if q.gt_pose is None:
                raise ValidationError(f"query {q.id} has no ground-truth pose")
            gt.append(q.gt_pose)
        name = _run_name(path, used)
        reports[name] = evaluation.localization_metrics(results, gt, params)
        all_results[name] = results
    retrieval = None
    if args.index is not None:
        if args.map is None:
            raise ValidationError("--index requires --map")
        vmap = load_map(args.map)
        index = load_index(args.index, vmap)
        retrieval = evaluation.retrieval_recall(index, vmap, queries, params=params)
        for report in reports.values():
            report.retrieval_recall_at_n = retrieval
    evaluation.write_csvs(args.out, reports, all_results, retrieval)
    print(evaluation.format_table(reports))
    if retrieval is not None:
        print("retrieval recall@n: " + ", ".join(f"{n}: {100 * v:.1f}%" for n, v in retrieval))
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierloc", description="Hierarchical visual localization toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic map and query set")
    p.add_argument("--out", required=True, help="output directory for map.json and queries.json")
    p.add_argument("--text", action="store_true", help="store descriptors inline as JSON instead of a binary sidecar")
    add_dataclass_flags(p, synth.SynthConfig)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("index", help="fit PCA and build the global retrieval index of a map")
    p.add_argument("--map", required=True, help="map file")
    p.add_argument("--pca-dim", type=int, default=DEFAULT_PCA_DIM,
                   help="projected global descriptor dimension d_p (default: %(default)s)")
    p.add_argument("--out", required=True, help="index file to write")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("localize", help="localize a query set against a map")
    p.add_argument("--map", required=True, help="map file")
    p.add_argument("--index", help="index file (required in hierarchical mode)")
    p.add_argument("--queries", required=True, help="query file")
    p.add_argument("--out", required=True, help="results file (one JSON record per line)")
    add_dataclass_flags(p, PipelineParams, skip=("match", "ransac"))
    add_dataclass_flags(p, MatchParams)
    add_dataclass_flags(p, RansacParams)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", help="compute metrics and write CSV tables")
    p.add_argument("--results", required=True, nargs="+", help="one or more results files")
    p.add_argument("--queries", required=True, help="query file with ground-truth poses")
    p.add_argument("--map", help="map file, needed for retrieval recall")
    p.add_argument("--index", help="index file; enables retrieval recall@n")
    p.add_argument("--out", required=True, help="output directory for CSV files")
    add_dataclass_flags(p, evaluation.EvalParams)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - report and map to the internal-error code
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
