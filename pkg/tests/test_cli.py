import csv
import dataclasses
import json

import numpy as np
import pytest

from hierloc import cli
from hierloc.evaluation import EvalParams
from hierloc.map_model import load_map
from hierloc.matching import QueryFrame
from hierloc.matching import MatchParams
from hierloc.pipeline import PipelineParams, read_results
from hierloc.pnp import RansacParams
from hierloc.queries import load_queries, save_queries
from hierloc.synth import SynthConfig

# 100 keyframes
SMALL = ["--num-places", "2", "--keyframes-per-place", "50", "--landmarks-per-place", "600",
         "--num-queries", "8", "--aliasing-pairs", ""]


def subparser(name):
    parser = cli.build_parser()
    action = next(a for a in parser._actions if a.dest == "command")
    return action.choices[name]


@pytest.mark.parametrize("command,classes", [
    ("synth", [SynthConfig]),
    ("localize", [PipelineParams, MatchParams, RansacParams]),
    ("eval", [EvalParams]),
])
def test_flag_defaults_match_dataclasses(command, classes):
    p = subparser(command)
    required = {a.dest: a for a in p._actions if a.required}
    args = p.parse_args([x for a in required.values() for x in (a.option_strings[0], "x")])
    for cls in classes:
        defaults = cls()
        for f in dataclasses.fields(cls):
            if f.name in ("match", "ransac"):
                continue
            assert getattr(args, f.name) == getattr(defaults, f.name), f.name
    # the flags rebuild exactly the default objects
    if command == "localize":
        assert cli.pipeline_params(args) == PipelineParams()
    else:
        assert cli._take(args, classes[0]) == classes[0]()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(d), *SMALL]) == 0
    assert cli.main(["index", "--map", str(d / "map.json"), "--pca-dim", "4", "--out", str(d / "index.bin")]) == 0
    return d


def test_end_to_end(workspace, capsys, tmp_path):
    d = workspace
    common = ["--map", str(d / "map.json"), "--queries", str(d / "queries.json")]
    assert cli.main(["localize", *common, "--index", str(d / "index.bin"), "--out", str(tmp_path / "hier.jsonl")]) == 0
    assert cli.main(["localize", *common, "--mode", "direct", "--out", str(tmp_path / "direct.jsonl")]) == 0
    assert len(read_results(tmp_path / "hier.jsonl")) == 8
    capsys.readouterr()
    rc = cli.main(["eval", "--results", str(tmp_path / "hier.jsonl"), str(tmp_path / "direct.jsonl"),
                   *common, "--index", str(d / "index.bin"), "--out", str(tmp_path / "out")])
    assert rc == 0
    text = capsys.readouterr().out
    assert "Recall@0.1m (%)" in text and "hier" in text and "direct" in text and "retrieval recall@n" in text
    # recount from the raw files
    gt = {q.id: q.gt_pose for q in load_queries(d / "queries.json")}
    lines = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "# hierloc-eval v1"
    rows = {r["run"]: r for r in csv.DictReader(lines[1:])}
    for run in ("hier", "direct"):
        results = read_results(tmp_path / f"{run}.jsonl")
        errs = [np.linalg.norm(r.pose.center - gt[r.query_id].center) for r in results if r.status == "localized"]
        within = sum(e <= 0.1 for e in errs)
        assert int(rows[run]["num_localized"]) == len(errs)
        assert float(rows[run]["recall_pct"]) == pytest.approx(100 * within / len(results), abs=1e-9)


def test_eval_table_four_query_example(workspace, tmp_path, capsys):
    queries = load_queries(workspace / "queries.json")[:4]
    qpath = tmp_path / "q.json"
    save_queries(queries, qpath, 64, 128)
    records = []
    for q, e in zip(queries, [0.05, 0.02, 0.30, None]):
        if e is None:
            records.append({"query_id": q.id, "status": "failed"})
            continue
        center = q.gt_pose.center + np.array([e, 0.0, 0.0])
        t = -q.gt_pose.R @ center
        records.append({"query_id": q.id, "status": "localized", "q_wxyz": q.gt_pose.q.tolist(), "t_xyz": t.tolist()})
    rpath = tmp_path / "run.jsonl"
    rpath.write_text("".join(json.dumps(r) + "\n" for r in records))
    assert cli.main(["eval", "--results", str(rpath), "--queries", str(qpath), "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    rows = out.splitlines()
    assert rows[0].split() == ["run"]
    assert rows[1].startswith("Recall@0.1m (%)") and rows[1].split()[-1] == "50"
    assert rows[2].startswith("Precision@0.1m (%)") and rows[2].split()[-1] == "66.67"
    assert rows[3].startswith("Median error (m)") and rows[3].split()[-1] == "0.05"


def test_single_self_query(workspace, tmp_path):
    vmap = load_map(workspace / "map.json")
    kf = vmap.keyframes[vmap.keyframe_ids[17]]
    q = QueryFrame(kf.camera, kf.keypoints, kf.local_descriptors, kf.global_descriptor, kf.pose, id=0)
    save_queries([q], tmp_path / "q.json", vmap.global_descriptor_dim, vmap.local_descriptor_dim)
    out = tmp_path / "r.jsonl"
    rc = cli.main(["localize", "--map", str(workspace / "map.json"), "--index", str(workspace / "index.bin"),
                   "--queries", str(tmp_path / "q.json"), "--out", str(out)])
    (record,) = [json.loads(line) for line in out.read_text().splitlines()]
    assert rc == 0 and record["status"] == "localized" and record["places_evaluated"] == 1


def test_synth_defaults_and_validity(workspace):
    cfg = SynthConfig()
    assert (cfg.num_places, cfg.keyframes_per_place, cfg.num_queries, len(cfg.aliasing_pairs)) == (10, 20, 500, 2)
    vmap = load_map(workspace / "map.json")  # passes full load validation
    assert len(vmap.keyframes) == 100


def test_empty_query_file(workspace, tmp_path):
    qpath = tmp_path / "empty.json"
    save_queries([], qpath, 64, 128)
    out = tmp_path / "r.jsonl"
    rc = cli.main(["localize", "--map", str(workspace / "map.json"), "--index", str(workspace / "index.bin"),
                   "--queries", str(qpath), "--out", str(out)])
    assert rc == 0 and out.read_text() == ""


def test_synth_is_repeatable(workspace, tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), *SMALL]) == 0
    for name in ("map.json.desc", "queries.json.desc", "queries.json"):
        assert (tmp_path / name).read_bytes() == (workspace / name).read_bytes(), name


def test_exit_codes(workspace, tmp_path, capsys):
    missing = ["index", "--map", str(tmp_path / "nope.json"), "--out", str(tmp_path / "i.bin")]
    assert cli.main(missing) == cli.EXIT_IO
    # d_p larger than the global descriptor dimension
    too_big = ["index", "--map", str(workspace / "map.json"), "--pca-dim", "100", "--out", str(tmp_path / "i.bin")]
    assert cli.main(too_big) == cli.EXIT_VALIDATION
    no_index = ["localize", "--map", str(workspace / "map.json"), "--queries", str(workspace / "queries.json"),
                "--out", str(tmp_path / "r.jsonl")]
    assert cli.main(no_index) == cli.EXIT_VALIDATION
    assert cli.main(["synth", "--out", str(tmp_path), "--num-places", "0"]) == cli.EXIT_VALIDATION
    with pytest.raises(SystemExit) as exc:
        cli.main(["localize", "--mode", "sideways"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_help(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["localize", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "--ratio-threshold" in text and "--num-priors" in text and "--seed" in text


def test_aliasing_pairs_flag():
    args = subparser("synth").parse_args(["--out", "x", "--aliasing-pairs", "0:1,2:3"])
    assert args.aliasing_pairs == ((0, 1), (2, 3))
    with pytest.raises(SystemExit):
        subparser("synth").parse_args(["--out", "x", "--aliasing-pairs", "0-1"])
