"""Query files: the query-side counterpart of the map format.

Ground-truth poses (``q_wxyz``/``t_xyz``) and ``true_place`` are optional;
they are only used by evaluation.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .binio import read_block, write_block
from .errors import DanglingReferenceError, DimensionMismatchError, SchemaError
from .map_model import (
    SIDECAR_VERSION,
    _camera_json,
    _fmt_float32,
    _fmt_float64,
    _int_field,
    _matrix,
    _require,
    _vector,
    parse_cameras,
    parse_pose,
    sidecar_path,
)
from .matching import QueryFrame

QUERY_FORMAT = "hierloc-queries"
FORMAT_VERSION = 1


def save_queries(queries: list[QueryFrame], path, global_descriptor_dim: int, local_descriptor_dim: int,
                 binary: bool = True) -> None:
    path = Path(path)
    cameras = {}
    for q in queries:
        cameras.setdefault(q.camera_id, q.camera)
    lines = ["{", f'"format": "{QUERY_FORMAT}",', f'"version": {FORMAT_VERSION},']
    lines.append('"cameras": [' + ",\n".join(_camera_json(i, c) for i, c in sorted(cameras.items())) + "],")
    lines.append(f'"global_descriptor_dim": {global_descriptor_dim},')
    lines.append(f'"local_descriptor_dim": {local_descriptor_dim},')
    if binary:
        lines.append(f'"descriptor_sidecar": {json.dumps(sidecar_path(path).name)},')
    entries = []
    for q in queries:
        parts = [f'"id": {q.id}', f'"camera_id": {q.camera_id}']
        if q.gt_pose is not None:
            parts += [f'"q_wxyz": {_fmt_float64(q.gt_pose.q)}', f'"t_xyz": {_fmt_float64(q.gt_pose.t)}']
        parts.append(f'"true_place": {"null" if q.true_place is None else int(q.true_place)}')
        if not binary:
            parts.append(f'"global_descriptor": {_fmt_float32(q.global_descriptor)}')
        parts.append('"keypoints": [' + ",".join(_fmt_float64(p) for p in q.keypoints) + "]")
        if not binary:
            parts.append('"local_descriptors": [' + ",".join(_fmt_float32(d) for d in q.local_descriptors) + "]")
        entries.append("{" + ", ".join(parts) + "}")
    lines.append('"queries": [\n' + ",\n".join(entries) + "\n]")
    lines.append("}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if binary:
        side = sidecar_path(path)
        side_tmp = side.with_name(side.name + ".tmp")
        with open(side_tmp, "wb") as fh:
            G = (np.stack([q.global_descriptor for q in queries]) if queries
                 else np.zeros((0, global_descriptor_dim), np.float32))
            L = (np.concatenate([q.local_descriptors.reshape(-1, local_descriptor_dim) for q in queries])
                 if queries else np.zeros((0, local_descriptor_dim), np.float32))
            write_block(fh, G, np.float32, SIDECAR_VERSION)
            write_block(fh, L, np.float32, SIDECAR_VERSION)
        os.replace(side_tmp, side)
    os.replace(tmp, path)


def load_queries(path) -> list[QueryFrame]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format", QUERY_FORMAT) != QUERY_FORMAT:
        raise SchemaError(f"{path}: not a query file")
    if _int_field(doc, "version", "document") != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported query file version")
    cameras = parse_cameras(doc)
    d_g = _int_field(doc, "global_descriptor_dim", "document")
    d_l = _int_field(doc, "local_descriptor_dim", "document")
    entries = _require(doc, "queries", "document")
    sidecar = doc.get("descriptor_sidecar")
    G = L = None
    if sidecar is not None:
        kp_total = sum(len(e.get("keypoints", [])) for e in entries)
        with open(path.parent / sidecar, "rb") as fh:
            G = read_block(fh, np.float32, SIDECAR_VERSION, expect_dim=d_g, expect_count=len(entries))
            L = read_block(fh, np.float32, SIDECAR_VERSION, expect_dim=d_l, expect_count=kp_total)
    out = []
    offset = 0
    for i, e in enumerate(entries):
        qid = _int_field(e, "id", f"query #{i}")
        where = f"query {qid}"
        cam_id = _int_field(e, "camera_id", where)
        if cam_id not in cameras:
            raise DanglingReferenceError(f"{where}: unknown camera {cam_id}")
        gt = parse_pose(e, where) if "q_wxyz" in e and e["q_wxyz"] is not None else None
        keypoints = _matrix(_require(e, "keypoints", where), 2, where, "keypoints")
        n = len(keypoints)
        if G is not None:
            gdesc, ldesc = G[i], L[offset:offset + n]
            offset += n
        else:
            gdesc = _vector(e, "global_descriptor", where, dtype=np.float32)
            ldesc = _matrix(_require(e, "local_descriptors", where), d_l, where, "local descriptors")
        if gdesc.shape != (d_g,):
            raise DimensionMismatchError(f"{where}: global descriptor has dimension {gdesc.size}, file declares {d_g}")
        if ldesc.shape[1] != d_l:
            raise DimensionMismatchError(f"{where}: local descriptors have dimension {ldesc.shape[1]}, file declares {d_l}")
        true_place = e.get("true_place")
        out.append(QueryFrame(cameras[cam_id], keypoints, ldesc, gdesc, gt, qid, cam_id,
                              None if true_place is None else int(true_place)))
    return out
