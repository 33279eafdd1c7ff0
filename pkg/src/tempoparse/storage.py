"""On-disk formats: corpus directories and parameter checkpoints.

Corpus layout::

    root/schema.json
    root/splits.json            {"train": [ids], "test": [ids]}
    root/manifest.json          video ids, counts, producing config hash
    root/videos/<id>/meta.json
    root/videos/<id>/features.bin         row-major little-endian f32, T x D
    root/videos/<id>/annotations.json     [{start, end, group, class}]
    root/videos/<id>/soft_targets.bin     optional, f32, T x sum(widths of soft groups)

Checkpoint layout: an 8-byte little-endian header length, the UTF-8 JSON
header, then raw little-endian f32 parameter blocks in header order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import MissingArtifact, ShapeMismatch
from .schema import Corpus, LabelSchema, SegmentAnnotation, VideoRecord, runs

F32 = np.dtype("<f4")


def dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: Path | str, obj: Any) -> None:
    Path(path).write_text(dump_json(obj))


def read_json(path: Path | str) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path}")
    return json.loads(path.read_text())


def _flags_to_runs(flags: np.ndarray | None) -> list[list[int]] | None:
    if flags is None:
        return None
    return [[s, e] for v, s, e in runs(flags.astype(np.int8)) if v == 1]


def _runs_to_flags(spans: list[list[int]] | None, T: int) -> np.ndarray | None:
    if spans is None:
        return None
    flags = np.zeros(T, dtype=bool)
    for s, e in spans:
        flags[s : e + 1] = True
    return flags


def write_record(record: VideoRecord, directory: Path | str) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "id": record.id,
        "T": record.T,
        "D": record.D,
        "fps": float(record.fps),
        "provenance": record.provenance,
        "keyframes": _flags_to_runs(record.keyframe_flags),
        "soft_groups": list(record.soft_targets) if record.soft_targets else None,
    }
    write_json(d / "meta.json", meta)
    (d / "features.bin").write_bytes(np.ascontiguousarray(record.features, dtype=F32).tobytes())
    write_json(d / "annotations.json", [a.to_dict() for a in record.annotations])
    soft = d / "soft_targets.bin"
    if record.soft_targets:
        block = np.concatenate([np.asarray(v, dtype=F32) for v in record.soft_targets.values()], axis=1)
        soft.write_bytes(np.ascontiguousarray(block).tobytes())
    elif soft.exists():
        soft.unlink()


def read_record(directory: Path | str, schema: LabelSchema) -> VideoRecord:
    d = Path(directory)
    meta = read_json(d / "meta.json")
    T, D = int(meta["T"]), int(meta["D"])
    raw = np.frombuffer((d / "features.bin").read_bytes(), dtype=F32)
    if raw.size != T * D:
        raise ShapeMismatch(f"{d}: features.bin holds {raw.size} floats, expected {T}x{D}")
    features = raw.reshape(T, D).copy()
    annotations = tuple(SegmentAnnotation.from_dict(a) for a in read_json(d / "annotations.json"))
    soft = None
    if meta.get("soft_groups"):
        widths = [schema.group(g).width for g in meta["soft_groups"]]
        block = np.frombuffer((d / "soft_targets.bin").read_bytes(), dtype=F32).reshape(T, sum(widths))
        soft, start = {}, 0
        for g, w in zip(meta["soft_groups"], widths):
            soft[g] = block[:, start : start + w].copy()
            start += w
    return VideoRecord(
        id=meta["id"],
        features=features,
        annotations=annotations,
        keyframe_flags=_runs_to_flags(meta.get("keyframes"), T),
        provenance=meta["provenance"],
        fps=float(meta["fps"]),
        soft_targets=soft,
    )


def write_corpus(corpus: Corpus, root: Path | str) -> None:
    root = Path(root)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    write_json(root / "schema.json", corpus.schema.to_dict())
    split_lists: dict[str, list[str]] = {}
    for r in corpus.records:
        split_lists.setdefault(corpus.splits.get(r.id, "train"), []).append(r.id)
    write_json(root / "splits.json", {k: sorted(v) for k, v in sorted(split_lists.items())})
    for r in corpus.records:
        write_record(r, root / "videos" / r.id)
    write_json(
        root / "manifest.json",
        {
            "config_hash": corpus.config_hash,
            "n_videos": len(corpus.records),
            "schema_hash": corpus.schema.hash(),
            "videos": sorted(r.id for r in corpus.records),
        },
    )


def read_corpus(root: Path | str) -> Corpus:
    root = Path(root)
    if not (root / "schema.json").exists():
        raise MissingArtifact(f"missing artifact: corpus at {root}")
    schema = LabelSchema.from_dict(read_json(root / "schema.json"))
    manifest = read_json(root / "manifest.json")
    splits = {vid: split for split, ids in read_json(root / "splits.json").items() for vid in ids}
    records = [read_record(root / "videos" / vid, schema) for vid in manifest["videos"]]
    return Corpus(schema, records, splits, manifest.get("config_hash"))


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(
    path: Path | str, header: Mapping[str, Any], blocks: Sequence[tuple[str, np.ndarray]]
) -> None:
    header = dict(header)
    header["params"] = [{"name": n, "shape": list(a.shape)} for n, a in blocks]
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype=F32).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: Path | str) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing artifact: checkpoint {path}")
    data = path.read_bytes()
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8 : 8 + n])
    offset = 8 + n
    blocks = []
    for p in header["params"]:
        count = int(np.prod(p["shape"])) if p["shape"] else 1
        arr = np.frombuffer(data, dtype=F32, count=count, offset=offset).reshape(p["shape"]).copy()
        blocks.append((p["name"], arr))
        offset += 4 * count
    if offset != len(data):
        raise ShapeMismatch(f"{path}: {len(data) - offset} trailing bytes")
    return header, blocks
