"""Label space, annotations, per-frame targets and dataset records.

Per-frame hard targets are held as an ``(T, K)`` integer array with one column
per label group; ``ABSENT`` (-1) marks a group that is not annotated on that
frame.  Soft targets are a mapping from group name to a ``(T, width)`` array of
class distributions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import IndexOutOfRange, InvalidParameter, OverlapConflict

ABSENT = -1
PROVENANCES = ("labeled", "unlabeled", "pseudo", "synthetic")


@dataclass(frozen=True)
class LabelGroup:
    name: str
    classes: tuple[str, ...]
    # Class filling frames not covered by any segment of this group.
    default: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) < 2:
            raise InvalidParameter(f"group {self.name!r} needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise InvalidParameter(f"group {self.name!r} has duplicate class names")
        if self.default is not None and self.default not in self.classes:
            raise InvalidParameter(f"default {self.default!r} not a class of {self.name!r}")

    @property
    def width(self) -> int:
        return len(self.classes)

    def index(self, cls: str) -> int:
        try:
            return self.classes.index(cls)
        except ValueError:
            raise InvalidParameter(f"unknown class {cls!r} for group {self.name!r}") from None


@dataclass(frozen=True)
class LabelSchema:
    """Ordered label groups; fixes the layout of concatenated logit vectors."""

    groups: tuple[LabelGroup, ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise InvalidParameter("group names must be unique")
        if not names:
            raise InvalidParameter("schema needs at least one group")

    @property
    def names(self) -> list[str]:
        return [g.name for g in self.groups]

    @property
    def widths(self) -> list[int]:
        return [g.width for g in self.groups]

    @property
    def total_width(self) -> int:
        return sum(self.widths)

    @property
    def slices(self) -> list[slice]:
        """Index range of every group inside the concatenated vector."""
        out, start = [], 0
        for w in self.widths:
            out.append(slice(start, start + w))
            start += w
        return out

    def group(self, name: str) -> LabelGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise InvalidParameter(f"unknown group {name!r}")

    def group_index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise InvalidParameter(f"unknown group {name!r}") from None

    def slice_of(self, name: str) -> slice:
        return self.slices[self.group_index(name)]

    def column_names(self) -> list[str]:
        return [f"{g.name}.{c}" for g in self.groups for c in g.classes]

    def to_dict(self) -> dict:
        return {
            "groups": [
                {"name": g.name, "classes": list(g.classes), "default": g.default}
                for g in self.groups
            ]
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LabelSchema":
        return cls(
            tuple(
                LabelGroup(g["name"], tuple(g["classes"]), g.get("default"))
                for g in d["groups"]
            )
        )

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def default_schema(segment_default: str | None = None) -> LabelSchema:
    """tool=[no_tool, tool], segment=[other, ileum, cecum, retroflexion],
    inout=[inside, outside]."""
    return LabelSchema(
        (
            LabelGroup("tool", ("no_tool", "tool")),
            LabelGroup("segment", ("other", "ileum", "cecum", "retroflexion"), segment_default),
            LabelGroup("inout", ("inside", "outside")),
        )
    )


@dataclass(frozen=True)
class SegmentAnnotation:
    """Inclusive ``[start_frame, end_frame]`` interval labelled with one class."""

    start_frame: int
    end_frame: int
    group: str
    cls: str

    def to_dict(self) -> dict:
        return {"start": self.start_frame, "end": self.end_frame, "group": self.group, "class": self.cls}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SegmentAnnotation":
        return cls(int(d["start"]), int(d["end"]), d["group"], d["class"])


@dataclass(frozen=True, eq=False)
class VideoRecord:
    id: str
    features: np.ndarray
    annotations: tuple[SegmentAnnotation, ...] = ()
    keyframe_flags: np.ndarray | None = None
    provenance: str = "labeled"
    fps: float = 30.0
    soft_targets: Mapping[str, np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))

    @property
    def T(self) -> int:
        return int(self.features.shape[0])

    @property
    def D(self) -> int:
        return int(self.features.shape[1])


@dataclass
class Violation:
    code: str
    message: str


@dataclass
class Corpus:
    schema: LabelSchema
    records: list[VideoRecord]
    splits: dict[str, str] = field(default_factory=dict)  # video id -> "train" | "test"
    config_hash: str | None = None

    def subset(self, split: str) -> "Corpus":
        recs = [r for r in self.records if self.splits.get(r.id) == split]
        return Corpus(self.schema, recs, {r.id: split for r in recs}, self.config_hash)

    def by_id(self, video_id: str) -> VideoRecord:
        for r in self.records:
            if r.id == video_id:
                return r
        raise KeyError(video_id)

    def __len__(self) -> int:
        return len(self.records)


def rasterize_annotations(
    annotations: Iterable[SegmentAnnotation], T: int, schema: LabelSchema
) -> np.ndarray:
    """Per-frame class index for every group, ``ABSENT`` where uncovered."""
    targets = np.full((T, len(schema.groups)), ABSENT, dtype=np.int64)
    for k, g in enumerate(schema.groups):
        if g.default is not None:
            targets[:, k] = g.index(g.default)
    covered = np.zeros((T, len(schema.groups)), dtype=bool)
    for a in annotations:
        if not 0 <= a.start_frame <= a.end_frame < T:
            raise IndexOutOfRange(f"segment [{a.start_frame}, {a.end_frame}] outside [0, {T})")
        k = schema.group_index(a.group)
        c = schema.groups[k].index(a.cls)
        span = slice(a.start_frame, a.end_frame + 1)
        clash = covered[span, k] & (targets[span, k] != c)
        if clash.any():
            t = a.start_frame + int(np.argmax(clash))
            raise OverlapConflict(f"group {a.group!r}: conflicting classes at frame {t}")
        targets[span, k] = c
        covered[span, k] = True
    return targets


def runs(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """Maximal constant runs of a 1-D integer sequence as ``(value, start, end)``."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change - 1, [labels.size - 1]])
    return [(int(labels[s]), int(s), int(e)) for s, e in zip(starts, ends)]


def targets_to_annotations(targets: np.ndarray, schema: LabelSchema) -> list[SegmentAnnotation]:
    """Inverse of :func:`rasterize_annotations`: maximal runs, absent frames skipped."""
    out = []
    for k, g in enumerate(schema.groups):
        for value, s, e in runs(targets[:, k]):
            if value != ABSENT:
                out.append(SegmentAnnotation(s, e, g.name, g.classes[value]))
    return out


def validate_record(record: VideoRecord, schema: LabelSchema) -> list[Violation]:
    """All invariant violations of ``record``; an empty list means ok."""
    problems: list[Violation] = []
    feats = record.features
    if feats.ndim != 2:
        problems.append(Violation("ShapeMismatch", f"features must be 2-D, got {feats.ndim}-D"))
        return problems
    T = record.T
    if record.provenance not in PROVENANCES:
        problems.append(Violation("BadProvenance", f"unknown provenance {record.provenance!r}"))
    if record.keyframe_flags is not None and len(record.keyframe_flags) != T:
        problems.append(Violation("ShapeMismatch", "keyframe_flags length differs from T"))
    for a in record.annotations:
        if not 0 <= a.start_frame <= a.end_frame < T:
            problems.append(
                Violation("IndexOutOfRange", f"segment [{a.start_frame}, {a.end_frame}] with T={T}")
            )
        if a.group not in schema.names:
            problems.append(Violation("UnknownGroup", f"group {a.group!r}"))
        elif a.cls not in schema.group(a.group).classes:
            problems.append(Violation("UnknownClass", f"class {a.cls!r} in group {a.group!r}"))
    if record.soft_targets is not None:
        for name, arr in record.soft_targets.items():
            if name not in schema.names:
                problems.append(Violation("UnknownGroup", f"soft target group {name!r}"))
            elif arr.shape != (T, schema.group(name).width):
                problems.append(Violation("ShapeMismatch", f"soft targets for {name!r}: {arr.shape}"))
    if not problems:
        try:
            rasterize_annotations(record.annotations, T, schema)
        except OverlapConflict as exc:
            problems.append(Violation("OverlapConflict", str(exc)))
    return problems


def record_targets(record: VideoRecord, schema: LabelSchema) -> np.ndarray:
    return rasterize_annotations(record.annotations, record.T, schema)


def mask_groups(record: VideoRecord, keep: Sequence[str]) -> VideoRecord:
    """Copy of ``record`` with annotations of groups outside ``keep`` dropped."""
    return replace(record, annotations=tuple(a for a in record.annotations if a.group in keep))
