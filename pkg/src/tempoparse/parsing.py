"""Turn probability streams into labelled segments and procedure-level reports.

Withdrawal time convention: from the last frame of the last cecum segment to
the first frame of the final inside -> outside transition (the end of the
video if the scope never exits).  Net withdrawal time subtracts the frames
inside that window where a tool is decoded.
"""

from __future__ import annotations

import csv
import heapq
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidParameter, ShapeMismatch
from .schema import LabelSchema, SegmentAnnotation, runs
from .streams import ProbabilityStream, decode_labels


def extract_segments(labels: Sequence[int], min_duration: int = 1) -> list[tuple[int, int, int]]:
    """Maximal constant runs ``(value, start, end)`` after absorbing short runs.

    Repeatedly takes the shortest run below ``min_duration`` (leftmost on
    ties) and merges it into its longer neighbour (left on ties); equal
    neighbours are coalesced after every merge.
    """
    if min_duration < 1:
        raise InvalidParameter("min_duration must be >= 1")
    segs = runs(np.asarray(labels))
    if min_duration == 1 or len(segs) <= 1:
        return segs
    n = len(segs)
    value = [v for v, _, _ in segs]
    start = [s for _, s, _ in segs]
    end = [e for _, _, e in segs]
    prev = list(range(-1, n - 1))
    nxt = list(range(1, n + 1))
    nxt[-1] = -1
    alive = [True] * n
    heap = [(end[i] - start[i] + 1, start[i], i) for i in range(n) if end[i] - start[i] + 1 < min_duration]
    heapq.heapify(heap)

    def unlink(i: int) -> None:
        alive[i] = False
        p, q = prev[i], nxt[i]
        if p >= 0:
            nxt[p] = q
        if q >= 0:
            prev[q] = p

    def push(i: int) -> None:
        length = end[i] - start[i] + 1
        if length < min_duration:
            heapq.heappush(heap, (length, start[i], i))

    while heap:
        length, s, i = heapq.heappop(heap)
        if not alive[i] or start[i] != s or end[i] - start[i] + 1 != length:
            continue  # stale entry
        p, q = prev[i], nxt[i]
        if p < 0 and q < 0:
            break
        if q < 0 or (p >= 0 and end[p] - start[p] >= end[q] - start[q]):
            target = p
            end[p] = end[i]
        else:
            target = q
            start[q] = start[i]
        unlink(i)
        # coalesce the absorbing run with a now-adjacent run of the same value
        for other in (prev[target], nxt[target]):
            if other >= 0 and value[other] == value[target]:
                start[target] = min(start[target], start[other])
                end[target] = max(end[target], end[other])
                unlink(other)
        push(target)
    out = []
    i = next(j for j in range(n) if alive[j] and prev[j] < 0)
    while i >= 0:
        out.append((value[i], start[i], end[i]))
        i = nxt[i]
    return out


def segments_to_labels(segments: Sequence[tuple[int, int, int]], T: int) -> np.ndarray:
    labels = np.empty(T, dtype=np.int64)
    for v, s, e in segments:
        labels[s : e + 1] = v
    return labels


@dataclass
class ParsedProcedure:
    schema: LabelSchema
    labels: np.ndarray  # (T, K) decoded labels after short-run absorption
    segments: list[SegmentAnnotation]
    video_id: str = ""
    fps: float = 30.0

    @property
    def T(self) -> int:
        return self.labels.shape[0]

    def group_labels(self, name: str) -> np.ndarray:
        return self.labels[:, self.schema.group_index(name)]


def parse_stream(
    stream: ProbabilityStream, min_duration: int = 15, video_id: str = "", fps: float = 30.0
) -> ParsedProcedure:
    raw = decode_labels(stream)
    schema = stream.schema
    labels = np.empty_like(raw)
    segments = []
    for k, g in enumerate(schema.groups):
        segs = extract_segments(raw[:, k], min_duration) if stream.T else []
        labels[:, k] = segments_to_labels(segs, stream.T)
        segments += [SegmentAnnotation(s, e, g.name, g.classes[v]) for v, s, e in segs]
    return ParsedProcedure(schema, labels, segments, video_id, fps)


@dataclass
class ProcedureReport:
    video_id: str
    withdrawal_time_s: float | None
    net_withdrawal_time_s: float | None
    cecum_reached: bool
    ileum_reached: bool
    retroflexion_performed: bool
    outside_trimmed_ranges: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cecum_reached": self.cecum_reached,
            "ileum_reached": self.ileum_reached,
            "net_withdrawal_time_s": self.net_withdrawal_time_s,
            "outside_trimmed_ranges": [list(r) for r in self.outside_trimmed_ranges],
            "retroflexion_performed": self.retroflexion_performed,
            "video_id": self.video_id,
            "withdrawal_time_s": self.withdrawal_time_s,
        }


def build_report(parsed: ParsedProcedure) -> ProcedureReport:
    schema = parsed.schema
    seg = parsed.group_labels("segment")
    io_ = parsed.group_labels("inout")
    tool = parsed.group_labels("tool")
    seg_g, io_g = schema.group("segment"), schema.group("inout")
    cecum, ileum, retro = (seg_g.index(c) for c in ("cecum", "ileum", "retroflexion"))
    inside, outside = io_g.index("inside"), io_g.index("outside")
    tool_idx = schema.group("tool").index("tool")

    outside_ranges = [(s, e) for v, s, e in runs(io_) if v == outside]
    cecum_frames = np.flatnonzero(seg == cecum)
    withdrawal = net = None
    if cecum_frames.size:
        cecum_end = int(cecum_frames[-1])
        # first frame of the last outside run that follows an inside frame
        exits = [s for v, s, e in runs(io_) if v == outside and s > 0 and io_[s - 1] == inside]
        exits = [s for s in exits if s > cecum_end]
        exit_frame = exits[-1] if exits else parsed.T
        withdrawal = (exit_frame - cecum_end) / parsed.fps
        tool_frames = int(np.count_nonzero(tool[cecum_end:exit_frame] == tool_idx))
        net = withdrawal - tool_frames / parsed.fps
    return ProcedureReport(
        video_id=parsed.video_id,
        withdrawal_time_s=withdrawal,
        net_withdrawal_time_s=net,
        cecum_reached=bool(cecum_frames.size),
        ileum_reached=bool(np.any(seg == ileum)),
        retroflexion_performed=bool(np.any(seg == retro)),
        outside_trimmed_ranges=outside_ranges,
    )


def timeline_csv(stream: ProbabilityStream) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame"] + stream.schema.column_names())
    for t, row in enumerate(stream.probs):
        writer.writerow([t] + [f"{p:.6f}" for p in row])
    return buf.getvalue()


def export_timeline(stream: ProbabilityStream, path: Path | str) -> None:
    """CSV: ``frame,<group.class>...`` with one row of probabilities per frame."""
    Path(path).write_text(timeline_csv(stream))


def read_timeline(path: Path | str, schema: LabelSchema) -> ProbabilityStream:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["frame"] + schema.column_names():
        raise ShapeMismatch(f"{path}: header does not match schema")
    probs = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64)
    return ProbabilityStream(probs.reshape(len(rows) - 1, schema.total_width), schema)
