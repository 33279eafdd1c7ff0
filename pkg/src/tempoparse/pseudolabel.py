"""Pseudo-labelling of unlabelled videos with temporal smoothing and consistency filtering.

The encoder's per-frame class probabilities are smoothed along time with a
normalised Gaussian kernel.  Videos whose smoothed predictions break the
outside -> inside -> outside pattern, or show a tool while outside the body,
are discarded; the rest become soft-target records for the inout and tool
groups.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .encoder import FrameEncoder, predict_logits
from .errors import EmptyStream, InvalidParameter, MissingGroup, ShapeMismatch
from .schema import Corpus, LabelSchema, VideoRecord
from .streams import ProbabilityStream, decode_labels, per_group_softmax

PSEUDO_GROUPS = ("tool", "inout")
REASONS = ("ok", "start_not_outside", "end_not_outside", "middle_not_inside", "tool_outside_overlap")


@dataclass(frozen=True, eq=False)
class GaussianKernel:
    sigma: float
    M: int
    weights: np.ndarray  # index m + M holds the weight of offset m


@dataclass(frozen=True)
class FilterVerdict:
    accepted: bool
    reason: str


@dataclass
class PseudoLabelConfig:
    sigma: float = 5.0
    M: int = 10
    # emit one-hot argmax targets instead of smoothed distributions
    hard: bool = False
    # number of pseudo-label / retrain rounds
    rounds: int = 1


def make_gaussian_kernel(sigma: float, M: int) -> GaussianKernel:
    if not sigma > 0:
        raise InvalidParameter(f"sigma must be > 0, got {sigma}")
    if M < 0 or int(M) != M:
        raise InvalidParameter(f"M must be a nonnegative integer, got {M}")
    m = np.arange(-M, M + 1, dtype=np.float64)
    w = np.exp(-(m**2) / (2.0 * sigma**2))
    w /= w.sum()
    # exact symmetry regardless of summation rounding
    w = 0.5 * (w + w[::-1])
    return GaussianKernel(float(sigma), int(M), w)


def predict_streams(model: FrameEncoder, video: VideoRecord | np.ndarray) -> ProbabilityStream:
    feats = video.features if isinstance(video, VideoRecord) else np.asarray(video)
    if feats.ndim != 2 or feats.shape[1] != model.in_dim:
        raise ShapeMismatch(f"features {feats.shape} do not match encoder input {model.in_dim}")
    return per_group_softmax(predict_logits(model, feats), model.schema)


def smooth_stream(stream: ProbabilityStream | np.ndarray, kernel: GaussianKernel):
    """Convolve every column with the kernel along time.

    Near the ends the kernel is truncated to the frames that exist and
    renormalised, so constant streams stay constant and rows stay normalised.
    Returns the same type it was given.
    """
    probs = stream.probs if isinstance(stream, ProbabilityStream) else np.asarray(stream, dtype=np.float64)
    T = probs.shape[0]
    if T == 0:
        raise EmptyStream("cannot smooth an empty stream")
    num = np.zeros_like(probs, dtype=np.float64)
    den = np.zeros(T, dtype=np.float64)
    for i, m in enumerate(range(-kernel.M, kernel.M + 1)):
        # out[t] += w[m] * y[t - m] for 0 <= t - m < T
        lo, hi = max(0, m), min(T, T + m)
        if lo >= hi:
            continue
        w = kernel.weights[i]
        num[lo:hi] += w * probs[lo - m : hi - m]
        den[lo:hi] += w
    out = num / den[:, None]
    if isinstance(stream, ProbabilityStream):
        return ProbabilityStream(out, stream.schema)
    return out


def consistency_filter(stream: ProbabilityStream) -> FilterVerdict:
    """Accept iff the video starts and ends outside, is inside at its middle
    frame, and never shows a tool while outside.  The first failing rule, in
    that order, is reported."""
    schema = stream.schema
    for name in PSEUDO_GROUPS:
        if name not in schema.names:
            raise MissingGroup(f"stream lacks group {name!r}")
    if stream.T == 0:
        raise EmptyStream("cannot filter an empty stream")
    labels = decode_labels(stream)
    io = labels[:, schema.group_index("inout")]
    tool = labels[:, schema.group_index("tool")]
    inside = schema.group("inout").index("inside")
    outside = schema.group("inout").index("outside")
    T = stream.T
    if io[0] != outside:
        return FilterVerdict(False, "start_not_outside")
    if io[T - 1] != outside:
        return FilterVerdict(False, "end_not_outside")
    if io[T // 2] != inside:
        return FilterVerdict(False, "middle_not_inside")
    if np.any((tool == schema.group("tool").index("tool")) & (io == outside)):
        return FilterVerdict(False, "tool_outside_overlap")
    return FilterVerdict(True, "ok")


@dataclass
class PseudoReport:
    total: int
    accepted: int
    rejected_by_reason: dict[str, int]

    @property
    def acceptance_rate(self) -> float | None:
        return self.accepted / self.total if self.total else None

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "acceptance_rate": self.acceptance_rate,
            "rejected_by_reason": dict(self.rejected_by_reason),
            "total": self.total,
        }


def pseudo_label_video(
    model: FrameEncoder, video: VideoRecord, kernel: GaussianKernel, hard: bool = False
) -> tuple[VideoRecord | None, FilterVerdict]:
    smoothed = smooth_stream(predict_streams(model, video), kernel)
    verdict = consistency_filter(smoothed)
    if not verdict.accepted:
        return None, verdict
    soft = {}
    for name in PSEUDO_GROUPS:
        block = smoothed.group(name)
        if hard:
            block = np.eye(block.shape[1])[np.argmax(block, axis=1)]
        soft[name] = block.astype(np.float32)
    rec = replace(video, annotations=(), provenance="pseudo", soft_targets=soft)
    return rec, verdict


def build_pseudo_dataset(
    model: FrameEncoder,
    pool: Corpus | Sequence[VideoRecord],
    kernel: GaussianKernel,
    hard: bool = False,
    schema: LabelSchema | None = None,
) -> tuple[Corpus, PseudoReport]:
    """Pseudo-label every unlabelled video of ``pool``; rejected videos are dropped."""
    records = pool.records if isinstance(pool, Corpus) else list(pool)
    schema = pool.schema if isinstance(pool, Corpus) else (schema or model.schema)
    bad = [r.id for r in records if r.provenance != "unlabeled"]
    if bad:
        raise InvalidParameter(f"pool records must have provenance 'unlabeled': {bad[:5]}")
    kept: list[VideoRecord] = []
    reasons: Counter[str] = Counter()
    for rec in sorted(records, key=lambda r: r.id):
        if rec.T == 0:
            reasons["empty"] += 1
            continue
        out, verdict = pseudo_label_video(model, rec, kernel, hard)
        if out is None:
            reasons[verdict.reason] += 1
        else:
            kept.append(out)
    report = PseudoReport(len(records), len(kept), dict(sorted(reasons.items())))
    corpus = Corpus(schema, kept, {r.id: "train" for r in kept})
    return corpus, report


def as_unlabeled(records: Sequence[VideoRecord]) -> list[VideoRecord]:
    """Strip annotations and mark records as unlabelled (simulates an unannotated pool)."""
    return [
        replace(r, annotations=(), keyframe_flags=None, provenance="unlabeled", soft_targets=None)
        for r in records
    ]
