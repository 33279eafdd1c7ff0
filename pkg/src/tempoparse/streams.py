"""Probability streams: per-frame concatenations of per-group class distributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeMismatch
from .schema import LabelSchema


@dataclass(frozen=True, eq=False)
class ProbabilityStream:
    probs: np.ndarray  # (T, total_width)
    schema: LabelSchema

    def __post_init__(self):
        if self.probs.ndim != 2 or self.probs.shape[1] != self.schema.total_width:
            raise ShapeMismatch(
                f"stream shape {self.probs.shape} incompatible with width {self.schema.total_width}"
            )

    @property
    def T(self) -> int:
        return self.probs.shape[0]

    def group(self, name: str) -> np.ndarray:
        return self.probs[:, self.schema.slice_of(name)]


def per_group_softmax(logits: np.ndarray, schema: LabelSchema) -> ProbabilityStream:
    """Softmax applied independently to each group's slice of every row."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != schema.total_width:
        raise ShapeMismatch(f"logits shape {logits.shape}, expected (T, {schema.total_width})")
    out = np.empty_like(logits)
    for sl in schema.slices:
        z = logits[:, sl]
        e = np.exp(z - z.max(axis=1, keepdims=True))
        out[:, sl] = e / e.sum(axis=1, keepdims=True)
    return ProbabilityStream(out, schema)


def group_softmax(logits: torch.Tensor, schema: LabelSchema, dim: int = -1, log: bool = False) -> torch.Tensor:
    """Torch counterpart of :func:`per_group_softmax` along ``dim``."""
    if logits.shape[dim] != schema.total_width:
        raise ShapeMismatch(f"logit width {logits.shape[dim]} != {schema.total_width}")
    fn = torch.log_softmax if log else torch.softmax
    parts = torch.split(logits, schema.widths, dim=dim)
    return torch.cat([fn(p, dim=dim) for p in parts], dim=dim)


def one_hot_stream(targets: np.ndarray, schema: LabelSchema) -> ProbabilityStream:
    """Stream that puts all mass on the target class; absent targets become uniform."""
    T = targets.shape[0]
    probs = np.zeros((T, schema.total_width))
    for k, (g, sl) in enumerate(zip(schema.groups, schema.slices)):
        block = np.full((T, g.width), 1.0 / g.width)
        present = targets[:, k] >= 0
        block[present] = np.eye(g.width)[targets[present, k]]
        probs[:, sl] = block
    return ProbabilityStream(probs, schema)


def decode_labels(stream: ProbabilityStream) -> np.ndarray:
    """Per-frame argmax for every group, ``(T, K)``; ties go to the lower class index."""
    return np.stack(
        [np.argmax(stream.probs[:, sl], axis=1) for sl in stream.schema.slices], axis=1
    ).astype(np.int64)
