"""Per-label balanced accuracy and the multi-run evaluation protocol."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DegenerateTruth, ShapeMismatch
from .schema import ABSENT, LabelSchema, VideoRecord, record_targets

log = logging.getLogger(__name__)

# reported label -> (group, class); each is scored one-vs-rest per frame
LABELS = {
    "ileum": ("segment", "ileum"),
    "cecum": ("segment", "cecum"),
    "retroflexion": ("segment", "retroflexion"),
    "outside": ("inout", "outside"),
    "tool": ("tool", "tool"),
}


def balanced_accuracy(pred, truth) -> float:
    """Mean of sensitivity and specificity of boolean predictions."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs truth {truth.shape}")
    pos, neg = truth.sum(), (~truth).sum()
    if pos == 0 or neg == 0:
        raise DegenerateTruth("truth must contain both positives and negatives")
    sens = np.count_nonzero(pred & truth) / pos
    spec = np.count_nonzero(~pred & ~truth) / neg
    return float((sens + spec) / 2)


def label_accuracies(
    pred_labels: Sequence[np.ndarray], true_labels: Sequence[np.ndarray], schema: LabelSchema,
    labels: Mapping[str, tuple[str, str]] = LABELS,
) -> dict[str, float]:
    """Balanced accuracy per reported label over all frames of all videos.

    Frames whose true target is absent for the label's group are ignored;
    labels with single-class truth are skipped with a warning.
    """
    pred = np.concatenate(pred_labels) if pred_labels else np.zeros((0, len(schema.groups)), int)
    true = np.concatenate(true_labels) if true_labels else np.zeros((0, len(schema.groups)), int)
    out = {}
    for name, (group, cls) in labels.items():
        k = schema.group_index(group)
        c = schema.group(group).index(cls)
        keep = true[:, k] != ABSENT
        try:
            out[name] = balanced_accuracy(pred[keep, k] == c, true[keep, k] == c)
        except DegenerateTruth:
            warnings.warn(f"label {name!r} skipped: truth holds a single class", stacklevel=2)
    return out


@dataclass
class EvalResult:
    runs: list[dict[str, float]] = field(default_factory=list)

    @property
    def labels(self) -> list[str]:
        names: list[str] = []
        for r in self.runs:
            names += [n for n in r if n not in names]
        return names

    def per_run_average(self) -> list[float]:
        return [float(np.mean(list(r.values()))) for r in self.runs]

    @staticmethod
    def _stats(values: Sequence[float]) -> dict:
        v = np.asarray(values, dtype=np.float64)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        return {"mean": float(v.mean()), "std": std, "runs": [float(x) for x in v]}

    def per_label(self) -> dict[str, dict]:
        return {n: self._stats([r[n] for r in self.runs if n in r]) for n in self.labels}

    def average(self) -> dict:
        return self._stats(self.per_run_average())

    def to_dict(self) -> dict:
        return {"average": self.average(), "per_label": self.per_label()}


def evaluate(
    predictors: Sequence[Callable[[VideoRecord], np.ndarray]],
    test_records: Sequence[VideoRecord],
    schema: LabelSchema,
) -> EvalResult:
    """One run per predictor; a predictor maps a video to ``(T, K)`` decoded labels."""
    truth = [record_targets(r, schema) for r in test_records]
    result = EvalResult()
    for i, predictor in enumerate(predictors):
        preds = [predictor(r) for r in test_records]
        scores = label_accuracies(preds, truth, schema)
        log.info("run %d: %s", i, {k: round(v, 4) for k, v in scores.items()})
        result.runs.append(scores)
    return result
