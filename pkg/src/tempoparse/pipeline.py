"""End-to-end pipeline: key-frame encoder -> frame embeddings -> multi-stage temporal net.

Also hosts the synthetic experiments used by the acceptance suite and the
scripts in ``scripts/``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .config import PipelineConfig
from .encoder import EncoderConfig, FrameEncoder, embed_video, predict_logits, train_encoder
from .evaluation import EvalResult, balanced_accuracy, evaluate
from .pseudolabel import as_unlabeled, build_pseudo_dataset, make_gaussian_kernel
from .schema import Corpus, LabelSchema, VideoRecord, record_targets
from .streams import ProbabilityStream, decode_labels, per_group_softmax
from .tempnet import MultiStageTCN, TemporalConfig, TemporalSample, predict, train_temporal

log = logging.getLogger(__name__)


@dataclass
class ModelStack:
    encoder: FrameEncoder
    temporal: MultiStageTCN

    def stream(self, record: VideoRecord) -> ProbabilityStream:
        return predict(self.temporal, embed_video(self.encoder, record))

    def __call__(self, record: VideoRecord) -> np.ndarray:
        return decode_labels(self.stream(record))


def temporal_samples(encoder: FrameEncoder, records: Sequence[VideoRecord], schema: LabelSchema) -> list[TemporalSample]:
    return [TemporalSample(r.id, embed_video(encoder, r), record_targets(r, schema)) for r in records]


def train_stack(
    train: Corpus,
    encoder_cfg: EncoderConfig,
    temporal_cfg: TemporalConfig,
    pseudo: Corpus | None = None,
) -> ModelStack:
    encoder, _ = train_encoder(train, encoder_cfg, pseudo=pseudo)
    samples = temporal_samples(encoder, train.records, train.schema)
    temporal, _ = train_temporal(samples, train.schema, temporal_cfg)
    return ModelStack(encoder, temporal)


def run_protocol(corpus: Corpus, cfg: PipelineConfig) -> tuple[EvalResult, list[ModelStack]]:
    """Retrain the full stack once per evaluation seed and score each on the test split."""
    train, test = corpus.subset("train"), corpus.subset("test")
    stacks = []
    for seed in cfg.evaluation.run_seeds(cfg.seed):
        log.info("protocol run with seed %d", seed)
        stacks.append(
            train_stack(train, replace(cfg.encoder, seed=seed), replace(cfg.temporal, seed=seed))
        )
    return evaluate(stacks, test.records, corpus.schema), stacks


def encoder_group_scores(encoder: FrameEncoder, records: Sequence[VideoRecord], schema: LabelSchema) -> dict[str, float]:
    """Per-frame scores of the encoder heads alone.

    ``<group>_acc`` is plain multi-class accuracy of the group; ``<label>_bacc``
    is one-vs-rest balanced accuracy of the binary labels tool and outside.
    """
    X = np.concatenate([r.features for r in records])
    Y = np.concatenate([record_targets(r, schema) for r in records])
    pred = decode_labels(per_group_softmax(predict_logits(encoder, X), schema))
    out = {}
    for k, g in enumerate(schema.groups):
        keep = Y[:, k] >= 0
        out[f"{g.name}_acc"] = float(np.mean(pred[keep, k] == Y[keep, k]))
    for label, group in (("tool", "tool"), ("outside", "inout")):
        k = schema.group_index(group)
        c = schema.group(group).index(label)
        out[f"{label}_bacc"] = balanced_accuracy(pred[:, k] == c, Y[:, k] == c)
    return out


def keyframe_ablation(corpus: Corpus, encoder_cfg: EncoderConfig, seeds: Sequence[int]) -> dict[str, list[dict]]:
    """Encoder test scores for key-frame vs random-segment sampling, one entry per seed."""
    train, test = corpus.subset("train"), corpus.subset("test")
    out: dict[str, list[dict]] = {"keyframe": [], "random_segment": []}
    for strategy in out:
        for seed in seeds:
            enc, _ = train_encoder(train, replace(encoder_cfg, strategy=strategy, seed=seed))
            out[strategy].append(encoder_group_scores(enc, test.records, corpus.schema))
    return out


def pseudo_label_ablation(
    corpus: Corpus,
    encoder_cfg: EncoderConfig,
    seeds: Sequence[int],
    labeled_fraction: float = 0.1,
    sigma: float = 5.0,
    M: int = 10,
    hard: bool = False,
    rounds: int = 1,
) -> dict[str, list]:
    """Labelled-only encoder vs. the same encoder retrained with pseudo-labelled videos.

    The first ``labeled_fraction`` of the training videos (by id) keep their
    annotations; the rest are stripped and pseudo-labelled.
    """
    train, test = corpus.subset("train"), corpus.subset("test")
    records = sorted(train.records, key=lambda r: r.id)
    n_lab = max(1, int(round(labeled_fraction * len(records))))
    labeled = Corpus(corpus.schema, records[:n_lab], {r.id: "train" for r in records[:n_lab]})
    pool = as_unlabeled(records[n_lab:])
    kernel = make_gaussian_kernel(sigma, M)
    out: dict[str, list] = {"baseline": [], "pseudo": [], "reports": []}
    for seed in seeds:
        cfg = replace(encoder_cfg, seed=seed)
        enc, _ = train_encoder(labeled, cfg)
        out["baseline"].append(encoder_group_scores(enc, test.records, corpus.schema))
        for _ in range(rounds):
            pseudo, report = build_pseudo_dataset(enc, pool, kernel, hard=hard, schema=corpus.schema)
            enc, _ = train_encoder(labeled, cfg, pseudo=pseudo)
            out["reports"].append(report.to_dict())
        out["pseudo"].append(encoder_group_scores(enc, test.records, corpus.schema))
    return out
