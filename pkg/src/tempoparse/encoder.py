"""Per-frame multi-head encoder: a shared trunk followed by one head per label group.

The trunk maps frame features to an embedding; each head maps the embedding to
its group's logits.  After training only the trunk is kept and used to embed
frames for the temporal network.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import AllTargetsAbsent, NoKeyframesAvailable, ShapeMismatch, UnnormalizedTarget
from .schema import ABSENT, Corpus, LabelSchema, VideoRecord, record_targets
from .storage import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STRATEGIES = ("random_segment", "keyframe")


@dataclass
class EncoderConfig:
    # one strategy for every group, or a mapping group name -> strategy
    strategy: str | dict[str, str] = "keyframe"
    steps: int = 1500
    lr: float = 1e-3
    batch_size: int = 64
    quota: int = 256
    hidden: tuple[int, ...] = (128, 64)
    soft_weight: float = 1.0
    seed: int = 0

    def strategy_for(self, group: str) -> str:
        s = self.strategy.get(group, "keyframe") if isinstance(self.strategy, dict) else self.strategy
        if s not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {s!r}")
        return s


class FrameEncoder(nn.Module):
    def __init__(self, in_dim: int, schema: LabelSchema, hidden: Sequence[int] = (128, 64)):
        super().__init__()
        self.schema = schema
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        layers: list[nn.Module] = []
        width = in_dim
        for h in self.hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        self.trunk = nn.Sequential(*layers)
        self.embed_dim = width
        self.heads = nn.ModuleList([nn.Linear(width, g.width) for g in schema.groups])

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"expected (B, {self.in_dim}) features, got {tuple(x.shape)}")
        emb = self.trunk(x)
        return emb, torch.cat([h(emb) for h in self.heads], dim=1)

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def encoder_forward(model: FrameEncoder, features) -> tuple[torch.Tensor, torch.Tensor]:
    """``(embeddings (B, E), logits (B, total_width))``; logits follow the schema layout."""
    x = torch.as_tensor(np.asarray(features), dtype=next(model.parameters()).dtype)
    return model(x)


@dataclass
class FrameBatch:
    features: np.ndarray  # (B, D)
    targets: np.ndarray | None = None  # (B, K) hard class indices, ABSENT where missing
    soft: np.ndarray | None = None  # (B, total_width) distributions
    present: np.ndarray | None = None  # (B, K) which soft groups are present
    weights: np.ndarray | None = None  # (B,)

    def __post_init__(self):
        B = len(self.features)
        for name in ("targets", "soft", "present", "weights"):
            v = getattr(self, name)
            if v is not None and len(v) != B:
                raise ShapeMismatch(f"{name} has {len(v)} rows, features have {B}")

    def __len__(self) -> int:
        return len(self.features)


def _as_tensor(a, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=like.dtype)


def supervised_loss(model: FrameEncoder, batch: FrameBatch) -> torch.Tensor:
    """Sum over samples and present groups of the cross-entropy of each head."""
    p0 = next(model.parameters())
    targets = np.asarray(batch.targets)
    if len(batch) == 0 or not (targets != ABSENT).any():
        raise AllTargetsAbsent("batch has no present targets")
    _, logits = model(_as_tensor(batch.features, p0))
    w = _as_tensor(batch.weights, p0) if batch.weights is not None else None
    total = logits.new_zeros(())
    for k, sl in enumerate(model.schema.slices):
        rows = np.flatnonzero(targets[:, k] != ABSENT)
        if rows.size == 0:
            continue
        logp = torch.log_softmax(logits[rows, sl], dim=1)
        nll = -logp[torch.arange(rows.size), torch.as_tensor(targets[rows, k])]
        total = total + (nll * w[rows]).sum() if w is not None else total + nll.sum()
    return total


def soft_target_loss(model: FrameEncoder, batch: FrameBatch, atol: float = 1e-6) -> torch.Tensor:
    """Cross-entropy against soft target distributions over present groups."""
    p0 = next(model.parameters())
    soft = np.asarray(batch.soft, dtype=np.float64)
    present = np.asarray(batch.present, dtype=bool)
    _, logits = model(_as_tensor(batch.features, p0))
    w = _as_tensor(batch.weights, p0) if batch.weights is not None else None
    total = logits.new_zeros(())
    for k, sl in enumerate(model.schema.slices):
        rows = np.flatnonzero(present[:, k])
        if rows.size == 0:
            continue
        q = soft[rows, sl]
        if (q < 0).any() or np.abs(q.sum(axis=1) - 1.0).max() > atol:
            raise UnnormalizedTarget(f"soft targets of group {model.schema.groups[k].name!r} not normalized")
        logp = torch.log_softmax(logits[rows, sl], dim=1)
        ce = -(torch.as_tensor(q, dtype=logp.dtype) * logp).sum(dim=1)
        total = total + (ce * w[rows]).sum() if w is not None else total + ce.sum()
    return total


class FramePool:
    """All frames of a set of records, flattened for fast sampling."""

    def __init__(self, records: Sequence[VideoRecord], schema: LabelSchema):
        self.schema = schema
        self.records = list(records)
        if self.records:
            self.features = np.concatenate([r.features for r in self.records]).astype(np.float32)
            self.targets = np.concatenate([record_targets(r, schema) for r in self.records])
        else:
            self.features = np.zeros((0, 0), dtype=np.float32)
            self.targets = np.zeros((0, len(schema.groups)), dtype=np.int64)
        has_flags = [r.keyframe_flags is not None for r in self.records]
        self.keyframes = (
            np.concatenate(
                [r.keyframe_flags if r.keyframe_flags is not None else np.zeros(r.T, bool) for r in self.records]
            )
            if any(has_flags)
            else None
        )


def sample_training_frames(
    pool: FramePool | Corpus | Sequence[VideoRecord],
    strategy: str | Mapping[str, str],
    quota: int,
    seed: int,
    schema: LabelSchema | None = None,
) -> FrameBatch:
    """One draw of training frames, ``quota`` per class of every group.

    ``random_segment`` draws uniformly from each class's annotated frames.
    ``keyframe`` draws positives for each class only from key frames and an
    equal number of negatives uniformly from frames annotated with any other
    class of the group.  Every sampled frame carries the target of the group it
    was drawn for and nothing else.
    """
    if isinstance(pool, Corpus):
        pool = FramePool(pool.records, pool.schema)
    elif not isinstance(pool, FramePool):
        pool = FramePool(pool, schema)
    rng = np.random.default_rng(seed)
    K = len(pool.schema.groups)
    idx_parts, tgt_parts = [], []

    def take(cand: np.ndarray, k: int) -> None:
        picked = rng.choice(cand, quota)
        t = np.full((quota, K), ABSENT, dtype=np.int64)
        t[:, k] = pool.targets[picked, k]
        idx_parts.append(picked)
        tgt_parts.append(t)

    for k, g in enumerate(pool.schema.groups):
        strat = strategy.get(g.name, "keyframe") if isinstance(strategy, Mapping) else strategy
        if strat not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {strat!r}")
        col = pool.targets[:, k]
        for c in range(g.width):
            if strat == "random_segment":
                cand = np.flatnonzero(col == c)
                if cand.size:
                    take(cand, k)
                continue
            if pool.keyframes is None:
                raise NoKeyframesAvailable("records carry no keyframe flags")
            cand = np.flatnonzero((col == c) & pool.keyframes)
            if cand.size == 0:
                if np.any(col == c):
                    raise NoKeyframesAvailable(f"no key frames for {g.name}.{g.classes[c]}")
                continue
            take(cand, k)
            neg = np.flatnonzero((col != c) & (col != ABSENT))
            if neg.size:
                take(neg, k)
    if not idx_parts:
        return FrameBatch(np.zeros((0, pool.features.shape[1]), np.float32), np.zeros((0, K), np.int64))
    idx = np.concatenate(idx_parts)
    return FrameBatch(pool.features[idx], np.concatenate(tgt_parts))


class SoftPool:
    """Frames of pseudo-labelled records, indexed by the argmax of each soft group."""

    def __init__(self, records: Sequence[VideoRecord], schema: LabelSchema):
        feats, soft, present = [], [], []
        for r in records:
            if not r.soft_targets:
                continue
            s = np.zeros((r.T, schema.total_width), dtype=np.float64)
            p = np.zeros((r.T, len(schema.groups)), dtype=bool)
            for name, arr in r.soft_targets.items():
                s[:, schema.slice_of(name)] = arr
                p[:, schema.group_index(name)] = True
            feats.append(r.features)
            soft.append(s)
            present.append(p)
        self.schema = schema
        self.empty = not feats
        if self.empty:
            return
        self.features = np.concatenate(feats)
        self.soft = _renormalize(np.concatenate(soft), schema)
        self.present = np.concatenate(present)
        self.buckets = []  # (group index, candidate rows) per (group, pseudo class)
        for k, sl in enumerate(schema.slices):
            rows = np.flatnonzero(self.present[:, k])
            if rows.size == 0:
                continue
            hard = np.argmax(self.soft[rows, sl], axis=1)
            for c in range(sl.stop - sl.start):
                cand = rows[hard == c]
                if cand.size:
                    self.buckets.append((k, cand))

    def sample(self, n: int, rng: np.random.Generator) -> FrameBatch:
        """``n`` frames spread evenly over the (group, pseudo class) buckets;
        each carries the soft target of its bucket's group only."""
        per = max(1, n // len(self.buckets))
        rows, present = [], []
        for k, cand in self.buckets:
            picked = rng.choice(cand, per)
            mask = np.zeros((per, len(self.schema.groups)), dtype=bool)
            mask[:, k] = True
            rows.append(picked)
            present.append(mask)
        rows = np.concatenate(rows)
        return FrameBatch(self.features[rows], soft=self.soft[rows], present=np.concatenate(present))


def _renormalize(soft: np.ndarray, schema: LabelSchema) -> np.ndarray:
    out = soft.copy()
    for sl in schema.slices:
        block = out[:, sl]
        sums = block.sum(axis=1, keepdims=True)
        out[:, sl] = np.where(sums > 0, block / np.where(sums > 0, sums, 1.0), block)
    return out


def train_encoder(
    corpus: Corpus | Sequence[VideoRecord],
    config: EncoderConfig | None = None,
    pseudo: Corpus | Sequence[VideoRecord] | None = None,
    schema: LabelSchema | None = None,
) -> tuple[FrameEncoder, list[dict]]:
    """Train a fresh encoder with Adam on sampled labelled frames.

    When ``pseudo`` records with soft targets are given, every step adds a
    class-balanced batch of pseudo-labelled frames trained with the
    soft-target loss.
    """
    config = config or EncoderConfig()
    if isinstance(corpus, Corpus):
        schema, records = corpus.schema, corpus.records
    else:
        records = list(corpus)
    if schema is None:
        raise ValueError("schema required when passing bare records")
    pool = FramePool(records, schema)
    pseudo_records = pseudo.records if isinstance(pseudo, Corpus) else (pseudo or [])
    soft = SoftPool(pseudo_records, schema)
    strategy = {g.name: config.strategy_for(g.name) for g in schema.groups}
    rng = np.random.default_rng([config.seed, 1])
    history: list[dict] = []
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = FrameEncoder(pool.features.shape[1], schema, config.hidden)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    batch_iter = _minibatches(pool, strategy, config, rng)
    for step in range(config.steps):
        batch = next(batch_iter)
        loss = supervised_loss(model, batch)
        entry = {"step": step, "loss": loss.item()}
        if not soft.empty:
            sl = soft_target_loss(model, soft.sample(config.batch_size, rng))
            entry["soft_loss"] = sl.item()
            loss = loss + config.soft_weight * sl
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(entry)
    log.debug("encoder trained for %d steps, final loss %.4f", config.steps, history[-1]["loss"] if history else float("nan"))
    return model, history


def _minibatches(pool: FramePool, strategy, config: EncoderConfig, rng: np.random.Generator):
    while True:
        draw = sample_training_frames(pool, strategy, config.quota, int(rng.integers(2**63)))
        if len(draw) == 0:
            raise AllTargetsAbsent("no annotated frames to train on")
        order = rng.permutation(len(draw))
        for i in range(0, len(order) - config.batch_size + 1, config.batch_size):
            rows = order[i : i + config.batch_size]
            yield FrameBatch(draw.features[rows], draw.targets[rows])


@torch.no_grad()
def embed_video(model: FrameEncoder, video: VideoRecord | np.ndarray) -> np.ndarray:
    """``(T, E)`` trunk embeddings; the heads are not used."""
    feats = video.features if isinstance(video, VideoRecord) else np.asarray(video)
    if feats.ndim != 2 or feats.shape[1] != model.in_dim:
        raise ShapeMismatch(f"video features {feats.shape} do not match encoder input {model.in_dim}")
    if feats.shape[0] == 0:
        return np.zeros((0, model.embed_dim), dtype=np.float32)
    emb, _ = encoder_forward(model, feats)
    return emb.numpy().astype(np.float32)


@torch.no_grad()
def predict_logits(model: FrameEncoder, features: np.ndarray) -> np.ndarray:
    _, logits = encoder_forward(model, features)
    return logits.numpy()


def save_encoder(model: FrameEncoder, path, step: int = 0, config_hash: str | None = None) -> None:
    header = {
        "kind": "encoder",
        "schema": model.schema.to_dict(),
        "schema_hash": model.schema.hash(),
        "dims": {"in_dim": model.in_dim, "hidden": list(model.hidden), "embed_dim": model.embed_dim},
        "step": step,
        "config_hash": config_hash,
    }
    blocks = [(name, p.detach().cpu().numpy()) for name, p in model.state_dict().items()]
    save_checkpoint(path, header, blocks)


def load_encoder(path) -> tuple[FrameEncoder, dict]:
    header, blocks = load_checkpoint(path)
    if header.get("kind") != "encoder":
        raise ShapeMismatch(f"{path} is not an encoder checkpoint")
    schema = LabelSchema.from_dict(header["schema"])
    model = FrameEncoder(header["dims"]["in_dim"], schema, header["dims"]["hidden"])
    model.load_state_dict({n: torch.from_numpy(a) for n, a in blocks})
    model.eval()
    return model, header


def config_dict(config: EncoderConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden)
    return d
