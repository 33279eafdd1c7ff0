"""Multi-label multi-stage temporal convolutional network.

Every stage is a stack of dilated residual 1-D convolutions that outputs one
logit per class of every label group.  A softmax is applied separately to each
group's logits and the concatenated probabilities of all groups feed the next
stage, so later stages can use cross-group evidence (tools are rare outside
the body, for example).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import EmptyCorpus, ShapeMismatch
from .schema import ABSENT, LabelSchema
from .storage import load_checkpoint, save_checkpoint
from .streams import ProbabilityStream, group_softmax

log = logging.getLogger(__name__)


@dataclass
class TemporalConfig:
    stages: int = 2
    layers: int = 13
    filters: int = 64
    kernel_size: int = 3
    lambda_smooth: float = 0.15
    # per-group loss weight; groups not listed get 1.0
    label_weights: dict[str, float] = field(default_factory=dict)
    # "l2": squared difference of consecutive probabilities; "tmse": truncated log-prob MSE
    smoothing: str = "l2"
    dropout: float = 0.5
    lr: float = 5e-4
    epochs: int = 10
    stride: int = 1
    shuffle: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.stages < 1 or self.layers < 1:
            raise ValueError("stages and layers must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.smoothing not in ("l2", "tmse"):
            raise ValueError(f"unknown smoothing {self.smoothing!r}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def weights_for(self, schema: LabelSchema) -> list[float]:
        return [float(self.label_weights.get(g.name, 1.0)) for g in schema.groups]


class DilatedResidualLayer(nn.Module):
    def __init__(self, filters: int, dilation: int, kernel_size: int = 3, dropout: float = 0.0):
        super().__init__()
        pad = dilation * (kernel_size - 1) // 2
        self.conv_dilated = nn.Conv1d(
            filters, filters, kernel_size, padding=pad, dilation=dilation, padding_mode="replicate"
        )
        self.conv_1x1 = nn.Conv1d(filters, filters, 1)
        self.dropout = nn.Dropout(dropout)
        self.linear = False  # disables the ReLU; used to probe the receptive field

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv_dilated(x)
        if not self.linear:
            h = torch.relu(h)
        return x + self.dropout(self.conv_1x1(h))


class Stage(nn.Module):
    def __init__(self, in_dim: int, filters: int, out_dim: int, layers: int, kernel_size: int = 3, dropout: float = 0.0):
        super().__init__()
        self.in_dim = in_dim
        self.conv_in = nn.Conv1d(in_dim, filters, 1)
        self.layers = nn.ModuleList(
            [DilatedResidualLayer(filters, 2**i, kernel_size, dropout) for i in range(layers)]
        )
        self.conv_out = nn.Conv1d(filters, out_dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(N, in_dim, T) -> (N, total_width, T)`` logits."""
        if x.ndim != 3 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"stage expects (N, {self.in_dim}, T), got {tuple(x.shape)}")
        h = self.conv_in(x)
        for layer in self.layers:
            h = layer(h)
        return self.conv_out(h)

    def set_linear(self, flag: bool = True) -> None:
        for layer in self.layers:
            layer.linear = flag


class MultiStageTCN(nn.Module):
    def __init__(self, input_dim: int, schema: LabelSchema, config: TemporalConfig | None = None):
        super().__init__()
        config = config or TemporalConfig()
        config.validate()
        self.schema = schema
        self.input_dim = input_dim
        self.config = config
        W = schema.total_width
        args = (config.filters, W, config.layers, config.kernel_size, config.dropout)
        self.stages = nn.ModuleList(
            [Stage(input_dim, *args)] + [Stage(W, *args) for _ in range(config.stages - 1)]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage logits, each ``(N, total_width, T)``; ``x`` is ``(N, input_dim, T)``."""
        outputs = []
        h = x
        for stage in self.stages:
            logits = stage(h)
            outputs.append(logits)
            h = group_softmax(logits, self.schema, dim=1)
        return outputs

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _as_input(model: MultiStageTCN, embeddings) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(embeddings), dtype=next(model.parameters()).dtype)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeMismatch(f"embeddings {tuple(x.shape)} do not match input dim {model.input_dim}")
    return x.T.unsqueeze(0)


def dilated_stage_forward(stage: Stage, inputs) -> torch.Tensor:
    """``(T, C) -> (T, total_width)`` logits of a single stage."""
    x = torch.as_tensor(np.asarray(inputs), dtype=next(stage.parameters()).dtype)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected (T, C) input, got {tuple(x.shape)}")
    return stage(x.T.unsqueeze(0))[0].T


@torch.no_grad()
def mstcn_forward(model: MultiStageTCN, embeddings) -> list[ProbabilityStream]:
    was_training = model.training
    model.eval()
    try:
        outs = model(_as_input(model, embeddings))
    finally:
        model.train(was_training)
    return [
        ProbabilityStream(group_softmax(o[0].T.double(), model.schema, dim=1).numpy(), model.schema)
        for o in outs
    ]


def predict(model: MultiStageTCN, embeddings) -> ProbabilityStream:
    """Final-stage probability stream."""
    return mstcn_forward(model, embeddings)[-1]


def frame_label_loss(
    logits: torch.Tensor, targets, lambda_smooth: float = 0.15, smoothing: str = "l2"
) -> torch.Tensor:
    """Loss of one label group at one stage.

    ``logits`` is ``(T, width)`` for the group, ``targets`` a length-T sequence
    of class indices with ``ABSENT`` for unannotated frames.  The cross-entropy
    is averaged over annotated frames; the smoothing term sums the squared
    difference of consecutive probability vectors over t = 1..T-1 and divides
    by ``T * width``.
    """
    T, width = logits.shape
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    logp = torch.log_softmax(logits, dim=1)
    present = targets != ABSENT
    ce = logits.new_zeros(())
    if present.any():
        ce = -logp[present, targets[present]].mean()
    if T < 2 or lambda_smooth == 0:
        return ce
    if smoothing == "l2":
        p = logp.exp()
        smooth = ((p[1:] - p[:-1]) ** 2).sum() / (T * width)
    else:
        smooth = torch.clamp((logp[1:] - logp[:-1].detach()) ** 2, max=16.0).sum() / (T * width)
    return ce + lambda_smooth * smooth


def total_loss(
    stage_logits: Sequence[torch.Tensor],
    targets,
    schema: LabelSchema,
    config: TemporalConfig | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum over stages and groups of :func:`frame_label_loss`.

    ``stage_logits`` holds ``(T, total_width)`` tensors (or the ``(1, W, T)``
    model outputs); returns the loss and a per-group breakdown for logging.
    """
    config = config or TemporalConfig()
    targets = np.asarray(targets)
    weights = config.weights_for(schema)
    total = stage_logits[0].new_zeros(())
    per_group = {g.name: 0.0 for g in schema.groups}
    for logits in stage_logits:
        if logits.ndim == 3:
            logits = logits[0].T
        for k, (g, sl) in enumerate(zip(schema.groups, schema.slices)):
            l = frame_label_loss(logits[:, sl], targets[:, k], config.lambda_smooth, config.smoothing)
            total = total + weights[k] * l
            per_group[g.name] += float(l.detach())
    return total, per_group


@dataclass
class TemporalSample:
    id: str
    embeddings: np.ndarray  # (T, E)
    targets: np.ndarray  # (T, K)


def train_temporal(
    samples: Sequence[TemporalSample],
    schema: LabelSchema,
    config: TemporalConfig | None = None,
    log_fh=None,
) -> tuple[MultiStageTCN, list[dict]]:
    """Adam, one video per step, ``config.epochs`` passes over ``samples``."""
    config = config or TemporalConfig()
    config.validate()
    samples = [s for s in samples if len(s.embeddings)]
    if not samples:
        raise EmptyCorpus("no videos to train the temporal network on")
    rng = np.random.default_rng([config.seed, 2])
    history: list[dict] = []
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = MultiStageTCN(samples[0].embeddings.shape[1], schema, config)
        opt = torch.optim.Adam(model.parameters(), lr=config.lr)
        model.train()
        step = 0
        for epoch in range(config.epochs):
            order = rng.permutation(len(samples)) if config.shuffle else np.arange(len(samples))
            for i in order:
                s = samples[i]
                emb = s.embeddings[:: config.stride]
                tgt = s.targets[:: config.stride]
                outs = model(_as_input(model, emb))
                loss, per_group = total_loss(outs, tgt, schema, config)
                opt.zero_grad()
                loss.backward()
                opt.step()
                entry = {"step": step, "epoch": epoch, "video_id": s.id, "loss": loss.item(), "per_group_loss": per_group}
                history.append(entry)
                if log_fh is not None:
                    log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                step += 1
    model.eval()
    return model, history


def save_temporal(model: MultiStageTCN, path, step: int = 0, config_hash: str | None = None) -> None:
    cfg = asdict(model.config)
    header = {
        "kind": "temporal",
        "schema": model.schema.to_dict(),
        "schema_hash": model.schema.hash(),
        "dims": {"input_dim": model.input_dim, "total_width": model.schema.total_width},
        "config": cfg,
        "step": step,
        "config_hash": config_hash,
    }
    blocks = [(name, p.detach().cpu().numpy()) for name, p in model.state_dict().items()]
    save_checkpoint(path, header, blocks)


def load_temporal(path) -> tuple[MultiStageTCN, dict]:
    header, blocks = load_checkpoint(path)
    if header.get("kind") != "temporal":
        raise ShapeMismatch(f"{path} is not a temporal-network checkpoint")
    schema = LabelSchema.from_dict(header["schema"])
    model = MultiStageTCN(header["dims"]["input_dim"], schema, TemporalConfig(**header["config"]))
    model.load_state_dict({n: torch.from_numpy(a) for n, a in blocks})
    model.eval()
    return model, header
