"""Synthetic procedure corpora with complete ground truth.

A procedure follows the grammar

    outside -> intubation -> [ileum] -> cecum -> withdrawal -> [retroflexion]
            -> rectum -> outside

with an optional outside excursion (scope re-insertion) early in intubation and
tool intervals during withdrawal.  Frame features are the prototype of the
frame's (tool, segment, inout) label combination plus Gaussian noise; blurred
frames replace the prototype with a single uninformative one while keeping
their true labels.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigInvalid
from .schema import Corpus, LabelSchema, VideoRecord, default_schema, targets_to_annotations

# phase name -> (segment class, inout class)
PHASES = {
    "outside_pre": ("other", "outside"),
    "intubation": ("other", "inside"),
    "ileum": ("ileum", "inside"),
    "cecum": ("cecum", "inside"),
    "withdrawal": ("other", "inside"),
    "retroflexion": ("retroflexion", "inside"),
    "rectum": ("other", "inside"),
    "outside_post": ("other", "outside"),
}
OPTIONAL_PHASES = {"ileum": "p_ileum", "retroflexion": "p_retroflexion"}
VIOLATION_MIN_FRAMES = 24
VIOLATION_KINDS = ("ends_inside", "middle_outside", "tool_outside")


def _default_phases() -> dict[str, tuple[float, float]]:
    # (median relative weight, log-normal sigma)
    return {
        "outside_pre": (0.07, 0.3),
        "intubation": (0.28, 0.3),
        "ileum": (0.06, 0.3),
        "cecum": (0.10, 0.3),
        "withdrawal": (0.34, 0.3),
        "retroflexion": (0.05, 0.3),
        "rectum": (0.04, 0.3),
        "outside_post": (0.06, 0.3),
    }


@dataclass
class GeneratorConfig:
    feature_dim: int = 32
    t_min: int = 300
    t_max: int = 800
    phases: dict[str, tuple[float, float]] = field(default_factory=_default_phases)
    min_phase_frames: int = 8
    p_ileum: float = 0.5
    p_retroflexion: float = 0.6
    p_reinsertion: float = 0.1
    p_blur: float = 0.3
    feature_noise_sigma: float = 1.0
    # distance between the prototypes of two levels of one label factor
    prototype_separation: float = 6.0
    # per-video additive shift, mimicking device/lighting variation between videos
    video_shift_sigma: float = 0.0
    # per-video appearance offsets of outside-body scenes and of the tool in use
    scene_sigma: float = 3.0
    tool_appearance_sigma: float = 1.0
    # keyframe iff not blurred and |noise| <= factor * sigma * sqrt(D)
    keyframe_noise_factor: float = 1.0
    tool_rate: float = 1.5
    tool_len_median: float = 40.0
    tool_len_sigma: float = 0.4
    min_tool_frames: int = 12
    fps: float = 30.0
    train_fraction: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        for name in ("p_ileum", "p_retroflexion", "p_reinsertion", "p_blur", "train_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigInvalid(f"{name}={v} outside [0, 1]")
        if self.t_min < 50 or self.t_max < self.t_min:
            raise ConfigInvalid(f"frame range [{self.t_min}, {self.t_max}] invalid (t_min >= 50)")
        if self.feature_dim < 2:
            raise ConfigInvalid("feature_dim must be >= 2")
        if min(self.feature_noise_sigma, self.video_shift_sigma, self.scene_sigma, self.tool_appearance_sigma) < 0:
            raise ConfigInvalid("noise scales must be nonnegative")
        missing = set(PHASES) - set(self.phases)
        if missing:
            raise ConfigInvalid(f"phase durations missing for {sorted(missing)}")
        if any(m <= 0 or s < 0 for m, s in self.phases.values()):
            raise ConfigInvalid("phase medians must be > 0 and sigmas >= 0")
        if len(PHASES) * self.min_phase_frames > self.t_min:
            raise ConfigInvalid("t_min too small for min_phase_frames")
        if self.tool_rate < 0 or self.tool_len_median <= 0:
            raise ConfigInvalid("tool parameters must be positive")


class ClassPrototypeBank:
    """Mean feature vector for every (tool, segment, inout) combination.

    Each level of each factor owns an orthonormal direction; a combination's
    prototype is the sum of its three level vectors.  Changing one factor
    therefore moves the prototype by exactly ``prototype_separation``.
    """

    def __init__(self, cfg: GeneratorConfig, schema: LabelSchema):
        cfg.validate()
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        D = cfg.feature_dim
        n_dirs = sum(g.width for g in schema.groups) + 1
        if D >= n_dirs:
            q, _ = np.linalg.qr(rng.standard_normal((D, D)))
            unit = q.T
        else:
            unit = rng.standard_normal((n_dirs, D))
            unit /= np.linalg.norm(unit, axis=1, keepdims=True)
        radius = cfg.prototype_separation / np.sqrt(2.0)
        dirs = iter(unit * radius)
        level = {g.name: [next(dirs) for _ in g.classes] for g in schema.groups}
        self.schema = schema
        self.shape = tuple(g.width for g in schema.groups)
        self.combos = list(itertools.product(*[range(w) for w in self.shape]))
        self.means = np.stack(
            [sum(level[g.name][c] for g, c in zip(schema.groups, combo)) for combo in self.combos]
        )
        self.uninformative = next(dirs) * 1.5
        everything = np.vstack([self.means, self.uninformative])
        dist = np.linalg.norm(everything[:, None] - everything[None], axis=-1)
        off_diag = dist[~np.eye(len(everything), dtype=bool)]
        if cfg.feature_noise_sigma > 0 and off_diag.min() <= 4 * cfg.feature_noise_sigma:
            raise ConfigInvalid(
                f"prototypes not separable: min distance {off_diag.min():.3f} <= "
                f"4 x noise sigma {cfg.feature_noise_sigma}"
            )

    def index(self, targets: np.ndarray) -> np.ndarray:
        """Row index into ``means`` for each frame of a full ``(T, K)`` target array."""
        return np.ravel_multi_index(tuple(targets.T), self.shape)


def _allocate(weights: np.ndarray, total: int, minimum: int) -> np.ndarray:
    """Integer durations summing to ``total``, each >= ``minimum``, proportional to weights."""
    spare = total - minimum * len(weights)
    raw = weights / weights.sum() * spare
    out = np.floor(raw).astype(np.int64)
    remainder = spare - out.sum()
    out[np.argsort(-(raw - out), kind="stable")[:remainder]] += 1
    return out + minimum


def _sample_ground_truth(cfg: GeneratorConfig, schema: LabelSchema, rng: np.random.Generator):
    T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    names = [
        p for p in PHASES if p not in OPTIONAL_PHASES or rng.random() < getattr(cfg, OPTIONAL_PHASES[p])
    ]
    weights = np.array(
        [rng.lognormal(np.log(cfg.phases[p][0]), cfg.phases[p][1]) for p in names]
    )
    durations = _allocate(weights, T, cfg.min_phase_frames)
    bounds = np.concatenate([[0], np.cumsum(durations)])
    spans = {p: (int(bounds[i]), int(bounds[i + 1])) for i, p in enumerate(names)}

    tool_g, seg_g, io_g = schema.group("tool"), schema.group("segment"), schema.group("inout")
    seg = np.empty(T, dtype=np.int64)
    io = np.empty(T, dtype=np.int64)
    for p, (a, b) in spans.items():
        seg[a:b] = seg_g.index(PHASES[p][0])
        io[a:b] = io_g.index(PHASES[p][1])

    outside = io_g.index("outside")
    if rng.random() < cfg.p_reinsertion:
        a, b = spans["intubation"]
        limit = min(b, T // 2) - cfg.min_phase_frames
        length = int(rng.integers(cfg.min_phase_frames, 2 * cfg.min_phase_frames + 1))
        lo = a + cfg.min_phase_frames
        if limit - length > lo:
            start = int(rng.integers(lo, limit - length))
            io[start : start + length] = outside

    tool = np.full(T, tool_g.index("no_tool"), dtype=np.int64)
    a, b = spans["withdrawal"]
    for _ in range(int(rng.poisson(cfg.tool_rate))):
        length = int(np.clip(rng.lognormal(np.log(cfg.tool_len_median), cfg.tool_len_sigma),
                             cfg.min_tool_frames, max(cfg.min_tool_frames, (b - a) // 2)))
        if b - a <= length:
            continue
        start = int(rng.integers(a, b - length))
        tool[start : start + length] = tool_g.index("tool")

    targets = np.zeros((T, len(schema.groups)), dtype=np.int64)
    targets[:, schema.group_index("tool")] = tool
    targets[:, schema.group_index("segment")] = seg
    targets[:, schema.group_index("inout")] = io
    return targets, spans


def _render(
    cfg: GeneratorConfig,
    bank: ClassPrototypeBank,
    targets: np.ndarray,
    rng: np.random.Generator,
    video_id: str,
) -> VideoRecord:
    T, D = targets.shape[0], cfg.feature_dim
    blur = rng.random(T) < cfg.p_blur
    noise = rng.normal(0.0, cfg.feature_noise_sigma, size=(T, D)) if cfg.feature_noise_sigma > 0 else np.zeros((T, D))
    shift = rng.normal(0.0, cfg.video_shift_sigma, size=D) if cfg.video_shift_sigma > 0 else np.zeros(D)
    scene = rng.normal(0.0, cfg.scene_sigma, size=D) if cfg.scene_sigma > 0 else np.zeros(D)
    tool_look = rng.normal(0.0, cfg.tool_appearance_sigma, size=D) if cfg.tool_appearance_sigma > 0 else np.zeros(D)
    schema = bank.schema
    is_outside = targets[:, schema.group_index("inout")] == schema.group("inout").index("outside")
    is_tool = targets[:, schema.group_index("tool")] == schema.group("tool").index("tool")
    means = bank.means[bank.index(targets)] + is_outside[:, None] * scene + is_tool[:, None] * tool_look
    means = np.where(blur[:, None], bank.uninformative, means)
    features = (means + shift + noise).astype(np.float32)
    threshold = cfg.keyframe_noise_factor * cfg.feature_noise_sigma * np.sqrt(D)
    keyframes = ~blur & (np.linalg.norm(noise, axis=1) <= threshold)
    return VideoRecord(
        id=video_id,
        features=features,
        annotations=tuple(targets_to_annotations(targets, bank.schema)),
        keyframe_flags=keyframes,
        provenance="synthetic",
        fps=cfg.fps,
    )


def _rng(cfg: GeneratorConfig, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(cfg.seed)])


def generate_video(
    cfg: GeneratorConfig,
    seed: int,
    schema: LabelSchema | None = None,
    video_id: str | None = None,
    bank: ClassPrototypeBank | None = None,
) -> VideoRecord:
    schema = schema or default_schema()
    cfg.validate()
    bank = bank or ClassPrototypeBank(cfg, schema)
    rng = _rng(cfg, seed)
    targets, _ = _sample_ground_truth(cfg, schema, rng)
    return _render(cfg, bank, targets, rng, video_id or f"syn{seed}")


def generate_corpus(
    cfg: GeneratorConfig, n_videos: int, seed: int, schema: LabelSchema | None = None
) -> Corpus:
    """``n_videos`` synthetic videos with a reproducible train/test split."""
    if n_videos < 2:
        raise ConfigInvalid("n_videos must be >= 2")
    schema = schema or default_schema()
    cfg.validate()
    bank = ClassPrototypeBank(cfg, schema)
    seeds = np.random.SeedSequence(int(seed)).generate_state(n_videos, dtype=np.uint64)
    records = [
        generate_video(cfg, int(s), schema, video_id=f"v{i:05d}", bank=bank)
        for i, s in enumerate(seeds)
    ]
    order = np.random.default_rng(int(seed)).permutation(n_videos)
    n_train = int(round(n_videos * cfg.train_fraction))
    n_train = min(max(n_train, 1), n_videos - 1)
    splits = {records[i].id: ("train" if rank < n_train else "test") for rank, i in enumerate(order)}
    return Corpus(schema, records, splits)


def generate_filter_violations(
    cfg: GeneratorConfig, seed: int, kind: str, schema: LabelSchema | None = None, video_id: str | None = None
) -> VideoRecord:
    """A video whose ground truth breaks exactly one consistency rule."""
    if kind not in VIOLATION_KINDS:
        raise ConfigInvalid(f"unknown violation kind {kind!r}; expected one of {VIOLATION_KINDS}")
    schema = schema or default_schema()
    cfg.validate()
    bank = ClassPrototypeBank(cfg, schema)
    rng = _rng(cfg, seed)
    targets, spans = _sample_ground_truth(cfg, schema, rng)
    T = targets.shape[0]
    k_tool, k_seg, k_io = (schema.group_index(n) for n in ("tool", "segment", "inout"))
    inside = schema.group("inout").index("inside")
    outside = schema.group("inout").index("outside")
    other = schema.group("segment").index("other")
    if kind == "ends_inside":
        a, b = spans["outside_pre"]
        targets[a:b, k_io] = inside
    elif kind == "middle_outside":
        mid = T // 2
        half = max(cfg.min_phase_frames, T // 20)
        window = slice(mid - half, mid + half + 1)
        targets[window, k_io] = outside
        targets[window, k_seg] = other
        targets[window, k_tool] = schema.group("tool").index("no_tool")
    else:
        # tool visible over the whole exit, stretched to outlast a default
        # (M=10) smoothing window so the overlap survives pseudo-labelling
        a, b = spans["outside_post"]
        n = min(max(b - a, VIOLATION_MIN_FRAMES), T - T // 2 - 1)
        targets[T - n :, k_seg] = targets[a, k_seg]
        targets[T - n :, k_io] = outside
        targets[T - n :, k_tool] = schema.group("tool").index("tool")
    return _render(cfg, bank, targets, rng, video_id or f"viol-{kind}-{seed}")


def expected_phase_fractions(cfg: GeneratorConfig, n_samples: int = 200_000, seed: int = 1) -> dict[str, float]:
    """Monte-Carlo expectation of each phase's share of frames, from the config alone.

    Integer rounding and re-insertion are ignored; used as a reference for
    checking generated corpora.
    """
    rng = np.random.default_rng(seed)
    T = rng.integers(cfg.t_min, cfg.t_max + 1, n_samples).astype(float)
    present = {p: np.ones(n_samples, dtype=bool) for p in PHASES}
    for p, attr in OPTIONAL_PHASES.items():
        present[p] = rng.random(n_samples) < getattr(cfg, attr)
    w = {p: rng.lognormal(np.log(cfg.phases[p][0]), cfg.phases[p][1], n_samples) * present[p] for p in PHASES}
    total = sum(w.values())
    n_present = sum(present.values())
    spare = T - cfg.min_phase_frames * n_present
    frames = {p: present[p] * cfg.min_phase_frames + w[p] / total * spare for p in PHASES}
    return {p: float(np.mean(frames[p] / T)) for p in PHASES}


def with_overrides(cfg: GeneratorConfig, **kw) -> GeneratorConfig:
    new = replace(cfg, **kw)
    new.validate()
    return new
