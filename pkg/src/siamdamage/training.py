"""Two-stage training, AdamW, damage oversampling and fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .losses import LossConfig, combined_loss
from .network import (
    ModelParams,
    NetworkConfig,
    Tape,
    Var,
    _sigmoid,
    init_params,
    localization_logits,
    siamese_logits,
    transfer_localization_weights,
)
from .raster_ops import AugmentationConfig, augment
from .scene_data import MaskStack, ScenePair, rasterize_annotations, scene_grade_set

logger = logging.getLogger(__name__)

LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    stage1_epochs: int = 4
    stage2_epochs: int = 10
    fine_tune_epochs: int = 4
    batch_size: int = 4
    oversample_damaged_factor: int = 2
    oversample_minor_major_factor: int = 2
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: AugmentationConfig | None = None
    lr_schedule: str = "constant"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.oversample_damaged_factor < 1 or self.oversample_minor_major_factor < 1:
            raise ValueError("oversampling factors must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if min(self.stage1_epochs, self.stage2_epochs, self.fine_tune_epochs) < 0:
            raise ValueError("epoch counts must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossConfig(**d["loss"])
        aug = d.get("augmentation")
        if isinstance(aug, dict):
            aug = dict(aug)
            for key in ("saturation", "brightness", "contrast"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            d["augmentation"] = AugmentationConfig(**aug)
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, trace: list["TraceRow"]):
        super().__init__(message)
        self.trace = trace


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    lr: float | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update with bias correction and decoupled weight decay.

    Only parameters present in ``grads`` are updated; the rest pass through.
    Inputs are not modified. ``lr`` overrides ``cfg.lr`` for scheduled runs.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params = dict(params)
    new_m, new_v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        theta = params[name]
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        decayed = theta - lr * cfg.weight_decay * theta
        new_params[name] = (decayed - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(theta.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


def scheduled_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for 0-based ``step`` of a stage; cosine anneals to zero at the stage end."""
    if cfg.lr_schedule == "constant" or total_steps <= 0:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# sampling


def scene_multiplicity(scene: ScenePair, cfg: TrainConfig) -> int:
    grades = scene_grade_set(scene)
    k = 1
    if any(g >= 2 for g in grades):
        k *= cfg.oversample_damaged_factor
    if grades & {2, 3}:
        k *= cfg.oversample_minor_major_factor
    return k


def build_sampler(scenes: Sequence[ScenePair], cfg: TrainConfig, epoch: int = 0) -> list[int]:
    """Scene indices for one epoch with damage oversampling, shuffled by (seed, epoch)."""
    if not scenes:
        raise ValueError("cannot sample from an empty scene list")
    indices = [i for i, s in enumerate(scenes) for _ in range(scene_multiplicity(s, cfg))]
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(indices))
    return [indices[i] for i in order]


# ---------------------------------------------------------------------------
# training loops


@dataclass(frozen=True)
class TraceRow:
    stage: str
    epoch: int
    split: str
    loss: float
    loc_f1: float | None = None
    macro_f1: float | None = None


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[TraceRow] = field(default_factory=list)
    scene_ids: list[str] = field(default_factory=list)


def write_trace_csv(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "split", "loss", "loc_f1", "macro_f1"])
        for r in trace:
            w.writerow(
                [
                    r.stage,
                    r.epoch,
                    r.split,
                    repr(r.loss),
                    "" if r.loc_f1 is None else repr(r.loc_f1),
                    "" if r.macro_f1 is None else repr(r.macro_f1),
                ]
            )


def _targets(scene: ScenePair) -> MaskStack:
    return rasterize_annotations(scene)[0]


def _prepare(scene: ScenePair, target: MaskStack, cfg: TrainConfig, counter: int):
    pre, post = scene.pre, scene.post
    if cfg.augmentation is not None:
        pre, post, target = augment(pre, post, target, cfg.augmentation, counter)
    return pre.pixels, post.pixels, target


def batch_loss_and_grads(
    params: ModelParams,
    stage: str,
    pres: Sequence[np.ndarray],
    posts: Sequence[np.ndarray],
    targets: Sequence[MaskStack],
    loss_cfg: LossConfig = LossConfig(),
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean combined loss over a batch and its gradient for every parameter.

    ``stage`` is "localization" (pre images against the loc channel) or any
    Siamese stage name (pre and post against all five channels).
    """
    net = params.config
    expected = (net.side, net.side, net.in_channels)
    for px in (*pres, *posts):
        if px.shape != expected:
            raise ValueError(f"training input of shape {px.shape} does not match network input {expected}")
    dtype = np.dtype(net.dtype)
    n_levels = len(net.widths)
    pvars = {k: Var(v) for k, v in params.arrays.items()}
    tape = Tape()
    if stage == "localization":
        logits = localization_logits(pvars, Var(np.stack(pres).astype(dtype)), n_levels, tape)
    else:
        logits = siamese_logits(
            pvars, Var(np.stack(pres).astype(dtype)), Var(np.stack(posts).astype(dtype)), n_levels, tape
        )
    probs = _sigmoid(logits.value.astype(np.float64))
    grad = np.empty_like(probs)
    total = 0.0
    for i, tgt in enumerate(targets):
        target = tgt.loc[:, :, None] if stage == "localization" else tgt.as_array()
        loss, g = combined_loss(probs[i], target, loss_cfg, ignore=tgt.unclassified)
        total += loss / len(targets)
        grad[i] = g / len(targets)
    if not math.isfinite(total):
        return total, {}
    # chain rule through the sigmoid: d p / d logit = p (1 - p)
    tape.backward(logits, (grad * probs * (1.0 - probs)).astype(dtype))
    return total, {k: v.grad for k, v in pvars.items() if v.grad is not None}


def _run_epochs(
    params: ModelParams,
    scenes: Sequence[ScenePair],
    cfg: TrainConfig,
    epochs: int,
    stage: str,
    trainable: Sequence[str],
    sampler,
    eval_fn=None,
) -> TrainResult:
    trace: list[TraceRow] = []
    if epochs == 0 or not scenes:
        return TrainResult(params, trace)
    targets = [_targets(s) for s in scenes]
    arrays = dict(params.arrays)
    state = AdamState()
    counter = 0
    total_steps = epochs * math.ceil(len(sampler(0)) / cfg.batch_size)
    for epoch in range(epochs):
        order = sampler(epoch)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            pres, posts, tgts = [], [], []
            for idx in batch:
                pre, post, tgt = _prepare(scenes[idx], targets[idx], cfg, counter)
                counter += 1
                pres.append(pre)
                posts.append(post)
                tgts.append(tgt)
            batch_loss, all_grads = batch_loss_and_grads(
                ModelParams(params.config, arrays), stage, pres, posts, tgts, cfg.loss
            )
            if not math.isfinite(batch_loss):
                trace.append(TraceRow(stage, epoch, "train", batch_loss))
                raise TrainingDivergedError(f"non-finite loss in {stage} epoch {epoch}", trace)
            grads = {k: all_grads[k] for k in trainable if k in all_grads}
            lr = scheduled_lr(cfg, state.step, total_steps)
            arrays, state = adamw_step(arrays, grads, state, cfg, lr)
            losses.append(batch_loss)
        row = TraceRow(stage, epoch, "train", float(np.mean(losses)))
        if eval_fn is not None:
            row = replace(row, **eval_fn(ModelParams(params.config, arrays)))
        trace.append(row)
        logger.info("%s epoch %d: loss %.5f", stage, epoch, row.loss)
    return TrainResult(ModelParams(params.config, arrays), trace)


def _train_scenes(scenes: Sequence[ScenePair]) -> list[ScenePair]:
    train = [s for s in scenes if s.split == "train"]
    if not train:
        raise ValueError("no scenes in the train split")
    return train


def train_stage1_localization(
    scenes: Sequence[ScenePair], cfg: TrainConfig, net_cfg: NetworkConfig, eval_fn=None
) -> TrainResult:
    """Fit a 1-channel U-Net to building footprints from pre-event images."""
    train = _train_scenes(scenes)
    params = init_params(replace(net_cfg, head_channels=1, seed=cfg.seed))
    trainable = [k for k in params.arrays if not k.startswith("fusion")]

    def sampler(epoch):
        return list(np.random.default_rng([cfg.seed, epoch, 1]).permutation(len(train)))

    result = _run_epochs(params, train, cfg, cfg.stage1_epochs, "localization", trainable, sampler, eval_fn)
    result.scene_ids = [s.scene_id for s in train]
    return result


def train_stage2_siamese(
    scenes: Sequence[ScenePair], stage1_params: ModelParams, cfg: TrainConfig, eval_fn=None
) -> TrainResult:
    """Transfer the stage-1 U-Net into the Siamese model and train all five channels."""
    train = _train_scenes(scenes)
    params = transfer_localization_weights(stage1_params, seed=cfg.seed)
    return _train_siamese(params, train, cfg, cfg.stage2_epochs, "siamese", eval_fn)


def _train_siamese(params, scenes, cfg, epochs, stage, eval_fn=None) -> TrainResult:
    trainable = [k for k in params.arrays if not k.startswith("loc_head")]
    result = _run_epochs(
        params, scenes, cfg, epochs, stage, trainable, lambda e: build_sampler(scenes, cfg, e), eval_fn
    )
    result.scene_ids = [s.scene_id for s in scenes]
    return result


def train_two_stage(
    scenes: Sequence[ScenePair], cfg: TrainConfig, net_cfg: NetworkConfig
) -> TrainResult:
    stage1 = train_stage1_localization(scenes, cfg, net_cfg)
    stage2 = train_stage2_siamese(scenes, stage1.params, cfg)
    return TrainResult(stage2.params, stage1.trace + stage2.trace, stage2.scene_ids)


def select_share(scenes: Sequence[ScenePair], n_take: int, seed: int) -> list[ScenePair]:
    """Deterministic prefix of a seeded permutation; prefixes nest as n_take grows."""
    order = np.random.default_rng([seed, 4241]).permutation(len(scenes))
    return [scenes[i] for i in order[:n_take]]


def fine_tune(
    params: ModelParams, scenes: Sequence[ScenePair], share: float, cfg: TrainConfig
) -> TrainResult:
    """Continue Siamese training on floor(share * len(scenes)) scenes of a new event."""
    if not 0.0 <= share <= 0.5:
        raise ValueError(f"share must lie in [0, 0.5], got {share}")
    subset = select_share(scenes, math.floor(share * len(scenes)), cfg.seed)
    return fine_tune_on(params, subset, cfg)


def fine_tune_on(params: ModelParams, subset: Sequence[ScenePair], cfg: TrainConfig) -> TrainResult:
    if not subset:
        return TrainResult(params, [], [])
    return _train_siamese(params, list(subset), cfg, cfg.fine_tune_epochs, "fine-tune")
