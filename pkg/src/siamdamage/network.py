"""Siamese U-Net on numpy with a minimal reverse-mode tape.

Tensors are channels-last (N, H, W, C). The trunk is a plain U-Net: two
3x3 convolutions with SiLU per level, 2x average pooling on the way down,
2x nearest upsampling plus skip concatenation on the way up. Every op is
smooth, so finite-difference checks do not trip over kinks or pooling ties.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .scene_data import MaskStack, RasterImage

N_OUT = 5


@dataclass(frozen=True)
class NetworkConfig:
    side: int = 128
    widths: tuple[int, ...] = (16, 32, 64)
    head_channels: int = 5
    in_channels: int = 3
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError("widths must be a non-empty list of positive ints")
        if self.head_channels not in (1, N_OUT):
            raise ValueError("head_channels must be 1 (localization) or 5 (siamese)")
        if self.side % (2 ** (len(self.widths) - 1)):
            raise ValueError(
                f"side {self.side} is not divisible by 2^{len(self.widths) - 1}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "widths": tuple(d.get("widths", cls.widths))})


@dataclass(frozen=True)
class DecisionRule:
    loc_threshold: float = 0.5
    mode: str = "weighted-average"

    def __post_init__(self):
        if not 0.0 < self.loc_threshold < 1.0:
            raise ValueError("loc_threshold must lie strictly inside (0, 1)")
        if self.mode not in ("weighted-average", "argmax"):
            raise ValueError(f"unknown decision mode {self.mode!r}")


# ---------------------------------------------------------------------------
# tape


class Var:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g


class Tape:
    """Records ops in execution order; ``backward`` replays them in reverse."""

    def __init__(self):
        self._ops: list[tuple[Var, tuple[Var, ...], Callable]] = []

    def record(self, out: Var, inputs: tuple[Var, ...], backward: Callable) -> None:
        self._ops.append((out, inputs, backward))

    def backward(self, out: Var, grad: np.ndarray) -> None:
        out.grad = grad
        for node, inputs, fn in reversed(self._ops):
            if node.grad is None:
                continue
            for inp, g in zip(inputs, fn(node.grad)):
                if g is not None:
                    inp.accumulate(g)
            node.grad = None
        self._ops.clear()


_OFFSETS = [(i - 1, j - 1) for i in range(3) for j in range(3)]


def _shift_slices(n: int, d: int) -> tuple[slice, slice]:
    """(source, destination) slices so that dest[p] = src[p + d] on an axis of length n."""
    return slice(max(d, 0), n + min(d, 0)), slice(max(-d, 0), n + min(-d, 0))


def _im2col(x: np.ndarray, flip: bool = False) -> np.ndarray:
    """Rows of 3x3 neighbourhoods: cols[p, k] = x[p + off_k] (or x[p - off_k])."""
    n, h, w, c = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))
    if flip:
        win = win[..., ::-1, ::-1]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


def _gather_taps(z: np.ndarray, shape) -> np.ndarray:
    """out[p] = sum_k z[p + off_k, k] for z of shape (N, H, W, 9, O)."""
    n, h, w, o = shape
    out = np.zeros(shape, dtype=z.dtype)
    for k, (dy, dx) in enumerate(_OFFSETS):
        ys, yd = _shift_slices(h, dy)
        xs, xd = _shift_slices(w, dx)
        out[:, yd, xd, :] += z[:, ys, xs, k, :]
    return out


def conv3x3(x: Var, w: Var, b: Var, tape: Tape | None) -> Var:
    """'Same' zero-padded 3x3 convolution; ``w`` has shape (3, 3, C_in, C_out).

    The nine-fold tap expansion is done on whichever side has fewer
    channels, which keeps memory traffic down on wide decoder inputs.
    """
    n, h, wd, c = x.value.shape
    o = w.value.shape[-1]
    wmat = w.value.reshape(9 * c, o)
    if c <= o:
        cols = _im2col(x.value)
        out = Var((cols @ wmat + b.value).reshape(n, h, wd, o))
    else:
        cols = None
        w_taps = w.value.reshape(9, c, o).transpose(1, 0, 2).reshape(c, 9 * o)
        z = (x.value.reshape(-1, c) @ w_taps).reshape(n, h, wd, 9, o)
        out = Var(_gather_taps(z, (n, h, wd, o)) + b.value)
    if tape is not None:

        def backward(g):
            gf = g.reshape(-1, o)
            db = gf.sum(axis=0)
            # dx[p] = sum_k g[p - off_k] @ W_k^T, i.e. a convolution of g with flipped taps
            gcols = _im2col(g, flip=True)
            if cols is not None:
                dw = (cols.T @ gf).reshape(w.value.shape)
            else:
                dw = (x.value.reshape(-1, c).T @ gcols).reshape(c, 9, o).transpose(1, 0, 2)
                dw = dw.reshape(w.value.shape)
            w_back = w.value.reshape(9, c, o).transpose(0, 2, 1).reshape(9 * o, c)
            dx = (gcols @ w_back).reshape(x.value.shape)
            return dx, dw, db

        tape.record(out, (x, w, b), backward)
    return out


def conv1x1(x: Var, w: Var, b: Var, tape: Tape | None) -> Var:
    """Pointwise convolution; ``w`` has shape (C_in, C_out)."""
    n, h, wd, c = x.value.shape
    o = w.value.shape[-1]
    flat = x.value.reshape(-1, c)
    out = Var((flat @ w.value + b.value).reshape(n, h, wd, o))
    if tape is not None:

        def backward(g):
            gf = g.reshape(-1, o)
            return (gf @ w.value.T).reshape(x.value.shape), flat.T @ gf, gf.sum(axis=0)

        tape.record(out, (x, w, b), backward)
    return out


_sigmoid = expit


def silu(x: Var, tape: Tape | None) -> Var:
    s = _sigmoid(x.value)
    out = Var(x.value * s)
    if tape is not None:
        tape.record(out, (x,), lambda g: (g * s * (1.0 + x.value * (1.0 - s)),))
    return out


def avg_pool2(x: Var, tape: Tape | None) -> Var:
    n, h, w, c = x.value.shape
    out = Var(x.value.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4)))
    if tape is not None:

        def backward(g):
            return (np.repeat(np.repeat(g * 0.25, 2, axis=1), 2, axis=2),)

        tape.record(out, (x,), backward)
    return out


def upsample2(x: Var, tape: Tape | None) -> Var:
    out = Var(np.repeat(np.repeat(x.value, 2, axis=1), 2, axis=2))
    if tape is not None:

        def backward(g):
            n, h, w, c = g.shape
            return (g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)),)

        tape.record(out, (x,), backward)
    return out


def concat(a: Var, b: Var, tape: Tape | None) -> Var:
    ca = a.value.shape[-1]
    out = Var(np.concatenate([a.value, b.value], axis=-1))
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g[..., :ca], g[..., ca:]))
    return out


def split_batch(x: Var, n: int, tape: Tape | None) -> tuple[Var, Var]:
    first, second = Var(x.value[:n]), Var(x.value[n:])
    if tape is not None:
        tape.record(first, (x,), lambda g: (np.concatenate([g, np.zeros_like(x.value[n:])]),))
        tape.record(second, (x,), lambda g: (np.concatenate([np.zeros_like(x.value[:n]), g]),))
    return first, second


# ---------------------------------------------------------------------------
# parameters


def trunk_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = cfg.in_channels
    for lvl, w in enumerate(cfg.widths):
        shapes[f"enc{lvl}.conv1.w"] = (3, 3, c_in, w)
        shapes[f"enc{lvl}.conv1.b"] = (w,)
        shapes[f"enc{lvl}.conv2.w"] = (3, 3, w, w)
        shapes[f"enc{lvl}.conv2.b"] = (w,)
        c_in = w
    for lvl in range(len(cfg.widths) - 2, -1, -1):
        w = cfg.widths[lvl]
        shapes[f"dec{lvl}.conv1.w"] = (3, 3, cfg.widths[lvl + 1] + w, w)
        shapes[f"dec{lvl}.conv1.b"] = (w,)
        shapes[f"dec{lvl}.conv2.w"] = (3, 3, w, w)
        shapes[f"dec{lvl}.conv2.b"] = (w,)
    return shapes


def head_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    w0 = cfg.widths[0]
    shapes = {"loc_head.w": (w0, 1), "loc_head.b": (1,)}
    if cfg.head_channels == N_OUT:
        shapes.update({"fusion.w": (2 * w0, N_OUT), "fusion.b": (N_OUT,)})
    return shapes


def _he_init(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    if len(shape) == 1:
        return np.zeros(shape, dtype=dtype)
    fan_in = int(np.prod(shape[:-1]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass(eq=False)
class ModelParams:
    config: NetworkConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def is_siamese(self) -> bool:
        return "fusion.w" in self.arrays

    def n_params(self, prefix: str = "") -> int:
        return sum(a.size for k, a in self.arrays.items() if k.startswith(prefix))

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "ModelParams":
        dtype = np.dtype(dtype)
        cfg = NetworkConfig(**{**asdict(self.config), "dtype": dtype.name})
        return ModelParams(cfg, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (
            self.config == other.config
            and list(self.arrays) == list(other.arrays)
            and all(
                a.dtype == b.dtype and np.array_equal(a, b)
                for a, b in zip(self.arrays.values(), other.arrays.values())
            )
        )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
            meta = {"config": asdict(self.config), "names": list(self.arrays)}
            _write_member(zf, "config.json", json.dumps(meta, sort_keys=True).encode())
            for name, arr in self.arrays.items():
                arr_buf = io.BytesIO()
                np.lib.format.write_array(arr_buf, np.ascontiguousarray(arr), allow_pickle=False)
                _write_member(zf, f"{name}.npy", arr_buf.getvalue())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            meta = json.loads(zf.read("config.json"))
            arrays = {
                name: np.lib.format.read_array(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
                for name in meta["names"]
            }
        return cls(NetworkConfig.from_dict(meta["config"]), arrays)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    # fixed timestamp keeps checkpoints byte-identical across runs
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def init_params(cfg: NetworkConfig) -> ModelParams:
    """He-initialized parameters; biases start at zero."""
    rng = np.random.default_rng(cfg.seed)
    shapes = {**trunk_shapes(cfg), **head_shapes(NetworkConfig(**{**asdict(cfg), "head_channels": 1}))}
    arrays = {k: _he_init(rng, s, cfg.dtype) for k, s in shapes.items()}
    params = ModelParams(cfg, arrays)
    if cfg.head_channels == N_OUT:
        params = _add_fusion(params, cfg.seed)
    return params


def zero_params(cfg: NetworkConfig) -> ModelParams:
    shapes = {**trunk_shapes(cfg), **head_shapes(cfg)}
    return ModelParams(cfg, {k: np.zeros(s, dtype=cfg.dtype) for k, s in shapes.items()})


def _add_fusion(params: ModelParams, seed: int) -> ModelParams:
    cfg = NetworkConfig(**{**asdict(params.config), "head_channels": N_OUT, "seed": seed})
    rng = np.random.default_rng([seed, 7919])
    arrays = dict(params.arrays)
    for name, shape in head_shapes(cfg).items():
        if name.startswith("fusion"):
            arrays[name] = _he_init(rng, shape, cfg.dtype)
    return ModelParams(cfg, arrays)


def transfer_localization_weights(loc_params: ModelParams, seed: int | None = None) -> ModelParams:
    """Copy trunk and localization head exactly; initialize a fresh fusion head."""
    cfg = loc_params.config
    expected = {**trunk_shapes(cfg), **head_shapes(NetworkConfig(**{**asdict(cfg), "head_channels": 1}))}
    for name, shape in expected.items():
        if name not in loc_params.arrays or loc_params.arrays[name].shape != shape:
            raise ValueError(f"incompatible localization parameters at {name!r}")
    base = ModelParams(cfg, {k: loc_params.arrays[k].copy() for k in expected})
    return _add_fusion(base, cfg.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# forward passes


def _vars(params: ModelParams) -> dict[str, Var]:
    return {k: Var(v) for k, v in params.arrays.items()}


def unet_trunk(p: dict[str, Var], x: Var, n_levels: int, tape: Tape | None) -> Var:
    skips = []
    h = x
    for lvl in range(n_levels):
        if lvl:
            h = avg_pool2(h, tape)
        h = silu(conv3x3(h, p[f"enc{lvl}.conv1.w"], p[f"enc{lvl}.conv1.b"], tape), tape)
        h = silu(conv3x3(h, p[f"enc{lvl}.conv2.w"], p[f"enc{lvl}.conv2.b"], tape), tape)
        skips.append(h)
    for lvl in range(n_levels - 2, -1, -1):
        h = concat(upsample2(h, tape), skips[lvl], tape)
        h = silu(conv3x3(h, p[f"dec{lvl}.conv1.w"], p[f"dec{lvl}.conv1.b"], tape), tape)
        h = silu(conv3x3(h, p[f"dec{lvl}.conv2.w"], p[f"dec{lvl}.conv2.b"], tape), tape)
    return h


def localization_logits(p: dict[str, Var], x: Var, n_levels: int, tape: Tape | None) -> Var:
    feats = unet_trunk(p, x, n_levels, tape)
    return conv1x1(feats, p["loc_head.w"], p["loc_head.b"], tape)


def siamese_logits(p: dict[str, Var], pre: Var, post: Var, n_levels: int, tape: Tape | None) -> Var:
    """Shared trunk over pre and post (one stacked batch), concat, 1x1 fusion."""
    n = pre.value.shape[0]
    both = Var(np.concatenate([pre.value, post.value]))
    feats = unet_trunk(p, both, n_levels, tape)
    f_pre, f_post = split_batch(feats, n, tape)
    return conv1x1(concat(f_pre, f_post, tape), p["fusion.w"], p["fusion.b"], tape)


def _as_batch(image, params: ModelParams) -> np.ndarray:
    px = image.pixels if isinstance(image, RasterImage) else np.asarray(image)
    if px.ndim == 3:
        px = px[None]
    cfg = params.config
    if px.shape[1:] != (cfg.side, cfg.side, cfg.in_channels):
        raise ValueError(
            f"input of shape {px.shape[1:]} does not match network input "
            f"({cfg.side}, {cfg.side}, {cfg.in_channels})"
        )
    return px.astype(cfg.dtype, copy=False)


def trunk_features(params: ModelParams, image) -> np.ndarray:
    """Trunk feature map (H, W, widths[0]) of a single image."""
    x = Var(_as_batch(image, params))
    return unet_trunk(_vars(params), x, len(params.config.widths), None).value[0]


def fuse_features(params: ModelParams, f_pre: np.ndarray, f_post: np.ndarray) -> MaskStack:
    p = _vars(params)
    x = Var(np.concatenate([f_pre, f_post], axis=-1)[None])
    logits = conv1x1(x, p["fusion.w"], p["fusion.b"], None).value[0]
    return MaskStack.from_array(_sigmoid(logits.astype(np.float64)))


def forward_localization(params: ModelParams, pre) -> np.ndarray:
    """Building probability map (H, W) from the pre-event image alone."""
    x = Var(_as_batch(pre, params))
    logits = localization_logits(_vars(params), x, len(params.config.widths), None)
    return _sigmoid(logits.value[0, :, :, 0].astype(np.float64))


def forward_siamese(params: ModelParams, pre, post) -> MaskStack:
    """Soft 5-channel prediction; each image passes the shared trunk on its own."""
    if not params.is_siamese:
        raise ValueError("parameters have no fusion head; run transfer_localization_weights first")
    return fuse_features(params, trunk_features(params, pre), trunk_features(params, post))


def ensemble_predict(models: Sequence[ModelParams], pre, post) -> MaskStack:
    """Arithmetic mean of the members' soft predictions."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    sides = {m.config.side for m in models}
    if len(sides) != 1:
        raise ValueError(f"ensemble members disagree on input side: {sorted(sides)}")
    return mean_stacks([forward_siamese(m, pre, post) for m in models])


def mean_stacks(stacks: Sequence[MaskStack]) -> MaskStack:
    # running mean keeps the average of equal members bit-identical to them
    mean = stacks[0].as_array().copy()
    for k, s in enumerate(stacks[1:], start=2):
        mean += (s.as_array() - mean) / k
    return MaskStack.from_array(mean)


def decide(pred: MaskStack, rule: DecisionRule = DecisionRule()) -> np.ndarray:
    """Hard grade map: 0 where loc < threshold, else a grade in 1..4.

    Weighted-average mode rounds sum(l * p_l) / sum(p_l) half up; argmax mode
    breaks ties toward the lower grade. Building pixels whose four damage
    probabilities are all zero fall back to grade 1.
    """
    damage = pred.damage
    total = damage.sum(axis=0)
    if rule.mode == "weighted-average":
        levels = np.arange(1, 5, dtype=np.float64)[:, None, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            d = (levels * damage).sum(axis=0) / total
        grade = np.clip(np.floor(d + 0.5), 1, 4)
    else:
        grade = np.argmax(damage, axis=0) + 1.0
    grade = np.where(total > 0, grade, 1.0)
    return np.where(pred.loc >= rule.loc_threshold, grade, 0).astype(np.uint8)
