"""Resolution degradation and training-time augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .scene_data import MaskStack, RasterImage

DEFAULT_GSDS = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0)


@dataclass(frozen=True)
class ResolutionSchedule:
    gsds: tuple[float, ...] = DEFAULT_GSDS

    def __post_init__(self):
        gsds = tuple(float(g) for g in self.gsds)
        if not gsds:
            raise ValueError("schedule is empty")
        if any(b <= a for a, b in zip(gsds, gsds[1:])):
            raise ValueError(f"schedule must be strictly increasing: {gsds}")
        if gsds[0] <= 0:
            raise ValueError("schedule values must be positive")
        object.__setattr__(self, "gsds", gsds)

    @classmethod
    def parse(cls, text: str) -> "ResolutionSchedule":
        return cls(tuple(float(t) for t in text.split(",") if t.strip()))

    @property
    def native(self) -> float:
        return self.gsds[0]

    def __len__(self):
        return len(self.gsds)

    def __iter__(self):
        return iter(self.gsds)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def box_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) area-average operator; output cells split the input span evenly."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    lo, hi = edges[:-1, None], edges[1:, None]
    px = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, None)
    return overlap / (n_in / n_out)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation with half-pixel centers, edges clamped."""
    u = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    u = np.clip(u, 0.0, n_in - 1)
    i0 = np.floor(u).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = u - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def _apply_separable(pixels: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # rows @ pixels @ cols.T per channel, as two matrix products
    tmp = np.tensordot(rows, pixels, axes=(1, 0))
    return np.ascontiguousarray(np.tensordot(cols, tmp, axes=(1, 1)).transpose(1, 0, 2))


def resampled_size(n: int, native_gsd: float, target_gsd: float) -> int:
    return max(1, _round_half_up(n * native_gsd / target_gsd))


def resample(image: RasterImage, target_gsd: float) -> RasterImage:
    """Area-average downsampling to a coarser ground sample distance."""
    if target_gsd < image.gsd:
        raise ValueError(
            f"target gsd {target_gsd} is finer than native {image.gsd}; only degradation is allowed"
        )
    if target_gsd == image.gsd:
        return image
    h = resampled_size(image.height, image.gsd, target_gsd)
    w = resampled_size(image.width, image.gsd, target_gsd)
    px = _apply_separable(image.pixels, box_matrix(image.height, h), box_matrix(image.width, w))
    return RasterImage(px, target_gsd)


def degrade_restore(image: RasterImage, target_gsd: float) -> RasterImage:
    """Downsample to ``target_gsd`` and interpolate back onto the native grid."""
    if target_gsd == image.gsd:
        return image
    coarse = resample(image, target_gsd)
    px = _apply_separable(
        coarse.pixels,
        bilinear_matrix(coarse.height, image.height),
        bilinear_matrix(coarse.width, image.width),
    )
    return RasterImage(px, image.gsd, effective_gsd=target_gsd)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    """Each enabled transform fires independently with probability ``p``.

    Ranges are symmetric magnitudes unless given as (low, high) pairs; a
    magnitude of 0 or a (1, 1) scale range disables the transform.
    """

    hflip: bool = False
    vflip: bool = False
    rot90: bool = False
    rotation_deg: float = 0.0
    shift_px: int = 0
    crop_fraction: float = 1.0
    hue_shift_deg: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    saturation: tuple[float, float] = (1.0, 1.0)
    brightness: tuple[float, float] = (1.0, 1.0)
    contrast: tuple[float, float] = (1.0, 1.0)
    p: float = 0.5
    seed: int = 0

    @classmethod
    def default_training(cls, seed: int = 0) -> "AugmentationConfig":
        return cls(
            hflip=True,
            vflip=True,
            rot90=True,
            shift_px=8,
            hue_shift_deg=8.0,
            noise_sigma=0.02,
            blur_sigma=1.0,
            saturation=(0.85, 1.15),
            brightness=(0.9, 1.1),
            contrast=(0.85, 1.15),
            seed=seed,
        )


_YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ_INV = np.linalg.inv(_YIQ)


def hue_rotate(pixels: np.ndarray, degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    rot = np.array([[1, 0, 0], [0, math.cos(t), -math.sin(t)], [0, math.sin(t), math.cos(t)]])
    m = _YIQ_INV @ rot @ _YIQ
    return pixels @ m.T


def _photometric(px: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    out = px
    if cfg.hue_shift_deg > 0 and rng.random() < cfg.p:
        out = hue_rotate(out, rng.uniform(-cfg.hue_shift_deg, cfg.hue_shift_deg))
    if cfg.saturation != (1.0, 1.0) and rng.random() < cfg.p:
        gray = out @ _YIQ[0]
        out = gray[..., None] + rng.uniform(*cfg.saturation) * (out - gray[..., None])
    if cfg.brightness != (1.0, 1.0) and rng.random() < cfg.p:
        out = out * rng.uniform(*cfg.brightness)
    if cfg.contrast != (1.0, 1.0) and rng.random() < cfg.p:
        mean = out.mean()
        out = mean + rng.uniform(*cfg.contrast) * (out - mean)
    if cfg.blur_sigma > 0 and rng.random() < cfg.p:
        sigma = rng.uniform(0.0, cfg.blur_sigma)
        out = ndimage.gaussian_filter(out, (sigma, sigma, 0), mode="reflect")
    if cfg.noise_sigma > 0 and rng.random() < cfg.p:
        out = out + rng.normal(0.0, cfg.noise_sigma, out.shape)
    if out is px:
        return px
    return np.clip(out, 0.0, 1.0)


def _geometric_plan(cfg: AugmentationConfig, rng: np.random.Generator, side_h: int, side_w: int):
    plan = []
    if cfg.hflip and rng.random() < cfg.p:
        plan.append(("hflip",))
    if cfg.vflip and rng.random() < cfg.p:
        plan.append(("vflip",))
    if cfg.rot90 and rng.random() < cfg.p:
        plan.append(("rot90", int(rng.integers(1, 4))))
    if cfg.rotation_deg > 0 and rng.random() < cfg.p:
        plan.append(("rotate", rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)))
    if cfg.shift_px > 0 and rng.random() < cfg.p:
        dy, dx = rng.integers(-cfg.shift_px, cfg.shift_px + 1, size=2)
        plan.append(("shift", int(dy), int(dx)))
    if cfg.crop_fraction < 1.0 and rng.random() < cfg.p:
        frac = rng.uniform(max(cfg.crop_fraction, 0.1), 1.0)
        ch, cw = max(int(side_h * frac), 1), max(int(side_w * frac), 1)
        y0 = int(rng.integers(0, side_h - ch + 1))
        x0 = int(rng.integers(0, side_w - cw + 1))
        plan.append(("crop", y0, x0, ch, cw))
    return plan


def _apply_geometric(arr: np.ndarray, plan, order: int) -> np.ndarray:
    """Apply a geometric plan to an (H, W, C) array; order 0 = nearest, 1 = bilinear."""
    out = arr
    for step in plan:
        kind = step[0]
        if kind == "hflip":
            out = out[:, ::-1]
        elif kind == "vflip":
            out = out[::-1]
        elif kind == "rot90":
            out = np.rot90(out, step[1], axes=(0, 1))
        elif kind == "rotate":
            out = ndimage.rotate(out, step[1], axes=(1, 0), reshape=False, order=order, mode="reflect")
        elif kind == "shift":
            out = ndimage.shift(out, (step[1], step[2], 0), order=0, mode="reflect")
        elif kind == "crop":
            _, y0, x0, ch, cw = step
            h, w = out.shape[:2]
            window = out[y0 : y0 + ch, x0 : x0 + cw]
            out = ndimage.zoom(window, (h / ch, w / cw, 1), order=order, mode="nearest", grid_mode=True)
            out = out[:h, :w]
    return np.ascontiguousarray(out)


def augment(
    pre: RasterImage,
    post: RasterImage,
    mask: MaskStack,
    cfg: AugmentationConfig,
    counter: int = 0,
) -> tuple[RasterImage, RasterImage, MaskStack]:
    """Sample one augmentation, seeded by ``(cfg.seed, counter)``.

    The geometric part is shared by pre, post and mask; photometric changes
    are drawn separately for pre and post and never touch the mask.
    """
    rng = np.random.default_rng([cfg.seed, counter])
    plan = _geometric_plan(cfg, rng, pre.height, pre.width)
    pre_px = _photometric(_apply_geometric(pre.pixels, plan, 1), cfg, rng)
    post_px = _photometric(_apply_geometric(post.pixels, plan, 1), cfg, rng)

    if not plan and pre_px is pre.pixels and post_px is post.pixels:
        return pre, post, mask

    stack = mask.as_array()
    if mask.unclassified is not None:
        stack = np.concatenate([stack, mask.unclassified[:, :, None].astype(stack.dtype)], axis=-1)
    stack = _apply_geometric(stack, plan, 0)
    uncls = stack[:, :, 5] > 0.5 if mask.unclassified is not None else None
    new_mask = MaskStack.from_array(stack[:, :, :5], uncls)
    return (
        RasterImage(pre_px, pre.gsd, pre.effective_gsd),
        RasterImage(post_px, post.gsd, post.effective_gsd),
        new_mask,
    )
