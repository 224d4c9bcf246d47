"""Dice and focal losses with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene_data import MaskStack


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    dice_weight: float = 1.0
    focal_weight: float = 1.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.dice_weight < 0 or self.focal_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.dice_weight == 0 and self.focal_weight == 0:
            raise ValueError("dice_weight and focal_weight cannot both be zero")


def _check_pair(p, g):
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match target shape {g.shape}")
    return p.ravel(), g.ravel()


def dice_coefficient(p, g, eps: float = 1e-6) -> float:
    """2 sum(p g) / (sum(p^2) + sum(g^2) + eps)."""
    p, g = _check_pair(p, g)
    return float(2.0 * np.dot(p, g) / (np.dot(p, p) + np.dot(g, g) + eps))


def focal_loss(p, g, gamma: float = 2.0, eps: float = 1e-6) -> float:
    """Pixel mean of -(1 - r)^gamma log r, with r the probability of the true label."""
    p, g = _check_pair(p, g)
    p = np.clip(p, eps, 1.0 - eps)
    r = (1.0 - g) * (1.0 - p) + g * p
    return float(np.mean(-((1.0 - r) ** gamma) * np.log(r)))


def _dice_grad(p, g, eps):
    s = np.dot(p, g)
    q = np.dot(p, p) + np.dot(g, g) + eps
    coef = 2.0 * s / q
    grad = 2.0 * g / q - 4.0 * s * p / (q * q)
    return coef, grad


def _focal_grad(p, g, gamma, eps):
    inside = (p >= eps) & (p <= 1.0 - eps)
    pc = np.clip(p, eps, 1.0 - eps)
    r = (1.0 - g) * (1.0 - pc) + g * pc
    one_minus = 1.0 - r
    log_r = np.log(r)
    loss = np.mean(-(one_minus**gamma) * log_r)
    dl_dr = -(one_minus**gamma) / r
    if gamma != 0:
        dl_dr = dl_dr + gamma * one_minus ** (gamma - 1.0) * log_r
    grad = dl_dr * (2.0 * g - 1.0) * inside / p.size
    return loss, grad


def combined_loss(pred, target, cfg: LossConfig = LossConfig(), ignore=None):
    """Weighted Dice + focal loss summed over channels, and its gradient.

    ``pred`` and ``target`` are MaskStacks or channels-last arrays (H, W, C);
    the gradient is returned in the same layout as ``pred`` (array form).
    Dice enters as 1 - coefficient per channel. Pixels flagged in ``ignore``
    (H, W) are left out of every channel except the first (localization).
    """
    p_arr = pred.as_array() if isinstance(pred, MaskStack) else np.asarray(pred)
    g_arr = target.as_array() if isinstance(target, MaskStack) else np.asarray(target)
    if p_arr.shape != g_arr.shape:
        raise ValueError(f"prediction shape {p_arr.shape} does not match target shape {g_arr.shape}")
    p_arr = p_arr.astype(np.float64, copy=False)
    g_arr = g_arr.astype(np.float64, copy=False)
    n_ch = p_arr.shape[-1]
    loss = 0.0
    grad = np.zeros_like(p_arr)
    keep = None
    if ignore is not None and np.any(ignore):
        keep = ~np.asarray(ignore, dtype=bool).ravel()
    for c in range(n_ch):
        p = p_arr[..., c].ravel()
        g = g_arr[..., c].ravel()
        sel = keep if (keep is not None and c > 0) else None
        if sel is not None:
            p, g = p[sel], g[sel]
        gc = np.zeros_like(p)
        if cfg.dice_weight:
            coef, dgrad = _dice_grad(p, g, cfg.eps)
            loss += cfg.dice_weight * (1.0 - coef)
            gc -= cfg.dice_weight * dgrad
        if cfg.focal_weight:
            fl, fgrad = _focal_grad(p, g, cfg.gamma, cfg.eps)
            loss += cfg.focal_weight * fl
            gc += cfg.focal_weight * fgrad
        if sel is not None:
            full = np.zeros(sel.shape)
            full[sel] = gc
            gc = full
        grad[..., c] = gc.reshape(p_arr.shape[:-1])
    return float(loss), grad
