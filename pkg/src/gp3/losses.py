"""Training objectives: camera Huber loss, uncertainty-weighted depth loss, action MSE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


@dataclass
class LossWeights:
    alpha: float = 0.1
    huber_delta: float = 1.0
    norm: str = "l1"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.huber_delta <= 0:
            raise ValueError(f"huber_delta must be > 0, got {self.huber_delta}")
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"norm must be 'l1' or 'l2', got {self.norm!r}")


def huber(residual, delta: float = 1.0) -> Tensor:
    """Sum of elementwise Huber penalties."""
    return dc.sum(dc.huber(residual, delta))


def _canonical_sign(q: np.ndarray) -> np.ndarray:
    # sign of the scalar part, with 0 mapped to +1
    return np.where(q[..., :1] < 0, -1.0, 1.0)


def camera_loss(g_pred, g_gt, delta: float = 1.0) -> Tensor:
    """Huber distance between predicted and true 8-float camera vectors, summed over views.

    Both quaternions are flipped to a non-negative scalar part before
    differencing so that q and -q are the same rotation.
    """
    g_pred = dc.as_tensor(g_pred)
    g_gt = np.asarray(g_gt.data if isinstance(g_gt, Tensor) else g_gt, dtype=np.float64)
    if g_pred.shape != g_gt.shape:
        raise ValueError(f"camera_loss: view count mismatch, pred {g_pred.shape} vs gt {g_gt.shape}")
    if g_pred.shape[-1] != 8:
        raise ValueError(f"camera_loss: expected 8-float camera vectors, got {g_pred.shape}")
    gt = g_gt.copy()
    gt[..., :4] *= _canonical_sign(gt)
    flip = np.ones(g_pred.shape)
    flip[..., :4] = _canonical_sign(g_pred.data)
    return huber(dc.Tensor(gt) - g_pred * flip, delta)


def spatial_gradient(depth) -> tuple[Tensor, Tensor]:
    """Forward differences along x and y; the last column / row is zero.

    A singleton axis simply yields an all-zero gradient along it.
    """
    depth = dc.as_tensor(depth)
    *lead, h, w = depth.shape
    gx = dc.concat([depth[..., :, 1:] - depth[..., :, :-1], np.zeros((*lead, h, 1))], axis=-1)
    gy = dc.concat([depth[..., 1:, :] - depth[..., :-1, :], np.zeros((*lead, 1, w))], axis=-2)
    return gx, gy


def _spatial_gradient_np(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(d)
    gy = np.zeros_like(d)
    gx[..., :, :-1] = d[..., :, 1:] - d[..., :, :-1]
    gy[..., :-1, :] = d[..., 1:, :] - d[..., :-1, :]
    return gx, gy


def _gradient_masks(valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # a difference is supervised only when both of its pixels carry depth
    mx = valid.copy()
    my = valid.copy()
    mx[..., :, :-1] &= valid[..., :, 1:]
    my[..., :-1, :] &= valid[..., 1:, :]
    return mx, my


def depth_loss(depth, sigma, depth_gt, alpha: float = 0.1, norm: str = "l1") -> Tensor:
    """Confidence-weighted depth + depth-gradient error with a -alpha*log(sigma) regularizer.

    `depth`, `sigma` and `depth_gt` are (..., V, H, W) or (H, W). Pixels with
    depth_gt == 0 are excluded from every term. Each view is normalized by its
    own count of valid pixels; views are summed, leading batch axes averaged.
    """
    depth = dc.as_tensor(depth)
    sigma = dc.as_tensor(sigma)
    gt = np.asarray(depth_gt.data if isinstance(depth_gt, Tensor) else depth_gt, dtype=np.float64)
    if not (depth.shape == sigma.shape == gt.shape):
        raise ValueError(f"depth_loss: shape mismatch {depth.shape}, {sigma.shape}, {gt.shape}")
    if np.any(sigma.data <= 0):
        raise ValueError("depth_loss: sigma must be strictly positive")
    if norm not in ("l1", "l2"):
        raise ValueError(f"depth_loss: unknown norm {norm!r}")
    if depth.ndim == 2:
        depth, sigma, gt = depth.reshape(1, *depth.shape), sigma.reshape(1, *sigma.shape), gt[None]

    valid = gt > 0
    mx, my = _gradient_masks(valid)
    mask = valid.astype(np.float64)
    count = np.maximum(mask.sum(axis=(-2, -1), keepdims=True), 1.0)

    gx, gy = spatial_gradient(depth)
    gx_gt, gy_gt = _spatial_gradient_np(gt)
    penalty = dc.absolute if norm == "l1" else (lambda t: t * t)

    err = penalty(sigma * (gt - depth)) * mask
    err_x = penalty(sigma * (gx_gt - gx)) * mx.astype(np.float64)
    err_y = penalty(sigma * (gy_gt - gy)) * my.astype(np.float64)
    # log(sigma) is masked after the fact so masked sigmas stay out of the sum
    reg = dc.log(sigma) * mask * alpha
    per_pixel = err + err_x + err_y - reg
    per_view = dc.sum(per_pixel / count, axis=(-2, -1))
    total = dc.sum(per_view, axis=-1)
    return dc.mean(total) if total.ndim else total


def action_loss(pred, target) -> Tensor:
    """Mean squared error over all entries."""
    pred = dc.as_tensor(pred)
    target = dc.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"action_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return dc.mean(diff * diff)
