"""Finite-difference gradient checks over every differentiable path in the package."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .encoder import Encoder, EncoderConfig, gfilm_apply, lora_forward, lora_wrap
from .losses import action_loss, camera_loss, depth_loss, huber
from .policy import Denoiser, DiffusionSchedule, MLPHead, PolicyInput, ddpm_train_loss

PURE_TOL = 1e-5
COMPOSITE_TOL = 1e-3
MODULES = ("losses", "encoder", "film", "lora", "policy")


@dataclass
class CheckResult:
    module: str
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


def _away_from(x: np.ndarray, kinks, margin: float = 0.05) -> np.ndarray:
    """Push entries at least `margin` away from each kink."""
    x = x.copy()
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] = k + np.where(x[close] >= k, margin, -margin)
    return x


def _losses(rng) -> list[tuple[str, float, float]]:
    out = []
    r = _away_from(rng.normal(0, 1.5, (3, 5)), (-1.0, 1.0))
    out.append(("huber", dc.finite_diff_gradcheck(lambda t: huber(t, 1.0), r, 1e-6), PURE_TOL))

    def cam_gt():
        q = rng.normal(size=(2, 3, 4))
        q /= np.linalg.norm(q, axis=-1, keepdims=True)
        q[..., 0] = np.abs(q[..., 0]) + 0.1
        return np.concatenate([q, rng.normal(size=(2, 3, 3)), rng.uniform(0.5, 2.0, (2, 3, 1))], axis=-1)

    gt = cam_gt()
    offset = _away_from(rng.normal(0, 1.0, gt.shape), (-1.0, 1.0, 0.0))
    pred = gt + offset
    pred[..., 0] = np.abs(pred[..., 0]) + 0.2
    out.append(("camera_loss", dc.finite_diff_gradcheck(lambda g: camera_loss(g, gt), pred, 1e-6), PURE_TOL))

    d_gt = rng.uniform(0.5, 2.0, (2, 2, 5, 6))
    d_gt[0, 0, 1, 2] = 0.0  # a hole exercises the validity mask
    d = d_gt + _away_from(rng.normal(0, 0.3, d_gt.shape), (0.0,), 0.02)
    sigma = rng.uniform(0.5, 2.0, d_gt.shape)
    for norm in ("l1", "l2"):
        out.append((f"depth_loss[{norm}] wrt depth",
                    dc.finite_diff_gradcheck(lambda t: depth_loss(t, sigma, d_gt, 0.1, norm), d, 1e-7), PURE_TOL))
        out.append((f"depth_loss[{norm}] wrt sigma",
                    dc.finite_diff_gradcheck(lambda t: depth_loss(d, t, d_gt, 0.1, norm), sigma, 1e-7), PURE_TOL))
    target = rng.normal(size=(4, 4))
    out.append(("action_loss", dc.finite_diff_gradcheck(lambda t: action_loss(t, target), rng.normal(size=(4, 4)), 1e-6),
                PURE_TOL))
    return out


def small_encoder_config(**kw) -> EncoderConfig:
    base = dict(patch=4, embed_dim=16, n_blocks=2, n_heads=2, lang_dim=8, image_size=(8, 8))
    base.update(kw)
    return EncoderConfig(**base)


def _encoder(rng) -> list[tuple[str, float, float]]:
    enc = Encoder(small_encoder_config(image_size=(16, 16)), seed=int(rng.integers(1 << 30)))
    for p in enc.parameters():
        p.data = p.data + rng.normal(0, 0.05, p.shape)  # leave the small-init regime
    images = rng.uniform(0, 1, (1, 2, 16, 16, 3))
    depth_gt = rng.uniform(0.5, 1.5, (1, 2, 16, 16))
    cams = np.concatenate([np.tile([1.0, 0, 0, 0], (1, 2, 1)), rng.normal(size=(1, 2, 3)),
                           np.full((1, 2, 1), 1.0)], axis=-1)

    def loss():
        tokens = enc.forward(images)
        depth, sigma = enc.depth_head_out(tokens)
        return camera_loss(enc.camera_head_out(tokens), cams) + depth_loss(depth, sigma, depth_gt)

    err = dc.gradcheck_params(loss, enc.parameters(), 1e-6, max_coords=4, rng=rng)
    return [("encoder+heads composite", err, COMPOSITE_TOL)]


def _film(rng) -> list[tuple[str, float, float]]:
    out = []
    feats = rng.normal(size=(2, 3, 5))
    gamma, beta = rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(2, 3, 5))
    out.append(("gfilm_apply wrt features",
                dc.finite_diff_gradcheck(lambda t: dc.sum(gfilm_apply(t, gamma, beta, True) * w), feats, 1e-6),
                COMPOSITE_TOL))
    out.append(("gfilm_apply wrt gamma",
                dc.finite_diff_gradcheck(lambda t: dc.sum(gfilm_apply(feats, t, beta, True) * w), gamma, 1e-6),
                COMPOSITE_TOL))
    out.append(("gfilm_apply wrt beta",
                dc.finite_diff_gradcheck(lambda t: dc.sum(gfilm_apply(feats, gamma, t, True) * w), beta, 1e-6),
                COMPOSITE_TOL))
    enc = Encoder(small_encoder_config(film="global"), seed=int(rng.integers(1 << 30)))
    for proj in enc.film.values():
        for p in proj.parameters():
            p.data = rng.normal(0, 0.1, p.shape)
    images = rng.uniform(0, 1, (2, 2, 8, 8, 3))
    instr = [[2, 4, 8, 16], [3, 4, 9, 17]]
    wt = rng.normal(size=(2, 16))

    def loss():
        tokens = enc.forward(images, enc.embed_batch(instr))
        return dc.sum(enc.pooled_feature(tokens) * wt)

    params = [p for n, p in enc.named_parameters() if n.startswith("film.") or n == "lang_table"]
    out.append(("encoder G-FiLM path", dc.gradcheck_params(loss, params, 1e-6, max_coords=6, rng=rng), COMPOSITE_TOL))
    return out


def _lora(rng) -> list[tuple[str, float, float]]:
    out = []
    w0 = Parameter(rng.normal(size=(6, 5)))
    adapter = lora_wrap(w0, 2, 4.0, rng)
    adapter.lora_B.data = rng.normal(size=adapter.lora_B.shape)
    x = rng.normal(size=(3, 5))
    wt = rng.normal(size=(3, 6))
    out.append(("lora_forward wrt A, B",
                dc.gradcheck_params(lambda: dc.sum(lora_forward(adapter, x) * wt), adapter.parameters(), 1e-6),
                COMPOSITE_TOL))
    out.append(("lora_forward wrt x",
                dc.finite_diff_gradcheck(lambda t: dc.sum(lora_forward(adapter, t) * wt), x, 1e-6), COMPOSITE_TOL))
    enc = Encoder(small_encoder_config(), seed=int(rng.integers(1 << 30)))
    enc.freeze()
    enc.add_lora(2, 4.0, seed=int(rng.integers(1 << 30)))
    for a in enc.lora_adapters().values():
        a.lora_A.requires_grad = a.lora_B.requires_grad = True
        a.lora_B.data = rng.normal(0, 0.1, a.lora_B.shape)
    images = rng.uniform(0, 1, (1, 2, 8, 8, 3))
    wt2 = rng.normal(size=(1, 16))
    params = [p for a in enc.lora_adapters().values() for p in (a.lora_A, a.lora_B)]
    err = dc.gradcheck_params(lambda: dc.sum(enc.pooled_feature(enc.forward(images)) * wt2), params, 1e-6,
                              max_coords=3, rng=rng)
    out.append(("encoder LoRA path", err, COMPOSITE_TOL))
    return out


def _policy(rng) -> list[tuple[str, float, float]]:
    out = []
    feat = rng.normal(size=(5, 12))
    inp = PolicyInput(feat, rng.uniform(0, 1, (5, 4)))
    head = MLPHead(12, 4, seed=int(rng.integers(1 << 30)))
    target = rng.normal(size=(5, 4))
    out.append(("action_loss o mlp_head",
                dc.gradcheck_params(lambda: action_loss(head(inp), target), head.parameters(), 1e-6), PURE_TOL))
    out.append(("action_loss o mlp_head wrt feature",
                dc.finite_diff_gradcheck(lambda t: action_loss(head(PolicyInput(t, inp.proprio)), target), feat, 1e-6),
                PURE_TOL))
    den = Denoiser(12, 8, seed=int(rng.integers(1 << 30)))
    schedule = DiffusionSchedule.linear()
    a0 = rng.normal(size=(5, 8))
    seed = int(rng.integers(1 << 30))
    loss = lambda: ddpm_train_loss(den, inp, a0, np.random.default_rng(seed), schedule)  # noqa: E731
    out.append(("ddpm_train_loss wrt denoiser", dc.gradcheck_params(loss, den.parameters(), 1e-6, max_coords=20, rng=rng),
                1e-4))
    return out


CHECKS: dict[str, Callable] = {"losses": _losses, "encoder": _encoder, "film": _film, "lora": _lora, "policy": _policy}


def run_gradcheck(module: str = "all", seed: int = 0) -> list[CheckResult]:
    names = MODULES if module == "all" else (module,)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown gradcheck module {unknown[0]!r}; expected one of {MODULES} or 'all'")
    results = []
    for name in names:
        rng = np.random.default_rng([seed, MODULES.index(name)])
        results.extend(CheckResult(name, n, float(e), t) for n, e, t in CHECKS[name](rng))
    return results


def timed_gradcheck(module: str = "all", seed: int = 0) -> tuple[list[CheckResult], float]:
    t0 = time.perf_counter()
    res = run_gradcheck(module, seed)
    return res, time.perf_counter() - t0
