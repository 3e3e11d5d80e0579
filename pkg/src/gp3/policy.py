"""Action heads on pooled encoder features + proprioception: MLP and DDPM."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .losses import action_loss
from .nn import Linear, Module

ACT_DIM = 4
PROPRIO_DIM = 4
HIDDEN = 128
TIME_DIM = 16
# proprio lives in the unit workspace cube; centre and widen it for the tanh layers
PROPRIO_CENTER = 0.5
PROPRIO_SCALE = 4.0


@dataclass
class PolicyInput:
    feature: Tensor  # (B, C) pooled camera tokens
    proprio: np.ndarray  # (B, 4) end-effector xyz + gripper

    def __post_init__(self):
        self.feature = dc.as_tensor(self.feature)
        self.proprio = np.asarray(self.proprio, dtype=np.float64)
        if self.feature.ndim == 1:
            self.feature = dc.reshape(self.feature, (1, -1))
        if self.proprio.ndim == 1:
            self.proprio = self.proprio[None]
        if len(self.proprio) != self.feature.shape[0]:
            raise ValueError("feature and proprio batch sizes differ")

    def scaled_proprio(self) -> np.ndarray:
        return (self.proprio - PROPRIO_CENTER) * PROPRIO_SCALE

    def joined(self) -> Tensor:
        return dc.concat([self.feature, self.scaled_proprio()], axis=-1)


class MLPHead(Module):
    """Two tanh hidden layers of width 128 and a linear output."""

    def __init__(self, feature_dim: int, out_dim: int = ACT_DIM, seed: int = 0, hidden: int = HIDDEN):
        rng = np.random.default_rng([seed, 0x3E4D])
        self.fc1 = Linear(feature_dim + PROPRIO_DIM, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, out_dim, rng)
        self.out.weight.data *= 0.1

    def __call__(self, inp: PolicyInput) -> Tensor:
        h = dc.tanh(self.fc1(inp.joined()))
        h = dc.tanh(self.fc2(h))
        return self.out(h)


def mlp_head(head: MLPHead, inp: PolicyInput) -> Tensor:
    return head(inp)


# -------------------------------------------------------------------- diffusion


@dataclass
class DiffusionSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def linear(cls, n_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> "DiffusionSchedule":
        betas = np.linspace(beta_start, beta_end, n_steps) if n_steps > 1 else np.array([beta_start])
        return cls(betas, np.cumprod(1.0 - betas))

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def posterior_std(self, t: int) -> float:
        if t == 0:
            return 0.0
        return float(np.sqrt(self.betas[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])))


def ddpm_q_sample(schedule: DiffusionSchedule, a0, t, eps):
    """a_t = sqrt(abar_t) a0 + sqrt(1 - abar_t) eps, with t a step or per-row steps."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.n_steps):
        raise ValueError(f"diffusion step {t} outside [0, {schedule.n_steps})")
    ab = schedule.alpha_bar[t_arr]
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != a0.shape:
        raise ValueError(f"noise shape {eps.shape} differs from action shape {a0.shape}")
    if ab.ndim:
        ab = ab.reshape(-1, *([1] * (a0.ndim - 1)))
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps


def timestep_embedding(t, dim: int = TIME_DIM) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.exp(-np.log(1000.0) * np.arange(dim // 2) / (dim // 2))
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class Denoiser(Module):
    """epsilon-predictor: MLP over [a_t, time embedding, feature, proprio]."""

    def __init__(self, feature_dim: int, action_size: int, seed: int = 0, hidden: int = HIDDEN):
        rng = np.random.default_rng([seed, 0xD1F])
        self.action_size = action_size
        self.fc1 = Linear(action_size + TIME_DIM + feature_dim + PROPRIO_DIM, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, action_size, rng)

    def __call__(self, a_t, t, inp: PolicyInput) -> Tensor:
        a_t = dc.as_tensor(a_t)
        b = a_t.shape[0]
        temb = np.broadcast_to(timestep_embedding(t), (b, TIME_DIM))
        x = dc.concat([a_t, temb, inp.feature, inp.scaled_proprio()], axis=-1)
        h = dc.tanh(self.fc1(x))
        h = dc.tanh(self.fc2(h))
        return self.out(h)


def ddpm_train_loss(denoiser: Callable, inp: PolicyInput, a0, rng: np.random.Generator,
                    schedule: DiffusionSchedule) -> Tensor:
    """Noise a0 at uniformly drawn steps and regress the injected noise."""
    a0 = np.asarray(a0, dtype=np.float64)
    t = rng.integers(0, schedule.n_steps, size=len(a0))
    eps = rng.standard_normal(a0.shape)
    a_t = ddpm_q_sample(schedule, a0, t, eps)
    return action_loss(denoiser(Tensor(a_t), t, inp), eps)


def ddpm_sample(denoiser: Callable, inp: PolicyInput, rng: np.random.Generator,
                schedule: DiffusionSchedule, action_size: int) -> np.ndarray:
    """Ancestral sampling from pure noise down to step 0."""
    b = inp.feature.shape[0]
    x = rng.standard_normal((b, action_size))
    with dc.no_grad():
        for t in range(schedule.n_steps - 1, -1, -1):
            eps_hat = dc.as_tensor(denoiser(Tensor(x), np.full(b, t), inp)).data
            beta, ab = schedule.betas[t], schedule.alpha_bar[t]
            mean = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
            x = mean + schedule.posterior_std(t) * rng.standard_normal(x.shape) if t > 0 else mean
    return x
