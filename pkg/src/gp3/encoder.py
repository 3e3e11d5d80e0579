"""Alternating frame-wise / global attention encoder with camera and depth heads.

Language enters through FiLM projections applied to the input of selected
blocks (global blocks only for G-FiLM). Attention projections can be wrapped
with LoRA adapters so the base weights stay frozen during action training.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .checkpoint import load_checkpoint, save_checkpoint
from .diffcore import Parameter, Tensor
from .nn import LayerNorm, Linear, Module

FILM_MODES = ("none", "global", "all")


@dataclass
class EncoderConfig:
    patch: int = 8
    embed_dim: int = 96
    n_blocks: int = 4
    n_heads: int = 4
    vocab_size: int = 32
    lang_dim: int = 32
    image_size: tuple[int, int] = (32, 32)
    mlp_ratio: int = 2
    film: str = "global"
    pos_scale: float = 0.5  # amplitude of the 2-D sin/cos initialisation of the learned positions
    max_views: int = 4
    view_embed: bool = True  # learned per-view-slot embedding; off makes the trunk view-permutation equivariant

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.n_blocks % 2:
            raise ValueError("n_blocks must be even (frame/global pairs)")
        h, w = self.image_size
        if h % self.patch or w % self.patch:
            raise ValueError(f"patch {self.patch} does not divide image size {h}x{w}")
        if self.film not in FILM_MODES:
            raise ValueError(f"film must be one of {FILM_MODES}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch, self.image_size[1] // self.patch

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


def layer_mask(cfg: EncoderConfig) -> list[bool]:
    """True exactly at global-attention blocks (blocks alternate frame, global, ...)."""
    return [j % 2 == 1 for j in range(cfg.n_blocks)]


def film_mask(cfg: EncoderConfig) -> list[bool]:
    if cfg.film == "global":
        return layer_mask(cfg)
    return [cfg.film == "all"] * cfg.n_blocks


# ---------------------------------------------------------------------- LoRA


class LoraAdapter(Module):
    """Low-rank update (alpha / r) * B @ A on top of a frozen base matrix W0 (d x k)."""

    def __init__(self, base: Parameter, rank: int, alpha: float, rng: np.random.Generator | None = None):
        d, k = base.shape
        if not 1 <= rank < min(d, k):
            raise ValueError(f"LoRA rank {rank} must satisfy 1 <= r < min(d, k) = {min(d, k)}")
        rng = rng or np.random.default_rng(0)
        self._base = base
        self.lora_A = Parameter(rng.normal(0.0, 1.0 / math.sqrt(k), (rank, k)))
        self.lora_B = Parameter(np.zeros((d, rank)))
        self.rank = rank
        self.alpha = float(alpha)

    @property
    def base(self) -> Parameter:
        return self._base

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def lora_wrap(w0: Parameter, r: int, alpha: float, rng: np.random.Generator | None = None) -> LoraAdapter:
    """Freeze `w0` and attach a trainable low-rank adapter (A random, B zero)."""
    adapter = LoraAdapter(w0, r, alpha, rng)
    w0.requires_grad = False
    return adapter


def lora_forward(adapter: LoraAdapter, x) -> Tensor:
    """x W0^T + scaling * (x A^T) B^T, without materializing the merged matrix."""
    x = dc.as_tensor(x)
    base = dc.matmul(x, dc.transpose(adapter.base))
    low = dc.matmul(dc.matmul(x, dc.transpose(adapter.lora_A)), dc.transpose(adapter.lora_B))
    return base + low * adapter.scaling


def lora_merge(adapter: LoraAdapter) -> np.ndarray:
    """W0 + scaling * B A as a new array; the adapter itself is left untouched."""
    return adapter.base.data + adapter.scaling * (adapter.lora_B.data @ adapter.lora_A.data)


# ---------------------------------------------------------------------- FiLM


def gfilm_apply(features, gamma, beta, layer_flag: bool):
    """gamma * F + beta where the layer is flagged, F untouched otherwise."""
    if not layer_flag:
        return features
    features = dc.as_tensor(features)
    gamma, beta = dc.as_tensor(gamma), dc.as_tensor(beta)
    c = features.shape[-1]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ValueError(f"gfilm_apply: gamma {gamma.shape} / beta {beta.shape} do not match features {features.shape}")
    return features * gamma + beta


class FilmProjection(Module):
    """gamma = 1 + W_g l + b_g, beta = W_b l + b_b; both projections start at zero."""

    def __init__(self, lang_dim: int, dim: int):
        self.gamma = Linear(lang_dim, dim, init="zeros")
        self.beta = Linear(lang_dim, dim, init="zeros")

    def __call__(self, lang) -> tuple[Tensor, Tensor]:
        return self.gamma(lang) + 1.0, self.beta(lang)


# ------------------------------------------------------------------ blocks


class Attention(Module):
    def __init__(self, dim: int, n_heads: int, rng):
        self.n_heads = n_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def __call__(self, x, record: Optional[list] = None) -> Tensor:
        g, n, c = x.shape
        h = self.n_heads

        def heads(t):
            return dc.transpose(dc.reshape(t, (g, n, h, c // h)), (0, 2, 1, 3))

        out, weights = dc.scaled_dot_product_attention(heads(self.q(x)), heads(self.k(x)), heads(self.v(x)))
        if record is not None:
            record.append(weights.data)
        out = dc.reshape(dc.transpose(out, (0, 2, 1, 3)), (g, n, c))
        return self.o(out)


class Block(Module):
    """Pre-norm transformer block; `kind` says which token groups attend together."""

    def __init__(self, kind: str, dim: int, n_heads: int, mlp_ratio: int, rng):
        self.kind = kind
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, n_heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)

    def __call__(self, x, record=None) -> Tensor:
        x = x + self.attn(self.norm1(x), record)
        return x + self.fc2(dc.gelu(self.fc1(self.norm2(x))))


# ------------------------------------------------------------------ encoder


def sincos_2d(gh: int, gw: int, dim: int, temperature: float = 100.0) -> np.ndarray:
    """(gh*gw, dim) table: sin/cos of row and column index at dim/4 frequencies each."""
    k = dim // 4
    omega = 1.0 / temperature ** (np.arange(k) / max(k, 1))
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    parts = []
    for coord in (rows.reshape(-1), cols.reshape(-1)):
        ang = coord[:, None] * omega[None]
        parts += [np.sin(ang), np.cos(ang)]
    table = np.concatenate(parts, axis=1)
    return np.pad(table, ((0, 0), (0, dim - table.shape[1])))


def _smoothing_matrix(n: int) -> np.ndarray:
    # bilinear 2x upsample followed by bilinear 2x downsample: a constant-preserving tent
    return dc.bilinear_matrix(2 * n, n) @ dc.bilinear_matrix(n, 2 * n)


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig | None = None, seed: int = 0):
        cfg = cfg or EncoderConfig()
        self._cfg = cfg
        rng = np.random.default_rng(seed)
        c, p = cfg.embed_dim, cfg.patch
        gh, gw = cfg.grid
        self.patch_embed = Linear(p * p * 3, c, rng)
        self.pos_embed = Parameter(cfg.pos_scale * sincos_2d(gh, gw, c))
        self.camera_token = Parameter(rng.normal(0, 0.02, (c,)))
        self.blocks = [
            Block("global" if flag else "frame", c, cfg.n_heads, cfg.mlp_ratio, rng) for flag in layer_mask(cfg)
        ]
        self.norm = LayerNorm(c)
        self.camera_head = Linear(c, 8, rng, init="small")
        self.depth_head = Linear(c, 2 * p * p, rng, init="small")
        self.lang_table = Parameter(rng.normal(0, 1.0, (cfg.vocab_size, cfg.lang_dim)))
        self.film = {str(j): FilmProjection(cfg.lang_dim, c) for j, m in enumerate(film_mask(cfg)) if m}
        self.view_embed = Parameter(rng.normal(0, 0.02, (cfg.max_views, c))) if cfg.view_embed else None
        h, w = cfg.image_size
        self._smooth_rows = _smoothing_matrix(h)
        self._smooth_cols = _smoothing_matrix(w)

    @property
    def cfg(self) -> EncoderConfig:
        return self._cfg

    # -- inputs

    def patchify(self, images) -> Tensor:
        """(B, V, H, W, 3) images -> (B, V, 1 + H*W/p^2, C) tokens, camera token first."""
        images = dc.as_tensor(images)
        if images.ndim == 3:
            images = dc.reshape(images, (1, 1, *images.shape))
        b, v, h, w, _ = images.shape
        p, c = self.cfg.patch, self.cfg.embed_dim
        if h % p or w % p:
            raise ValueError(f"patchify: image {h}x{w} not divisible by patch {p}")
        if (h, w) != self.cfg.image_size:
            raise ValueError(f"patchify: image {h}x{w} does not match configured {self.cfg.image_size}")
        x = dc.reshape(images - 0.5, (b, v, h // p, p, w // p, p, 3))
        x = dc.reshape(dc.transpose(x, (0, 1, 2, 4, 3, 5, 6)), (b, v, (h // p) * (w // p), p * p * 3))
        patches = self.patch_embed(x) + self.pos_embed
        cam = dc.reshape(self.camera_token, (1, 1, 1, c)) + np.zeros((b, v, 1, c))
        tokens = dc.concat([cam, patches], axis=2)
        if self.view_embed is not None:
            if v > self.cfg.max_views:
                raise ValueError(f"patchify: {v} views exceed max_views={self.cfg.max_views}")
            tokens = tokens + dc.reshape(self.view_embed[:v], (1, v, 1, c))
        return tokens

    def embed_instruction(self, token_ids: Sequence[int]) -> Tensor:
        """Mean of embedding rows; the empty instruction maps to the zero vector."""
        ids = np.asarray(list(token_ids), dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"instruction ids {ids.tolist()} outside vocabulary of {self.cfg.vocab_size}")
        if ids.size == 0:
            return Tensor(np.zeros(self.cfg.lang_dim))
        return dc.mean(dc.embedding(self.lang_table, ids), axis=0)

    def embed_batch(self, batch_ids: Sequence[Sequence[int]]) -> Tensor:
        rows = [dc.reshape(self.embed_instruction(ids), (1, self.cfg.lang_dim)) for ids in batch_ids]
        return dc.concat(rows, axis=0)

    # -- trunk

    def encode(self, tokens, lang=None, record: Optional[dict] = None) -> Tensor:
        """Run the alternating blocks on (B, V, N, C) tokens.

        `lang` is (B, lang_dim) or None. With `record`, attention weights land in
        record["attn"][j], the tensors reaching block j before modulation in
        record["pre"][j] and the tensors it actually consumes in record["inputs"][j].
        """
        tokens = dc.as_tensor(tokens)
        b, v, n, c = tokens.shape
        fmask = film_mask(self.cfg)
        if record is not None:
            record.setdefault("attn", {})
            record.setdefault("inputs", {})
            record.setdefault("pre", {})
        x = tokens
        for j, block in enumerate(self.blocks):
            if record is not None:
                record["pre"][j] = x.data.copy()
            if lang is not None and fmask[j]:
                gamma, beta = self.film[str(j)](lang)
                x = gfilm_apply(x, dc.reshape(gamma, (b, 1, 1, c)), dc.reshape(beta, (b, 1, 1, c)), True)
            if record is not None:
                record["inputs"][j] = x.data.copy()
            weights = [] if record is not None else None
            if block.kind == "frame":
                y = block(dc.reshape(x, (b * v, n, c)), weights)
            else:
                y = block(dc.reshape(x, (b, v * n, c)), weights)
            x = dc.reshape(y, (b, v, n, c))
            if record is not None:
                record["attn"][j] = weights[0]
        return self.norm(x)

    def forward(self, images, lang=None, record=None) -> Tensor:
        return self.encode(self.patchify(images), lang, record)

    # -- heads

    def camera_head_out(self, tokens) -> Tensor:
        """(B, V, N, C) tokens -> (B, V, 8) = [unit quaternion, translation, fov]."""
        tokens = dc.as_tensor(tokens)
        raw = self.camera_head(tokens[:, :, 0, :])
        q = raw[..., 0:4] + np.array([1.0, 0.0, 0.0, 0.0])
        norm = dc.sqrt(dc.sum(q * q, axis=-1, keepdims=True))
        sign = np.where(q.data[..., :1] < 0, -1.0, 1.0)
        q = q / norm * sign
        fov = dc.sigmoid(raw[..., 7:8]) * math.pi
        return dc.concat([q, raw[..., 4:7], fov], axis=-1)

    def depth_head_out(self, tokens) -> tuple[Tensor, Tensor]:
        """(B, V, N, C) tokens -> depth (B, V, H, W) >= 0 and sigma (B, V, H, W) > 0."""
        tokens = dc.as_tensor(tokens)
        b, v = tokens.shape[:2]
        p = self.cfg.patch
        gh, gw = self.cfg.grid
        h, w = self.cfg.image_size
        raw = self.depth_head(tokens[:, :, 1:, :])

        def to_map(t):
            t = dc.reshape(t, (b, v, gh, gw, p, p))
            t = dc.reshape(dc.transpose(t, (0, 1, 2, 4, 3, 5)), (b, v, h, w))
            return dc.linear_2d(t, self._smooth_rows, self._smooth_cols)

        depth = dc.softplus(to_map(raw[..., : p * p]))
        sigma = dc.exp(to_map(raw[..., p * p :]))
        return depth, sigma

    def pooled_feature(self, tokens) -> Tensor:
        """Mean of the per-view camera tokens: (B, V, N, C) -> (B, C)."""
        return dc.mean(dc.as_tensor(tokens)[:, :, 0, :], axis=1)

    # -- adapters and persistence

    def add_lora(self, rank: int = 4, alpha: float = 8.0, seed: int = 0) -> None:
        rng = np.random.default_rng([seed, 0x10A])
        for block in self.blocks:
            for lin in (block.attn.q, block.attn.k, block.attn.v, block.attn.o):
                lin.adapter = lora_wrap(lin.weight, rank, alpha, rng)

    def lora_adapters(self) -> dict[str, LoraAdapter]:
        out = {}
        for j, block in enumerate(self.blocks):
            for name in ("q", "k", "v", "o"):
                lin = getattr(block.attn, name)
                if lin.adapter is not None:
                    out[f"blocks.{j}.attn.{name}"] = lin.adapter
        return out

    def save(self, path, extra: dict | None = None, meta: dict | None = None) -> None:
        arrays = {f"encoder.{k}": v for k, v in self.state_dict().items()}
        arrays.update(extra or {})
        m = {"encoder_config": self.cfg.to_dict(), "lora": self.lora_config()}
        m.update(meta or {})
        save_checkpoint(path, arrays, m)

    def lora_config(self) -> dict | None:
        adapters = self.lora_adapters()
        if not adapters:
            return None
        a = next(iter(adapters.values()))
        return {"rank": a.rank, "alpha": a.alpha}

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict, film: str | None = None) -> "Encoder":
        cfg_d = dict(meta["encoder_config"])
        if film is not None:
            cfg_d["film"] = film
        enc = cls(EncoderConfig(**cfg_d))
        if meta.get("lora"):
            enc.add_lora(meta["lora"]["rank"], meta["lora"]["alpha"])
        own = {k[len("encoder."):]: v for k, v in arrays.items() if k.startswith("encoder.")}
        params = dict(enc.named_parameters())
        # FiLM projections absent from a checkpoint keep their zero (identity) init
        missing = sorted(k for k in set(params) - set(own) if not k.startswith("film."))
        if missing:
            raise KeyError(f"checkpoint is missing encoder entries: {missing}")
        enc.load_state_dict(own, strict=False)
        return enc

    @classmethod
    def load(cls, path, film: str | None = None) -> "Encoder":
        arrays, meta = load_checkpoint(path)
        return cls.from_arrays(arrays, meta, film)
