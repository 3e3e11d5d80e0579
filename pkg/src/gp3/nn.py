"""Minimal module system on top of diffcore: parameter discovery, Linear, LayerNorm."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor


class Module:
    """Parameters are discovered from attributes; names starting with '_' are skipped."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(arrays))
        if strict and missing:
            raise KeyError(f"missing checkpoint entries: {missing}")
        for name, p in params.items():
            if name not in arrays:
                continue
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {value.shape} vs model {p.shape}")
            p.data = value.copy()


def _walk(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


class Linear(Module):
    """y = x W^T + b with W stored as (out, in). Hosts an optional LoRA adapter."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 init: str = "default", bias: bool = True):
        if init == "zeros" or rng is None:
            w = np.zeros((d_out, d_in))
        elif init == "default":
            w = rng.uniform(-1, 1, (d_out, d_in)) / np.sqrt(d_in)
        elif init == "small":
            w = rng.normal(0, 0.02, (d_out, d_in))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None
        self.adapter = None

    def __call__(self, x) -> Tensor:
        if self.adapter is not None:
            from .encoder import lora_forward

            y = lora_forward(self.adapter, x)
        else:
            y = dc.matmul(x, dc.transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return dc.layer_norm(x, self.eps) * self.gain + self.shift
