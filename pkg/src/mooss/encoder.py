"""Convolutional observation encoder and its momentum (EMA) twin."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from mooss.autodiff import Tensor, as_tensor, conv2d, no_grad, relu, reshape
from mooss.errors import ConfigError, UsageError
from mooss.nn import LayerNorm, Linear, Module, uniform_init


@dataclass
class EncoderConfig:
    in_shape: tuple[int, int, int] = (1, 28, 28)
    channels: list[int] = field(default_factory=lambda: [8, 16, 16])
    kernels: list[int] = field(default_factory=lambda: [3, 3, 3])
    strides: list[int] = field(default_factory=lambda: [2, 2, 1])
    d: int = 32
    layer_norm: bool = True

    @property
    def conv_depth(self) -> int:
        return len(self.channels)

    def feature_shape(self) -> tuple[int, int, int]:
        """Shape (C, H, W) after the conv stack; raises if any layer would be empty."""
        c, h, w = self.in_shape
        for i, (ch, k, s) in enumerate(zip(self.channels, self.kernels, self.strides)):
            h, w = (h - k) // s + 1, (w - k) // s + 1
            if h < 1 or w < 1:
                raise ConfigError(f"encoder conv layer {i} produces empty output from input {self.in_shape}")
            c = ch
        return c, h, w

    def validate(self) -> None:
        if self.d < 1:
            raise ConfigError(f"encoder.d must be >= 1, got {self.d}")
        if not (len(self.channels) == len(self.kernels) == len(self.strides)):
            raise ConfigError("encoder.channels, encoder.kernels and encoder.strides must have equal length")
        if any(s < 1 for s in self.strides) or any(k < 1 for k in self.kernels):
            raise ConfigError("encoder kernels and strides must be >= 1")
        self.feature_shape()


class Encoder(Module):
    """Maps each frame (c, H, W) to a d-dim state, independently per frame."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.convs: list[tuple] = []
        c_in = cfg.in_shape[0]
        for i, (c_out, k, s) in enumerate(zip(cfg.channels, cfg.kernels, cfg.strides)):
            fan_in = c_in * k * k
            w = self.add_param(f"conv{i}.weight", uniform_init(rng, (c_out, c_in, k, k), fan_in))
            b = self.add_param(f"conv{i}.bias", uniform_init(rng, (c_out,), fan_in))
            self.convs.append((w, b, s))
            c_in = c_out
        n_feat = int(np.prod(cfg.feature_shape()))
        self.proj = self.add_child("proj", Linear(n_feat, cfg.d, rng))
        self.norm = self.add_child("norm", LayerNorm(cfg.d)) if cfg.layer_norm else None

    def __call__(self, frames) -> Tensor:
        x = as_tensor(frames)
        if x.ndim != 5 or tuple(x.shape[2:]) != tuple(self.cfg.in_shape):
            raise UsageError(f"encoder expects (B, F, {self.cfg.in_shape}), got {x.shape}")
        B, F = x.shape[:2]
        h = reshape(x, (B * F,) + tuple(self.cfg.in_shape))
        for w, b, s in self.convs:
            h = relu(conv2d(h, w, b, stride=s))
        h = self.proj(reshape(h, (B * F, -1)))
        if self.norm is not None:
            h = self.norm(h)
        return reshape(h, (B, F, self.cfg.d))


def encode(encoder: Encoder, frames) -> Tensor:
    return encoder(frames)


class EncoderPair:
    """Query encoder trained by gradients; key encoder follows it by EMA only."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, m: float = 0.95):
        if not 0.0 <= m < 1.0:
            raise ConfigError(f"EMA momentum m must lie in [0, 1), got {m}")
        self.query = Encoder(cfg, rng)
        self.key = copy.deepcopy(self.query)
        for p in self.key.parameters():
            p.requires_grad = False
            p.grad = None
        self.m = m

    def encode_keys(self, frames) -> Tensor:
        with no_grad():
            out = self.key(frames)
        return Tensor(out.data)

    def ema_update(self) -> None:
        ema_update(self)


def ema_update(pair: EncoderPair) -> None:
    """key <- m * key + (1 - m) * query, parameter by parameter."""
    m = pair.m
    for (nk, pk), (nq, pq) in zip(pair.key.named_parameters(), pair.query.named_parameters()):
        if nk != nq or pk.shape != pq.shape:
            raise UsageError(f"key/query parameter mismatch: {nk}{pk.shape} vs {nq}{pq.shape}")
        pk.data = m * pk.data + (1.0 - m) * pq.data
