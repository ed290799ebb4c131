"""Causal transformer over interleaved (state, action) tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mooss.autodiff import (
    Tensor,
    add,
    as_tensor,
    causal_mask,
    concat,
    gather,
    multi_head_attention,
    relu,
    reshape,
    sinusoidal_table,
)
from mooss.errors import ConfigError, UsageError
from mooss.nn import LayerNorm, Linear, Module, uniform_init


@dataclass
class DecoderConfig:
    depth: int = 2
    heads: int = 4
    d: int = 32
    mlp_hidden: int = 32
    ff_mult: int = 4
    num_actions: int = 5

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"decoder.depth must be >= 1, got {self.depth}")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"decoder.d={self.d} must be divisible by decoder.heads={self.heads}")
        if self.num_actions < 1:
            raise ConfigError("decoder.num_actions must be >= 1")


class ActionEmbedder(Module):
    """Linear map from a one-hot action id to a d-dim token."""

    def __init__(self, num_actions: int, d: int, rng: np.random.Generator):
        super().__init__()
        self.num_actions = num_actions
        self.lin = self.add_child("lin", Linear(num_actions, d, rng))

    def __call__(self, actions) -> Tensor:
        actions = np.asarray(actions, dtype=np.int64)
        if actions.size and (actions.min() < 0 or actions.max() >= self.num_actions):
            raise UsageError(f"action ids must lie in [0, {self.num_actions})")
        onehot = np.eye(self.num_actions)[actions]
        return self.lin(onehot)


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, 2F, d)
    positions: np.ndarray  # (2F, d), row 2i == row 2i+1 == p_i


def build_token_sequence(states, actions, embedder: ActionEmbedder) -> TokenSequence:
    """Interleave [s_0, a_0, s_1, a_1, ...] and add the positional vector p_i to both members of pair i."""
    states = as_tensor(states)
    actions = np.asarray(actions, dtype=np.int64)
    if states.ndim != 3:
        raise UsageError(f"states must be (B, F, d), got {states.shape}")
    B, F, d = states.shape
    if actions.shape != (B, F):
        raise UsageError(f"actions shape {actions.shape} does not match states {(B, F)}")
    a = embedder(actions)
    if a.shape[-1] != d:
        raise UsageError(f"action embedding width {a.shape[-1]} != state width {d}")
    pairs = concat([reshape(states, (B, F, 1, d)), reshape(a, (B, F, 1, d))], axis=2)
    tokens = reshape(pairs, (B, 2 * F, d))
    pos = np.repeat(sinusoidal_table(F, d), 2, axis=0)
    return TokenSequence(add(tokens, pos), pos)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln(x)), then x + ff(ln(x))."""

    def __init__(self, d: int, heads: int, ff_mult: int, rng: np.random.Generator):
        super().__init__()
        self.heads = heads
        self.ln1 = self.add_child("ln1", LayerNorm(d))
        self.wq = self.add_param("wq", uniform_init(rng, (d, d), d))
        self.wk = self.add_param("wk", uniform_init(rng, (d, d), d))
        self.wv = self.add_param("wv", uniform_init(rng, (d, d), d))
        self.wo = self.add_param("wo", uniform_init(rng, (d, d), d))
        self.ln2 = self.add_child("ln2", LayerNorm(d))
        self.ff1 = self.add_child("ff1", Linear(d, ff_mult * d, rng))
        self.ff2 = self.add_child("ff2", Linear(ff_mult * d, d, rng))

    def __call__(self, x, mask: np.ndarray) -> Tensor:
        x = add(x, multi_head_attention(self.ln1(x), self.wq, self.wk, self.wv, self.wo, self.heads, mask))
        return add(x, self.ff2(relu(self.ff1(self.ln2(x)))))


class PredictiveDecoder(Module):
    """Produces one query state per timestep from the masked states and actions."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.actions = self.add_child("action_embed", ActionEmbedder(cfg.num_actions, cfg.d, rng))
        self.blocks = [self.add_child(f"block{i}", TransformerBlock(cfg.d, cfg.heads, cfg.ff_mult, rng))
                       for i in range(cfg.depth)]
        self.ln_f = self.add_child("ln_f", LayerNorm(cfg.d))
        self.head1 = self.add_child("head1", Linear(cfg.d, cfg.mlp_hidden, rng))
        self.head2 = self.add_child("head2", Linear(cfg.mlp_hidden, cfg.d, rng))

    def decode(self, seq: TokenSequence) -> Tensor:
        x = seq.tokens
        T = x.shape[1]
        if T % 2:
            raise UsageError(f"token sequence length must be even, got {T}")
        mask = causal_mask(T)
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_f(x)
        states = gather(x, np.arange(0, T, 2), axis=1)
        return self.head2(relu(self.head1(states)))

    def __call__(self, states, actions) -> Tensor:
        return self.decode(build_token_sequence(states, actions, self.actions))


def decode(decoder: PredictiveDecoder, tokens: TokenSequence) -> Tensor:
    return decoder.decode(tokens)
