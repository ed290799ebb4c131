"""Multi-level temporal contrastive loss with a bilinear similarity.

Keys of query (b, i) are ranked by temporal distance |i - j| inside the
same sequence. Level l treats the keys at distance exactly l as positives
and contrasts them against every same-sequence key at distance >= l plus
every key from the other sequences, at temperature tau_l.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mooss.autodiff import Parameter, Tensor, as_tensor, masked_logsumexp, matmul, mul, reshape, sub, tsum
from mooss.errors import ConfigError, NonFiniteError, UsageError


@dataclass(frozen=True)
class TemperatureSchedule:
    tau0: float = 0.07
    delta: float = 0.075

    def tau(self, level: int) -> float:
        return self.tau0 + level * self.delta

    def validate(self, L: int) -> None:
        taus = [self.tau(l) for l in range(L + 2)]
        if taus[0] <= 0:
            raise ConfigError(f"contrastive.tau0 must be positive, got {self.tau0}")
        if any(a >= b for a, b in zip(taus, taus[1:])):
            raise ConfigError(f"temperatures must strictly increase with level (delta={self.delta})")


@dataclass(frozen=True)
class ContrastiveConfig:
    L: int = 6
    schedule: TemperatureSchedule = TemperatureSchedule()
    lam: float = 0.1

    def validate(self) -> None:
        if self.L < 0:
            raise ConfigError(f"contrastive.L must be >= 0, got {self.L}")
        if self.lam < 0:
            raise ConfigError(f"contrastive.lambda must be >= 0, got {self.lam}")
        self.schedule.validate(self.L)


class BilinearSimilarity:
    """sim(q, k) = q^T W k with W learnable, initialised to the identity."""

    def __init__(self, d: int):
        self.W = Parameter(np.eye(d), name="W")

    def parameters(self) -> list[Parameter]:
        return [self.W]


def similarity_matrix(q, k, W) -> Tensor:
    """(B*F, B*F) matrix of q_m^T W k_n with rows/cols ordered by flattened (b, i)."""
    q, k, W = as_tensor(q), as_tensor(k), as_tensor(W)
    if q.ndim != 3 or k.ndim != 3 or q.shape[-1] != k.shape[-1]:
        raise UsageError(f"similarity_matrix: incompatible embeddings {q.shape} and {k.shape}")
    d = q.shape[-1]
    if W.shape != (d, d):
        raise UsageError(f"similarity_matrix: W shape {W.shape} does not match d={d}")
    qf = reshape(q, (-1, d))
    kf = reshape(k, (-1, d))
    return matmul(matmul(qf, W), kf.transpose())


@dataclass
class LevelPartition:
    """Boolean (N, N) masks over flattened (b, i) queries and keys, N = B * F."""

    B: int
    F: int
    L: int
    positives: list[np.ndarray]  # positives[l][m, n]: key n at distance exactly l
    negatives: np.ndarray  # cross-sequence keys plus same-sequence keys with distance > L
    same_seq: np.ndarray
    distance: np.ndarray  # |i - j|, meaningful where same_seq

    def denominator(self, level: int) -> np.ndarray:
        """Same-sequence keys at distance >= level plus every cross-sequence key."""
        return ~self.same_seq | (self.same_seq & (self.distance >= level))

    def key_sets(self, b: int, i: int) -> dict:
        """Explicit key sets of one query, as (b, j) pairs."""
        m = b * self.F + i
        as_pairs = lambda row: {divmod(int(n), self.F) for n in np.flatnonzero(row)}  # noqa: E731
        return {
            "levels": [as_pairs(self.positives[l][m]) for l in range(self.L + 1)],
            "negatives": as_pairs(self.negatives[m]),
        }


def level_partition(B: int, F: int, L: int) -> LevelPartition:
    if F < 1 or B < 1:
        raise UsageError(f"level_partition needs B, F >= 1, got B={B}, F={F}")
    seq = np.repeat(np.arange(B), F)
    t = np.tile(np.arange(F), B)
    same = seq[:, None] == seq[None, :]
    dist = np.abs(t[:, None] - t[None, :])
    positives = [same & (dist == l) for l in range(L + 1)]
    negatives = ~same | (same & (dist > L))
    return LevelPartition(B, F, L, positives, negatives, same, dist)


@dataclass
class MoossLoss:
    total: Tensor
    per_level: list[float]
    per_level_counts: list[int]


def level_loss(sims, partition: LevelPartition, level: int, tau: float) -> tuple[Tensor, np.ndarray]:
    """Per-query loss of one level and the boolean vector of queries where it is defined.

    Queries with no key at distance ``level`` get 0 and are flagged invalid.
    """
    sims = as_tensor(sims)
    logits = mul(sims, 1.0 / tau)
    pos = partition.positives[level]
    valid = pos.any(axis=1)
    loss = sub(masked_logsumexp(logits, partition.denominator(level)), masked_logsumexp(logits, pos))
    return mul(loss, valid.astype(np.float64)), valid


def mooss_loss(q_states, k_states, W, cfg: ContrastiveConfig) -> MoossLoss:
    """Sum over levels of the mean per-query level loss.

    At each level the mean runs over the queries that have at least one
    positive key; levels with no such query contribute nothing.
    """
    q_states, k_states = as_tensor(q_states), as_tensor(k_states)
    for name, t in (("decoder (query states)", q_states), ("key encoder (key states)", k_states)):
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"non-finite values in embeddings produced by the {name}")
    B, F, _ = q_states.shape
    if k_states.shape[:2] != (B, F):
        raise UsageError(f"query states {q_states.shape} and key states {k_states.shape} disagree")
    sims = similarity_matrix(q_states, k_states, W)
    part = level_partition(B, F, cfg.L)
    total = None
    per_level, counts = [], []
    for l in range(cfg.L + 1):
        per_q, valid = level_loss(sims, part, l, cfg.schedule.tau(l))
        n = int(valid.sum())
        counts.append(n)
        if n == 0:
            per_level.append(0.0)
            continue
        term = mul(tsum(per_q), 1.0 / n)
        per_level.append(term.item())
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)
    return MoossLoss(total, per_level, counts)


def total_loss(task_loss, mooss, lam: float) -> Tensor:
    """task_loss + lam * mooss."""
    if lam == 0:
        return as_tensor(task_loss)
    return as_tensor(task_loss) + mul(mooss, lam)
