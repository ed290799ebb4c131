"""Finite-difference check of the whole contrastive pipeline on a tiny instance.

The mask and the key states are sampled once and then held fixed, so the loss
is a deterministic function of the query encoder, decoder and W.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mooss.autodiff import GradCheckReport, Parameter, Tensor, grad_check
from mooss.contrastive import BilinearSimilarity, ContrastiveConfig, TemperatureSchedule, mooss_loss
from mooss.decoder import DecoderConfig, PredictiveDecoder
from mooss.encoder import EncoderConfig, EncoderPair
from mooss.env import EnvConfig, fill_buffer, sample_batch, stack_batch
from mooss.masking import CubeShape, build_graph, mask_frames


@dataclass
class TinyPipeline:
    pair: EncoderPair
    decoder: PredictiveDecoder
    sim: BilinearSimilarity
    masked: np.ndarray
    actions: np.ndarray
    keys: Tensor
    contrastive: ContrastiveConfig

    def loss(self) -> Tensor:
        q = self.decoder(self.pair.query(self.masked), self.actions)
        return mooss_loss(q, self.keys, self.sim.W, self.contrastive).total

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [(f"encoder.{n}", p) for n, p in self.pair.query.named_parameters()]
        out += [(f"decoder.{n}", p) for n, p in self.decoder.named_parameters()]
        out += [("W", self.sim.W)]
        return out


def tiny_pipeline(seed: int = 0, B: int = 2, F: int = 4, L: int = 2, p_m: float = 0.25, d: int = 8) -> TinyPipeline:
    """Encoder with d=8 on 8x8 frames, one decoder block, one fixed mask draw."""
    rng = np.random.default_rng(seed)
    env = EnvConfig(H=8, W=8, radius=1.5, T=2 * F)
    frames, actions, _ = stack_batch(sample_batch(fill_buffer(env, 2, rng), B, F, rng))
    enc_cfg = EncoderConfig((1, 8, 8), [4, 4], [3, 3], [2, 1], d)
    pair = EncoderPair(enc_cfg, rng, m=0.95)
    decoder = PredictiveDecoder(DecoderConfig(depth=1, heads=2, d=d, mlp_hidden=d), rng)
    sim = BilinearSimilarity(d)
    # move W off the identity so its gradient is not special
    sim.W.data = sim.W.data + 0.1 * rng.normal(size=(d, d))
    cube = CubeShape(2, 4, 4)
    masked, _ = mask_frames(frames, build_graph(F, 8, 8, cube), cube, p_m, rng)
    keys = pair.encode_keys(frames)
    contrastive = ContrastiveConfig(L, TemperatureSchedule(), 1.0)
    return TinyPipeline(pair, decoder, sim, masked, actions, keys, contrastive)


# loss is O(5), so central-difference round-off is ~1e-10; entries smaller than
# the floor are compared in absolute terms (error <= tol * floor = 1e-9)
PIPELINE_FLOOR = 1e-5


def check_pipeline(full: bool = True, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
                   sample: int = 8) -> GradCheckReport:
    """Grad-check every parameter; ``full=False`` probes ``sample`` coordinates per tensor."""
    pipe = tiny_pipeline(seed)
    named = pipe.named_parameters()
    return grad_check(pipe.loss, [p for _, p in named], eps=eps, tol=tol,
                      max_entries=None if full else sample, rng=np.random.default_rng(seed),
                      names=[n for n, _ in named], floor=PIPELINE_FLOOR)
