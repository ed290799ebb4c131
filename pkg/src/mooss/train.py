"""Training loop: mask -> encode -> decode -> contrast -> Adam -> EMA, plus evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from mooss import checkpoint
from mooss.autodiff import Adam, Tensor, backward, no_grad
from mooss.config import TrainConfig
from mooss.contrastive import BilinearSimilarity, level_partition, mooss_loss, similarity_matrix, total_loss
from mooss.decoder import PredictiveDecoder
from mooss.encoder import Encoder, EncoderPair
from mooss.env import ReplayBuffer, fill_buffer, sample_batch, stack_batch
from mooss.errors import NonFiniteError
from mooss.masking import build_graph, mask_frames
from mooss.nn import Linear, Module

log = logging.getLogger(__name__)

STREAMS = ("env", "mask", "init", "batch", "eval")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per named purpose, all derived from one master seed."""
    return {name: np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
            for name in STREAMS}


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsRow:
    step: int
    total_loss: float
    level_losses: list[float]
    sim_by_delta: list[float]
    sim_cross: float
    grad_norm: float
    probe_mse: float | None = None
    wall_ms: float = 0.0

    def values(self) -> list:
        probe = "" if self.probe_mse is None else repr(self.probe_mse)
        return ([self.step, repr(self.total_loss)] + [repr(v) for v in self.level_losses]
                + [repr(v) for v in self.sim_by_delta] + [repr(self.sim_cross), repr(self.grad_norm), probe,
                                                          f"{self.wall_ms:.3f}"])


def metrics_header(L: int) -> list[str]:
    return (["step", "total_loss"] + [f"loss_l{l}" for l in range(L + 1)] + [f"sim_d{l}" for l in range(L + 1)]
            + ["sim_cross", "grad_norm", "probe_mse", "wall_ms"])


class MetricsWriter:
    """Append-only CSV; header written once, every row flushed."""

    def __init__(self, path: str | Path, L: int):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(metrics_header(L))
        self._fh.flush()

    def write(self, row: MetricsRow) -> None:
        self._w.writerow(row.values())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------- evaluation

def bucket_means(sims: np.ndarray, B: int, F: int, L: int) -> tuple[list[float], float]:
    """Mean similarity per temporal distance 0..L and over cross-sequence pairs."""
    part = level_partition(B, F, L)
    by_delta = [float(sims[p].mean()) if p.any() else math.nan for p in part.positives]
    cross = ~part.same_seq
    return by_delta, float(sims[cross].mean()) if cross.any() else math.nan


def spearman(x, y) -> tuple[float, bool]:
    """Spearman rank correlation. Returns (0.0, False) when either side is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    scale = max(1.0, float(np.abs(y).max())) if y.size else 1.0
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) <= 1e-12 * scale:
        return 0.0, False
    rx, ry = rankdata(x), rankdata(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum())), True


@dataclass
class SmoothnessReport:
    sim_by_delta: list[float]
    sim_cross: float
    rho: float
    rho_defined: bool
    pair_rho: float = 0.0

    def strictly_ordered(self) -> bool:
        seq = self.sim_by_delta + [self.sim_cross]
        return all(a > b for a, b in zip(seq, seq[1:]))


def smoothness_from_buckets(by_delta: list[float], cross: float) -> SmoothnessReport:
    """Rank correlation of level index against bucket mean; the cross bucket ranks last (level L+1)."""
    levels = list(range(len(by_delta) + 1))
    means = by_delta + [cross]
    keep = [k for k, v in enumerate(means) if not math.isnan(v)]
    rho, ok = spearman([levels[k] for k in keep], [means[k] for k in keep])
    return SmoothnessReport(by_delta, cross, rho, ok)


def embed(encoder: Encoder, frames: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Evaluation-path encoding: unmasked frames (B, F, c, H, W) through the query encoder only."""
    B, F = frames.shape[:2]
    flat = frames.reshape((B * F, 1) + frames.shape[2:])
    out = []
    with no_grad():
        for s in range(0, B * F, chunk):
            out.append(encoder(flat[s:s + chunk]).data[:, 0])
    return np.concatenate(out).reshape(B, F, -1)


def pair_levels(B: int, F: int, L: int) -> np.ndarray:
    """(N, N) similarity level of every pair: |i - j| up to L, L + 1 for the lowest level."""
    part = level_partition(B, F, L)
    return np.where(part.same_seq & (part.distance <= L), part.distance, L + 1)


def eval_smoothness(encoder: Encoder, W: np.ndarray, buffer: ReplayBuffer, n_batches: int, B: int, F: int, L: int,
                    seed: int = 0) -> SmoothnessReport:
    """Held-out similarity structure of q^T W q over unmasked encodings.

    ``rho`` ranks the bucket means (averaged over ``n_batches`` batches);
    ``pair_rho`` ranks every individual pair's similarity against its level.
    """
    rng = np.random.default_rng(seed)
    by_delta = np.zeros(L + 1)
    cross = 0.0
    levels = pair_levels(B, F, L).ravel()
    all_levels, all_sims = [], []
    for _ in range(n_batches):
        frames, _, _ = stack_batch(sample_batch(buffer, B, F, rng))
        z = embed(encoder, frames)
        zf = z.reshape(B * F, -1)
        sims = zf @ np.asarray(W) @ zf.T
        d, c = bucket_means(sims, B, F, L)
        by_delta += np.array(d)
        cross += c
        all_levels.append(levels)
        all_sims.append(sims.ravel())
    report = smoothness_from_buckets(list(by_delta / n_batches), cross / n_batches)
    report.pair_rho, _ = spearman(np.concatenate(all_levels), np.concatenate(all_sims))
    return report


def ridge_probe(x_fit: np.ndarray, y_fit: np.ndarray, x_test: np.ndarray, y_test: np.ndarray,
                reg: float = 1e-3) -> float:
    """Closed-form ridge regression with an unpenalised intercept; returns test MSE."""
    mx, my = x_fit.mean(axis=0), y_fit.mean(axis=0)
    xc = x_fit - mx
    coef = np.linalg.solve(xc.T @ xc + reg * np.eye(xc.shape[1]), xc.T @ (y_fit - my))
    pred = (x_test - mx) @ coef + my
    return float(((pred - y_test) ** 2).mean())


def eval_probe(encoder: Encoder, buffer: ReplayBuffer, reg: float = 1e-3) -> float:
    """Fit a linear probe to (x, y) on the first half of the episodes, score it on the rest."""
    n = len(buffer.episodes)
    split = max(1, n // 2)
    feats, targets = [], []
    for ep in buffer.episodes:
        feats.append(embed(encoder, ep.frames[None])[0])
        targets.append(ep.latents[:, :2])
    x_fit, y_fit = np.concatenate(feats[:split]), np.concatenate(targets[:split])
    x_test, y_test = np.concatenate(feats[split:]), np.concatenate(targets[split:])
    return ridge_probe(x_fit, y_fit, x_test, y_test, reg)


# ---------------------------------------------------------------- task loss

class ProbeTask(Module):
    """Optional task loss: MSE of a linear head predicting (x, y) from query-encoder states."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.head = self.add_child("head", Linear(d, 2, rng))

    def __call__(self, states: Tensor, latents: np.ndarray) -> Tensor:
        err = self.head(states) - latents[..., :2]
        return (err * err).mean()


# ---------------------------------------------------------------- trainer

@dataclass
class Trainer:
    cfg: TrainConfig
    task_loss: Callable[[Tensor, np.ndarray], Tensor] | None = None
    step: int = 0
    last_checkpoint: Path | None = None
    rngs: dict = field(init=False)

    def __post_init__(self):
        cfg = self.cfg.validate()
        self.rngs = rng_streams(cfg["seed"])
        env_cfg = cfg.env
        self.buffer = fill_buffer(env_cfg, env_cfg.episodes, self.rngs["env"])
        self.holdout = fill_buffer(env_cfg, cfg["eval.episodes"], self.rngs["eval"])
        init = self.rngs["init"]
        self.pair = EncoderPair(cfg.encoder, init, cfg["ema.m"])
        self.decoder = PredictiveDecoder(cfg.decoder, init)
        self.sim = BilinearSimilarity(cfg["encoder.d"])
        if self.task_loss is None and cfg["task"] == "probe":
            self.task_loss = ProbeTask(cfg["encoder.d"], init)
        self.graph = build_graph(cfg["F"], env_cfg.H, env_cfg.W, cfg.cube)
        self.contrastive = cfg.contrastive
        base = self.pair.query.parameters()
        extra = self.task_loss.parameters() if isinstance(self.task_loss, Module) else []
        specific = self.decoder.parameters() + self.sim.parameters()
        self.params = base + extra + specific
        self._n_base = len(base) + len(extra)
        self.opt = Adam(self.params, cfg["adam.lr"], cfg["adam.beta1"], cfg["adam.beta2"], cfg["adam.eps"])

    @property
    def W(self):
        return self.sim.W

    def lr_scales(self) -> list[float]:
        warm = self.cfg["warmup"]
        s = 1.0 if warm == 0 else min(1.0, (self.opt.step_count + 1) / warm)
        return [1.0] * self._n_base + [s] * (len(self.params) - self._n_base)

    def next_batch(self):
        return sample_batch(self.buffer, self.cfg["B"], self.cfg["F"], self.rngs["batch"])

    def forward(self, frames: np.ndarray, actions: np.ndarray, latents: np.ndarray | None = None):
        """Loss terms for one batch; returns (total, contrastive result, similarity matrix data)."""
        masked, _ = mask_frames(frames, self.graph, self.cfg.cube, self.cfg["mask.p_m"], self.rngs["mask"])
        s_tilde = self.pair.query(masked)
        q = self.decoder(s_tilde, actions)
        k = self.pair.encode_keys(frames)
        res = mooss_loss(q, k, self.sim.W, self.contrastive)
        task = Tensor(0.0)
        if self.task_loss is not None:
            task = self.task_loss(self.pair.query(frames), latents)
        total = total_loss(task, res.total, self.contrastive.lam)
        with no_grad():
            sims = similarity_matrix(q.data, k.data, self.sim.W.data).data
        return total, res, sims

    def train_step(self, batch=None) -> MetricsRow:
        t0 = time.perf_counter()
        batch = batch if batch is not None else self.next_batch()
        frames, actions, latents = stack_batch(batch)
        total, res, sims = self.forward(frames, actions, latents)
        if not math.isfinite(total.item()):
            raise NonFiniteError(f"non-finite loss at step {self.step}; last good checkpoint: {self.last_checkpoint}")
        self.opt.zero_grad()
        backward(total)
        gnorm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params))
        if not math.isfinite(gnorm):
            raise NonFiniteError(f"non-finite gradient at step {self.step}; last good checkpoint: {self.last_checkpoint}")
        self.opt.step(self.lr_scales())
        self.pair.ema_update()
        self.step += 1
        B, F = frames.shape[:2]
        by_delta, cross = bucket_means(sims, B, F, self.contrastive.L)
        return MetricsRow(self.step, total.item(), res.per_level, by_delta, cross, gnorm,
                          wall_ms=(time.perf_counter() - t0) * 1e3)

    # evaluation ----------------------------------------------------------

    def evaluate(self) -> tuple[SmoothnessReport, float]:
        cfg = self.cfg
        smooth = eval_smoothness(self.pair.query, self.sim.W.data, self.holdout, cfg["eval.batches"], cfg["B"],
                                 cfg["F"], cfg.contrastive.L, seed=cfg["seed"])
        probe = eval_probe(self.pair.query, self.holdout, cfg["eval.ridge"])
        return smooth, probe

    # checkpoints ---------------------------------------------------------

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        files = {"query_encoder": "query_encoder.bin", "key_encoder": "key_encoder.bin",
                 "decoder": "decoder.bin", "similarity": "similarity.bin"}
        checkpoint.save_module(out_dir / files["query_encoder"], self.pair.query)
        checkpoint.save_module(out_dir / files["key_encoder"], self.pair.key)
        checkpoint.save_module(out_dir / files["decoder"], self.decoder)
        checkpoint.save_params(out_dir / files["similarity"], [("W", self.sim.W.data)])
        if isinstance(self.task_loss, Module):
            files["task"] = "task.bin"
            checkpoint.save_module(out_dir / files["task"], self.task_loss)
        path = checkpoint.write_manifest(out_dir, files, self.cfg.hash(), self.cfg.to_text(), self.step)
        self.last_checkpoint = path
        return path

    def load(self, manifest_path: str | Path) -> None:
        manifest_path = Path(manifest_path)
        if manifest_path.is_dir():
            manifest_path = manifest_path / "manifest.json"
        man = checkpoint.read_manifest(manifest_path)
        root = manifest_path.parent
        comp = man["components"]
        checkpoint.load_module(root / comp["query_encoder"], self.pair.query)
        checkpoint.load_module(root / comp["key_encoder"], self.pair.key)
        checkpoint.load_module(root / comp["decoder"], self.decoder)
        self.sim.W.data = checkpoint.load_params(root / comp["similarity"])["W"].copy()
        if "task" in comp and isinstance(self.task_loss, Module):
            checkpoint.load_module(root / comp["task"], self.task_loss)
        self.step = int(man["step"])


@dataclass
class RunResult:
    rows: list[MetricsRow]
    evals: list[tuple[int, SmoothnessReport, float]]
    initial: tuple[SmoothnessReport, float]
    final: tuple[SmoothnessReport, float]
    trainer: Trainer


def run_training(cfg: TrainConfig, out_dir: str | Path | None = None, progress: bool = False) -> RunResult:
    """Full run. With ``out_dir`` set, writes metrics.csv and checkpoints into it."""
    trainer = Trainer(cfg)
    L = cfg.contrastive.L
    writer = MetricsWriter(Path(out_dir) / "metrics.csv", L) if out_dir is not None else None
    ckpt_dir = Path(out_dir) / "checkpoint" if out_dir is not None else None
    initial = trainer.evaluate()
    evals = [(0, initial[0], initial[1])]
    rows: list[MetricsRow] = []
    try:
        for _ in range(cfg["steps"]):
            row = trainer.train_step()
            is_eval = cfg["eval_every"] and (trainer.step % cfg["eval_every"] == 0 or trainer.step == cfg["steps"])
            if is_eval:
                smooth, probe = trainer.evaluate()
                row.probe_mse = probe
                evals.append((trainer.step, smooth, probe))
                if ckpt_dir is not None:
                    trainer.save(ckpt_dir)
                if progress:
                    log.info("step %d loss %.4f rho %.3f probe %.5f", trainer.step, row.total_loss, smooth.rho, probe)
            if trainer.step % cfg["log_every"] == 0 or is_eval or trainer.step == 1:
                rows.append(row)
                if writer is not None:
                    writer.write(row)
    finally:
        if writer is not None:
            writer.close()
    final = (evals[-1][1], evals[-1][2]) if evals[-1][0] == trainer.step else trainer.evaluate()
    if ckpt_dir is not None and trainer.last_checkpoint is None:
        trainer.save(ckpt_dir)
    return RunResult(rows, evals, initial, final, trainer)
