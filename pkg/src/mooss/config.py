"""Training configuration and its ``key = value`` text format.

One setting per line, dotted section prefixes, ``#`` starts a comment::

    env.H = 28
    encoder.channels = 8, 16, 16
    contrastive.L = 4

Every key, its type and default is listed in ``SCHEMA``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from mooss.contrastive import ContrastiveConfig, TemperatureSchedule
from mooss.decoder import DecoderConfig
from mooss.encoder import EncoderConfig
from mooss.env import NUM_ACTIONS, EnvConfig
from mooss.errors import ConfigError
from mooss.masking import CubeShape


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, description)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0, "master seed; split into env/mask/init/batch/eval streams"),
    "F": (int, 8, "sequence length (frames per sampled window)"),
    "B": (int, 16, "sequences per batch"),
    "steps": (int, 3000, "optimisation steps"),
    "eval_every": (int, 250, "steps between held-out evaluations (0 disables)"),
    "log_every": (int, 10, "steps between metrics rows"),
    "warmup": (int, 300, "linear lr warmup steps for decoder, action embedder and W"),
    "output_dir": (str, "runs/default", "directory for metrics, checkpoints and figures"),
    "task": (str, "none", "task loss added to the contrastive term: none | probe"),
    "env.H": (int, 28, "frame height"),
    "env.W": (int, 28, "frame width"),
    "env.c": (int, 1, "channels"),
    "env.dt": (float, 0.05, "integration step"),
    "env.accel": (float, 0.25, "velocity change per accelerate action"),
    "env.v_max": (float, 1.0, "speed clamp per axis"),
    "env.radius": (float, 3.0, "dot radius in pixels"),
    "env.T": (int, 64, "episode length"),
    "env.episodes": (int, 64, "training episodes in the replay buffer"),
    "cube.f": (int, 2, "cube temporal length"),
    "cube.h": (int, 7, "cube height"),
    "cube.w": (int, 7, "cube width"),
    "mask.p_m": (float, 0.5, "random-walk mask ratio"),
    "contrastive.L": (int, 4, "temporal window size"),
    "contrastive.tau0": (float, 0.07, "level-0 temperature"),
    "contrastive.delta": (float, 0.075, "temperature increment per level"),
    "contrastive.lambda": (float, 0.1, "weight of the contrastive loss"),
    "encoder.channels": (_int_list, [8, 16, 16], "conv output channels per layer"),
    "encoder.kernels": (_int_list, [3, 3, 3], "conv kernel sizes"),
    "encoder.strides": (_int_list, [2, 2, 1], "conv strides"),
    "encoder.d": (int, 32, "state embedding dimension"),
    "encoder.layer_norm": (_bool, True, "layer-normalise the embedding"),
    "decoder.depth": (int, 2, "transformer layers"),
    "decoder.heads": (int, 4, "attention heads"),
    "decoder.mlp_hidden": (int, 32, "projection head width"),
    "decoder.ff_mult": (int, 4, "feed-forward width as a multiple of d"),
    "ema.m": (float, 0.95, "key encoder momentum"),
    "adam.lr": (float, 5e-4, "learning rate"),
    "adam.beta1": (float, 0.9, "first moment decay"),
    "adam.beta2": (float, 0.999, "second moment decay"),
    "adam.eps": (float, 1e-8, "denominator epsilon"),
    "eval.batches": (int, 8, "held-out batches per smoothness evaluation"),
    "eval.episodes": (int, 16, "held-out episodes (half fit the probe, half score it)"),
    "eval.ridge": (float, 1e-3, "ridge regulariser of the linear probe"),
}


@dataclass
class TrainConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    # typed views -------------------------------------------------------

    @property
    def env(self) -> EnvConfig:
        v = self.values
        return EnvConfig(H=v["env.H"], W=v["env.W"], c=v["env.c"], dt=v["env.dt"], accel=v["env.accel"],
                         v_max=v["env.v_max"], radius=v["env.radius"], T=v["env.T"],
                         episodes=v["env.episodes"], seed=v["seed"])

    @property
    def cube(self) -> CubeShape:
        return CubeShape(self.values["cube.f"], self.values["cube.h"], self.values["cube.w"])

    @property
    def contrastive(self) -> ContrastiveConfig:
        v = self.values
        return ContrastiveConfig(v["contrastive.L"], TemperatureSchedule(v["contrastive.tau0"], v["contrastive.delta"]),
                                 v["contrastive.lambda"])

    @property
    def encoder(self) -> EncoderConfig:
        v = self.values
        return EncoderConfig((v["env.c"], v["env.H"], v["env.W"]), list(v["encoder.channels"]),
                             list(v["encoder.kernels"]), list(v["encoder.strides"]), v["encoder.d"],
                             v["encoder.layer_norm"])

    @property
    def decoder(self) -> DecoderConfig:
        v = self.values
        return DecoderConfig(v["decoder.depth"], v["decoder.heads"], v["encoder.d"], v["decoder.mlp_hidden"],
                             v["decoder.ff_mult"], NUM_ACTIONS)

    # -------------------------------------------------------------------

    def validate(self) -> "TrainConfig":
        v = self.values
        F = v["F"]
        if F < 1:
            raise ConfigError(f"F must be >= 1, got {F}")
        cube = self.cube
        for axis, size, part in (("F", F, cube.f), ("env.H", v["env.H"], cube.h), ("env.W", v["env.W"], cube.w)):
            if size % part:
                raise ConfigError(f"axis {axis}={size} is not divisible by cube size {part}")
        if not 0.0 <= v["mask.p_m"] <= 1.0:
            raise ConfigError(f"mask.p_m must lie in [0, 1], got {v['mask.p_m']}")
        if not 0.0 <= v["ema.m"] < 1.0:
            raise ConfigError(f"ema.m must lie in [0, 1), got {v['ema.m']}")
        if v["adam.lr"] <= 0:
            raise ConfigError(f"adam.lr must be positive, got {v['adam.lr']}")
        for key in ("B", "log_every", "eval.batches", "eval.episodes"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {v[key]}")
        if v["eval.episodes"] < 2:
            raise ConfigError("eval.episodes must be >= 2 (probe needs a fit and a score split)")
        if v["steps"] < 0 or v["eval_every"] < 0 or v["warmup"] < 0:
            raise ConfigError("steps, eval_every and warmup must be >= 0")
        if v["task"] not in ("none", "probe"):
            raise ConfigError(f"task must be 'none' or 'probe', got {v['task']!r}")
        self.env.validate(F)
        self.encoder.validate()
        self.decoder.validate()
        self.contrastive.validate()
        return self

    def to_text(self) -> str:
        lines = []
        for key in SCHEMA:
            val = self.values[key]
            if isinstance(val, list):
                val = ", ".join(str(x) for x in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def replace(self, **overrides) -> "TrainConfig":
        """Copy with dotted-key overrides; use ``_`` for ``.`` in keyword names (``mask_p_m``)."""
        vals = dict(self.values)
        for k, val in overrides.items():
            key = k if k in SCHEMA else k.replace("_", ".", 1)
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            vals[key] = val
        return TrainConfig(vals)


def default_config() -> TrainConfig:
    return TrainConfig({k: (list(d) if isinstance(d, list) else d) for k, (_, d, _) in SCHEMA.items()})


def parse_config(text: str, validate: bool = True) -> TrainConfig:
    cfg = default_config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            cfg.values[key] = parser(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return cfg.validate() if validate else cfg


def load_config(path: str | Path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
