"""Moving-dot pixel POMDP and an episode replay buffer."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mooss.errors import ConfigError, UsageError
from mooss.masking import ObservationSequence

# none, +x, -x, +y, -y
ACTION_DIRS = np.array([[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1]], dtype=np.float64)
NUM_ACTIONS = len(ACTION_DIRS)


@dataclass(frozen=True)
class LatentState:
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy])


@dataclass
class EnvConfig:
    H: int = 28
    W: int = 28
    c: int = 1
    dt: float = 0.05
    accel: float = 0.25
    v_max: float = 1.0
    radius: float = 3.0
    T: int = 64
    episodes: int = 64
    seed: int = 0

    def validate(self, F: int | None = None) -> None:
        if self.H < 1 or self.W < 1 or self.c < 1:
            raise ConfigError("env.H, env.W and env.c must be >= 1")
        if self.radius < 1:
            raise ConfigError(f"env.radius must be >= 1 pixel, got {self.radius}")
        if self.T < 1 or self.episodes < 1:
            raise ConfigError("env.T and env.episodes must be >= 1")
        if F is not None and self.T < F:
            raise ConfigError(f"env.T={self.T} is shorter than the sequence length F={F}")
        if self.dt <= 0 or self.v_max <= 0 or self.accel < 0:
            raise ConfigError("env.dt and env.v_max must be positive and env.accel non-negative")


def _reflect(p: float, v: float) -> tuple[float, float]:
    # a single bounce suffices while v_max * dt < 1
    if p > 1.0:
        return 2.0 - p, -v
    if p < 0.0:
        return -p, -v
    return p, v


def step(state: LatentState, action: int, cfg: EnvConfig) -> LatentState:
    """Accelerate along the action direction, clamp speed, integrate with elastic walls."""
    if not (isinstance(action, (int, np.integer)) and 0 <= action < NUM_ACTIONS):
        raise UsageError(f"invalid action id {action!r}; expected 0..{NUM_ACTIONS - 1}")
    ax, ay = ACTION_DIRS[action] * cfg.accel
    vx = float(np.clip(state.vx + ax, -cfg.v_max, cfg.v_max))
    vy = float(np.clip(state.vy + ay, -cfg.v_max, cfg.v_max))
    x, vx = _reflect(state.x + vx * cfg.dt, vx)
    y, vy = _reflect(state.y + vy * cfg.dt, vy)
    return LatentState(x, y, vx, vy)


def render(state: LatentState, cfg: EnvConfig) -> np.ndarray:
    """Anti-aliased disc centred at (x * W, y * H) in pixel-index coordinates."""
    rows = np.arange(cfg.H, dtype=np.float64)[:, None]
    cols = np.arange(cfg.W, dtype=np.float64)[None, :]
    dist = np.hypot(rows - state.y * cfg.H, cols - state.x * cfg.W)
    img = np.clip(cfg.radius + 0.5 - dist, 0.0, 1.0)
    return np.repeat(img[None], cfg.c, axis=0)


@dataclass
class Episode:
    frames: np.ndarray  # (T, c, H, W)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    latents: np.ndarray  # (T, 4)


def generate_episode(cfg: EnvConfig, rng: np.random.Generator) -> Episode:
    """Random-policy rollout. actions[t] is taken after observing frames[t]."""
    s = LatentState(float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)),
                    float(rng.uniform(-0.5, 0.5) * cfg.v_max), float(rng.uniform(-0.5, 0.5) * cfg.v_max))
    frames = np.empty((cfg.T, cfg.c, cfg.H, cfg.W))
    latents = np.empty((cfg.T, 4))
    actions = rng.integers(NUM_ACTIONS, size=cfg.T)
    for t in range(cfg.T):
        frames[t] = render(s, cfg)
        latents[t] = s.as_array()
        s = step(s, int(actions[t]), cfg)
    return Episode(frames, actions.astype(np.int64), np.zeros(cfg.T), latents)


@dataclass
class ReplayBuffer:
    capacity: int = 1000
    episodes: list[Episode] = field(default_factory=list)

    def add(self, ep: Episode) -> None:
        self.episodes.append(ep)
        if len(self.episodes) > self.capacity:
            self.episodes.pop(0)

    def __len__(self) -> int:
        return len(self.episodes)


def fill_buffer(cfg: EnvConfig, n_episodes: int, rng: np.random.Generator) -> ReplayBuffer:
    buf = ReplayBuffer(capacity=max(n_episodes, 1))
    for _ in range(n_episodes):
        buf.add(generate_episode(cfg, rng))
    return buf


def sample_windows(buffer: ReplayBuffer, B: int, F: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """B uniformly drawn (episode, start) pairs; windows never cross episode ends."""
    if not buffer.episodes:
        raise UsageError("cannot sample from an empty replay buffer")
    valid = [k for k, ep in enumerate(buffer.episodes) if len(ep.actions) >= F]
    if not valid:
        raise UsageError(f"no episode in the buffer is at least F={F} steps long")
    out = []
    for _ in range(B):
        k = valid[int(rng.integers(len(valid)))]
        start = int(rng.integers(len(buffer.episodes[k].actions) - F + 1))
        out.append((k, start))
    return out


def sample_batch(buffer: ReplayBuffer, B: int, F: int, rng: np.random.Generator) -> list[ObservationSequence]:
    seqs = []
    for k, s in sample_windows(buffer, B, F, rng):
        ep = buffer.episodes[k]
        seqs.append(ObservationSequence(ep.frames[s:s + F], ep.actions[s:s + F], ep.rewards[s:s + F],
                                        t0=s, latents=ep.latents[s:s + F]))
    return seqs


def stack_batch(seqs: list[ObservationSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """(B, F, c, H, W) frames, (B, F) actions and (B, F, 4) latents if present."""
    frames = np.stack([s.frames for s in seqs])
    actions = np.stack([s.actions for s in seqs])
    latents = None if any(s.latents is None for s in seqs) else np.stack([s.latents for s in seqs])
    return frames, actions, latents


# ---------------------------------------------------------------- file formats

def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a 2-D array in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise UsageError(f"PGM needs a 2-D image, got shape {img.shape}")
    px = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Inverse of ``write_pgm``; returns values in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise UsageError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / maxval


def write_frames(out_dir: str | Path, frames: np.ndarray) -> list[Path]:
    """One PGM per frame, first channel only, named frame_000.pgm, frame_001.pgm, ..."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(frames):
        p = out_dir / f"frame_{t:03}.pgm"
        write_pgm(p, frame[0])
        paths.append(p)
    return paths


def dump_episode(out_dir: str | Path, ep: Episode) -> None:
    """PGM frames plus trajectory.csv (step, action, x, y, vx, vy)."""
    out_dir = Path(out_dir)
    write_frames(out_dir, ep.frames)
    with open(out_dir / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "action", "x", "y", "vx", "vy"])
        for t, (a, lat) in enumerate(zip(ep.actions, ep.latents)):
            w.writerow([t, int(a), *(repr(float(v)) for v in lat)])
