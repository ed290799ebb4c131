"""Cube-partition graph over an observation sequence and random-walk masking."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from mooss.errors import ConfigError, UsageError


@dataclass(frozen=True)
class CubeShape:
    f: int
    h: int
    w: int

    def __post_init__(self):
        for axis in ("f", "h", "w"):
            if getattr(self, axis) < 1:
                raise ConfigError(f"cube.{axis} must be >= 1, got {getattr(self, axis)}")


@dataclass
class ObservationSequence:
    """F frames of shape (c, H, W) with aligned per-step actions and rewards."""

    frames: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray | None = None
    t0: int = 0
    latents: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.frames.ndim != 4:
            raise UsageError(f"frames must be (F, c, H, W), got {self.frames.shape}")
        if len(self.actions) != self.frames.shape[0]:
            raise UsageError(f"{len(self.actions)} actions for {self.frames.shape[0]} frames")
        if self.rewards is None:
            self.rewards = np.zeros(len(self.actions))

    @property
    def F(self) -> int:
        return self.frames.shape[0]


@dataclass
class StGraph:
    dims: tuple[int, int, int]
    adjacency: list[list[int]] = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def num_edges(self) -> int:
        return sum(len(n) for n in self.adjacency) // 2

    def node_id(self, t: int, r: int, c: int) -> int:
        _, nr, nc = self.dims
        return (t * nr + r) * nc + c

    def coords(self, node: int) -> tuple[int, int, int]:
        _, nr, nc = self.dims
        t, rem = divmod(node, nr * nc)
        r, c = divmod(rem, nc)
        return t, r, c


@dataclass(frozen=True)
class MaskSet:
    nodes: frozenset
    root: int | None
    ratio: float


def _grid_dims(F: int, H: int, W: int, cube: CubeShape) -> tuple[int, int, int]:
    for axis, size, part in (("F", F, cube.f), ("H", H, cube.h), ("W", W, cube.w)):
        if size % part:
            raise ConfigError(f"axis {axis}={size} is not divisible by cube size {part}")
    return F // cube.f, H // cube.h, W // cube.w


def build_graph(F: int, H: int, W: int, cube: CubeShape) -> StGraph:
    """Grid graph with one node per f*h*w cube and 6-connectivity between face neighbours."""
    nt, nr, nc = _grid_dims(F, H, W, cube)
    adjacency: list[list[int]] = []
    for t in range(nt):
        for r in range(nr):
            for c in range(nc):
                nbrs = []
                for dt, dr, dc in ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)):
                    tt, rr, cc = t + dt, r + dr, c + dc
                    if 0 <= tt < nt and 0 <= rr < nr and 0 <= cc < nc:
                        nbrs.append((tt * nr + rr) * nc + cc)
                adjacency.append(nbrs)
    return StGraph((nt, nr, nc), adjacency)


def target_size(num_nodes: int, p_m: float) -> int:
    # round half up; Python's round() is banker's rounding
    return int(math.floor(num_nodes * p_m + 0.5))


def random_walk_mask(graph: StGraph, p_m: float, rng: np.random.Generator) -> MaskSet:
    """Collect nodes visited by one random walk until round(|V| * p_m) are distinct."""
    if not 0.0 <= p_m <= 1.0:
        raise ConfigError(f"mask ratio p_m must lie in [0, 1], got {p_m}")
    n = graph.num_nodes
    k = target_size(n, p_m)
    if k == 0:
        return MaskSet(frozenset(), None, p_m)
    root = int(rng.integers(n))
    visited = {root}
    node = root
    cap = 10_000 * n
    steps = 0
    adj = graph.adjacency
    while len(visited) < k:
        nbrs = adj[node]
        if not nbrs:
            raise UsageError(f"random walk stuck at isolated node {node}; graph is not connected")
        node = nbrs[int(rng.integers(len(nbrs)))]
        visited.add(node)
        steps += 1
        if steps > cap:
            raise RuntimeError(f"random walk did not collect {k} of {n} nodes within {cap} steps")
    return MaskSet(frozenset(visited), root, p_m)


def is_connected(graph: StGraph, nodes) -> bool:
    """BFS over the subgraph induced by ``nodes``."""
    nodes = set(nodes)
    if not nodes:
        return True
    start = next(iter(nodes))
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in graph.adjacency[u]:
            if v in nodes and v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == len(nodes)


def mask_volume(shape: tuple[int, int, int], mask: MaskSet, cube: CubeShape) -> np.ndarray:
    """Boolean (F, H, W) array, True where a masked cube lies."""
    F, H, W = shape
    nt, nr, nc = _grid_dims(F, H, W, cube)
    grid = np.zeros(nt * nr * nc, dtype=bool)
    if mask.nodes:
        grid[np.fromiter(mask.nodes, dtype=np.int64)] = True
    grid = grid.reshape(nt, nr, nc)
    return grid.repeat(cube.f, 0).repeat(cube.h, 1).repeat(cube.w, 2)


def apply_mask(seq: ObservationSequence, mask: MaskSet, cube: CubeShape) -> ObservationSequence:
    """Return a copy of ``seq`` with every masked cube zeroed across all channels."""
    F, _, H, W = seq.frames.shape
    try:
        vol = mask_volume((F, H, W), mask, cube)
    except ConfigError as exc:
        raise UsageError(f"mask does not fit sequence of shape {seq.frames.shape}: {exc}") from None
    if mask.nodes and max(mask.nodes) >= vol.size // (cube.f * cube.h * cube.w):
        raise UsageError("mask references nodes outside the sequence graph")
    frames = np.where(vol[:, None, :, :], 0.0, seq.frames)
    return ObservationSequence(frames, seq.actions.copy(), seq.rewards.copy(), seq.t0,
                               None if seq.latents is None else seq.latents.copy())


def mask_frames(frames: np.ndarray, graph: StGraph, cube: CubeShape, p_m: float,
                rng: np.random.Generator) -> tuple[np.ndarray, list[MaskSet]]:
    """Mask a batch (B, F, c, H, W) with an independent walk per sequence."""
    B, F, _, H, W = frames.shape
    out = frames.copy()
    masks = []
    for b in range(B):
        m = random_walk_mask(graph, p_m, rng)
        masks.append(m)
        if m.nodes:
            vol = mask_volume((F, H, W), m, cube)
            out[b][np.broadcast_to(vol[:, None], out[b].shape)] = 0.0
    return out, masks
