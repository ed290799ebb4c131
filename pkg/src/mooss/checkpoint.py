"""Parameter files and run manifests.

A parameter file is an 8-byte little-endian header length, a UTF-8 JSON
header ``{"params": [{"name": ..., "shape": [...]}, ...]}``, then every
parameter's values as little-endian float64 in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from mooss.nn import Module


def save_params(path: str | Path, named: list[tuple[str, np.ndarray]]) -> None:
    header = {"params": [{"name": n, "shape": list(np.shape(a))} for n, a in named]}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in named:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    out: dict[str, np.ndarray] = {}
    pos = 8 + n
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape)
        out[entry["name"]] = arr.astype(np.float64)
        pos += 8 * count
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes after declared parameters")
    return out


def save_module(path: str | Path, module: Module) -> None:
    save_params(path, [(n, p.data) for n, p in module.named_parameters()])


def load_module(path: str | Path, module: Module) -> None:
    module.load_state_dict(load_params(path))


def write_manifest(out_dir: str | Path, files: dict[str, str], config_hash: str, config_text: str, step: int) -> Path:
    out_dir = Path(out_dir)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps({"components": files, "config_hash": config_hash, "step": step,
                                "config": config_text}, indent=2, sort_keys=True))
    return path


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
