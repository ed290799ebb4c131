"""Command-line entry point.

Every subcommand prints tab-delimited ``key<TAB>value`` lines (or CSV for
tables) on stdout. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from mooss.checkpoint import read_manifest
from mooss.config import load_config, parse_config
from mooss.errors import ConfigError, MoossError, UsageError

log = logging.getLogger("mooss")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(out, key: str, value) -> None:
    if isinstance(value, float):
        value = f"{value:.6g}"
    print(f"{key}\t{value}", file=out)


def _emit_smoothness(out, rep, probe: float) -> None:
    for l, v in enumerate(rep.sim_by_delta):
        _emit(out, f"sim_d{l}", float(v))
    _emit(out, "sim_cross", float(rep.sim_cross))
    _emit(out, "rho", rep.rho)
    _emit(out, "rho_defined", int(rep.rho_defined))
    _emit(out, "pair_rho", rep.pair_rho)
    _emit(out, "strictly_ordered", int(rep.strictly_ordered()))
    _emit(out, "probe_mse", probe)


def _manifest_path(path: str) -> Path:
    p = Path(path)
    return p / "manifest.json" if p.is_dir() else p


# ---------------------------------------------------------------- subcommands

def cmd_train(args, out) -> int:
    from mooss.plotting import write_report_figures
    from mooss.train import run_training

    cfg = load_config(args.config)
    out_dir = Path(args.out or cfg["output_dir"])
    res = run_training(cfg, out_dir, progress=not args.quiet)
    figures = write_report_figures(res, out_dir)
    _emit(out, "steps", res.trainer.step)
    _emit(out, "config_hash", cfg.hash())
    _emit(out, "metrics", out_dir / "metrics.csv")
    _emit(out, "checkpoint", res.trainer.last_checkpoint)
    for f in figures:
        _emit(out, "figure", f)
    _emit(out, "initial_rho", res.initial[0].rho)
    _emit(out, "initial_probe_mse", res.initial[1])
    _emit_smoothness(out, *res.final)
    return 0


def _trainer_from_checkpoint(checkpoint: str, config: str | None):
    from mooss.train import Trainer

    manifest = _manifest_path(checkpoint)
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    man = read_manifest(manifest)
    cfg = load_config(config) if config else parse_config(man["config"])
    if cfg.hash() != man["config_hash"]:
        log.warning("config hash %s differs from checkpoint %s", cfg.hash(), man["config_hash"])
    trainer = Trainer(cfg)
    trainer.load(manifest)
    return trainer


def cmd_eval(args, out) -> int:
    trainer = _trainer_from_checkpoint(args.checkpoint, args.config)
    _emit(out, "step", trainer.step)
    _emit_smoothness(out, *trainer.evaluate())
    return 0


def cmd_dump_embeddings(args, out) -> int:
    from mooss.train import embed

    trainer = _trainer_from_checkpoint(args.checkpoint, args.config)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = trainer.cfg["encoder.d"]
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["b", "i"] + [f"e{k}" for k in range(d)])
        for b, ep in enumerate(trainer.holdout.episodes):
            z = embed(trainer.pair.query, ep.frames[None])[0]
            for i, row in enumerate(z):
                w.writerow([b, i] + [repr(float(v)) for v in row])
                rows += 1
    _emit(out, "rows", rows)
    _emit(out, "out", path)
    return 0


def cmd_mask_demo(args, out) -> int:
    from mooss.env import generate_episode, write_frames
    from mooss.masking import build_graph, mask_frames

    cfg = load_config(args.config)
    rng = np.random.default_rng(args.seed)
    F = cfg["F"]
    env = cfg.env
    ep = generate_episode(env, rng)
    frames = ep.frames[None, :F]
    graph = build_graph(F, env.H, env.W, cfg.cube)
    masked, masks = mask_frames(frames, graph, cfg.cube, cfg["mask.p_m"], rng)
    paths = write_frames(args.out, masked[0])
    _emit(out, "frames", len(paths))
    _emit(out, "nodes", graph.num_nodes)
    _emit(out, "masked_nodes", len(masks[0].nodes))
    _emit(out, "out", Path(args.out))
    return 0


def cmd_gradcheck(args, out) -> int:
    from mooss.gradcheck import check_pipeline

    rep = check_pipeline(full=args.full, seed=args.seed)
    for name, err in rep.errors.items():
        _emit(out, name, err)
    _emit(out, "max_rel_error", rep.max_error)
    _emit(out, "ok", int(rep.ok))
    if not rep.ok:
        print(f"gradient check failed for: {', '.join(rep.failures())}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mooss", description="Multi-level temporal contrastive state learning on a toy environment.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run training; writes metrics.csv, checkpoint/ and figures")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="override output_dir")
    t.add_argument("--quiet", action="store_true", help="no progress logging")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("mask-demo", help="write one masked sequence as PGM frames")
    m.add_argument("--config", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mask_demo)

    g = sub.add_parser("gradcheck", help="finite-difference check of the tiny pipeline")
    g.add_argument("--full", action="store_true", help="probe every coordinate instead of a sample")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="held-out similarity buckets and probe MSE of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="defaults to the config stored in the manifest")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-embeddings", help="CSV of held-out embeddings (b, i, e0..)")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--config", help="defaults to the config stored in the manifest")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_embeddings)
    return p


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args, out)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MoossError, OSError, ValueError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
