"""Report figures rendered to PNG files next to the metrics CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from mooss.train import MetricsRow, SmoothnessReport  # noqa: E402


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_losses(rows: list[MetricsRow], path: str | Path) -> Path:
    """Total loss and each level's loss against the optimisation step."""
    fig, (ax_tot, ax_lvl) = plt.subplots(1, 2, figsize=(10, 3.5))
    steps = [r.step for r in rows]
    ax_tot.plot(steps, [r.total_loss for r in rows], color="k", lw=1)
    ax_tot.set_xlabel("step")
    ax_tot.set_ylabel("total loss")
    if rows:
        for l in range(len(rows[0].level_losses)):
            ax_lvl.plot(steps, [r.level_losses[l] for r in rows], lw=1, label=f"level {l}")
        ax_lvl.legend(fontsize=7, ncol=2)
    ax_lvl.set_xlabel("step")
    ax_lvl.set_ylabel("level loss")
    return _save(fig, Path(path))


def plot_similarity(reports: dict[str, SmoothnessReport], path: str | Path) -> Path:
    """Held-out mean similarity per temporal distance; the last tick is the cross-sequence bucket."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, rep in reports.items():
        ys = list(rep.sim_by_delta) + [rep.sim_cross]
        ax.plot(range(len(ys)), ys, marker="o", lw=1, label=f"{label} (rho {rep.rho:.2f})")
    if reports:
        n = len(next(iter(reports.values())).sim_by_delta)
        ax.set_xticks(range(n + 1))
        ax.set_xticklabels([str(d) for d in range(n)] + ["cross"])
    ax.set_xlabel("temporal distance")
    ax.set_ylabel("mean similarity")
    ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_probe(evals: list[tuple[int, SmoothnessReport, float]], path: str | Path) -> Path:
    """Linear-probe MSE at every evaluation step."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([e[0] for e in evals], [e[2] for e in evals], marker="o", lw=1, color="C3")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("probe MSE on (x, y)")
    return _save(fig, Path(path))


def write_report_figures(result, out_dir: str | Path) -> list[Path]:
    """All report figures for a finished ``RunResult``."""
    out_dir = Path(out_dir)
    return [
        plot_losses(result.rows, out_dir / "losses.png"),
        plot_similarity({"initial": result.initial[0], "final": result.final[0]}, out_dir / "similarity.png"),
        plot_probe(result.evals, out_dir / "probe.png"),
    ]
