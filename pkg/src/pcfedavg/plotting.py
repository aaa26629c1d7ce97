"""PNG rendering of the tidy figure CSVs written by ``emit_plot_data``.

Each method is drawn as its mean over seeds with a min/max band.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

YLABELS = {
    "infeasibility": r"$\max_i\ \mathrm{dist}(\bar{x}^{(i)}, X_i)$",
    "global_loss": "global loss",
    "local_steps": "global loss",
}
LOG_Y = {"infeasibility": True}


def read_series(path) -> dict:
    """``{method: (rounds, values[seed, round])}`` from a tidy figure CSV."""
    raw = defaultdict(lambda: defaultdict(dict))
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            raw[row["method"]][row["seed"]][int(row["round"])] = float(row["value"])
    out = {}
    for method, by_seed in raw.items():
        rounds = sorted(set().union(*(d.keys() for d in by_seed.values())))
        vals = np.array([[d.get(r, np.nan) for r in rounds] for d in by_seed.values()])
        out[method] = (np.array(rounds), vals)
    return out


def render_figure(csv_path, png_path=None, title: str | None = None) -> Path:
    csv_path = Path(csv_path)
    png_path = Path(png_path) if png_path else csv_path.with_suffix(".png")
    name = csv_path.stem
    fig, ax = plt.subplots(figsize=(5.0, 3.5), dpi=120)
    for method, (rounds, vals) in read_series(csv_path).items():
        mean = np.nanmean(vals, axis=0)
        line, = ax.plot(rounds, mean, label=method, lw=1.4)
        if vals.shape[0] > 1:
            ax.fill_between(rounds, np.nanmin(vals, axis=0), np.nanmax(vals, axis=0), color=line.get_color(),
                            alpha=0.2, lw=0)
    if LOG_Y.get(name):
        ax.set_yscale("symlog", linthresh=1e-6)
    ax.set_xlabel("round")
    ax.set_ylabel(YLABELS.get(name, "value"))
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path)
    plt.close(fig)
    return png_path


def render_figures(csv_paths) -> list[Path]:
    return [render_figure(p) for p in csv_paths]
