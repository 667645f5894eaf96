"""Matplotlib rendering of experiment tables (Agg backend, files only)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_result"]

_XLABELS = {
    "sigma_deg": "angle spread (deg)",
    "max_angle_deg": "maximum TX angle (deg)",
    "mi_nats": "sum-MI (nats)",
    "config": "phase configuration",
}


def _series(rows):
    """Group series-table rows by series name into sorted ``(x, y, band)``."""
    out = defaultdict(list)
    for x_name, x, name, y, band, _status in rows:
        out[name].append((float(x), float(y), float(band)))
    return {k: np.array(sorted(v)) for k, v in out.items()}


def _plot_series(ax, table, x_name):
    ticks, colors = {}, {}
    series = _series(table.rows)
    for name, arr in series.items():
        if not name.startswith("monte carlo"):
            (line,) = ax.plot(arr[:, 0], arr[:, 1], "-" if len(arr) > 2 else "s", label=name)
            colors[name] = line.get_color()
            if x_name == "config":
                ticks[arr[0, 0]] = name
    for name, arr in series.items():
        if name.startswith("monte carlo"):
            # Monte Carlo points take the colour of their analytic series
            ax.errorbar(arr[:, 0], arr[:, 1], yerr=np.nan_to_num(arr[:, 2]), fmt="o", ms=3, capsize=2,
                        color=colors.get(name[len("monte carlo "):]), label=name)
    if ticks:
        ax.set_xticks(sorted(ticks), [ticks[k] for k in sorted(ticks)])
    ax.set_xlabel(_XLABELS.get(x_name, x_name))
    ax.grid(True, alpha=0.3)


def _plot_region(ax, result):
    rows = result.table("").rows
    groups = defaultdict(list)
    for r in rows:
        mu1, mu2, r1, r2, _s, optimized, ns, sigma = r
        groups[(optimized, ns, sigma)].append((r1, r2))
    for (optimized, ns, sigma), pts in sorted(groups.items()):
        pts = np.array(sorted(set(pts)))
        # close the region through the axes
        poly = np.vstack([[0.0, pts[0, 1]], pts, [pts[-1, 0], 0.0]])
        style = "-" if optimized else "--"
        ax.plot(poly[:, 0], poly[:, 1], style, label=f"{'optimized' if optimized else 'identity'} ns={ns} "
                                                     f"sigma={sigma:g}")
    ax.set_xlabel("R_1 (nats)")
    ax.set_ylabel("R_2 (nats)")
    ax.grid(True, alpha=0.3)


def _plot_cdf(ax, table):
    for name, arr in _series(table.rows).items():
        style = "o" if name.startswith("empirical") else "-"
        ax.semilogy(arr[:, 0], np.clip(arr[:, 1], 1e-5, 1.0), style, ms=3, label=name)
    ax.set_xlabel(_XLABELS["mi_nats"])
    ax.set_ylabel("CDF")
    ax.set_ylim(1e-3, 1.0)
    ax.grid(True, which="both", alpha=0.3)


def plot_result(result, path) -> Path:
    """Write a figure for ``result`` to ``path`` (format from the suffix)."""
    fig, ax = plt.subplots(figsize=(7.0, 4.8))
    try:
        if result.experiment == "fig4":
            _plot_region(ax, result)
        elif result.experiment == "fig5":
            _plot_cdf(ax, result.table(""))
        else:
            table = result.table("")
            _plot_series(ax, table, table.rows[0][0] if table.rows else "")
            ax.set_ylabel("sum-MI (nats)")
        ax.set_title(result.experiment)
        ax.legend(fontsize=6, ncol=2)
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=120)
    finally:
        plt.close(fig)
    return path
