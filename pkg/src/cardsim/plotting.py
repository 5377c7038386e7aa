"""PNG figures written next to the CSV outputs."""
from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.2),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
}

MARKERS = "os^Dv<>px*"


def _groups(rows, key):
    out = defaultdict(list)
    for r in rows:
        out[key(r)].append(r)
    return out


def plot_curves(rows, path, normalized=True):
    """Mean response time against load, one line per policy and one panel per distribution."""
    col = "normalized_mean_T" if normalized else "mean_T"
    err = "normalized_ci" if normalized else "ci_half"
    by_dist = _groups([r for r in rows if not _nan(r.get(col))], lambda r: r["dist"])
    if not by_dist:
        return None
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(by_dist), squeeze=False,
                                 figsize=(4.2 * len(by_dist), 3.8))
        for ax, (dist, drows) in zip(axes[0], by_dist.items()):
            for k, (policy, prows) in enumerate(_groups(drows, lambda r: r["policy"]).items()):
                prows = sorted(prows, key=lambda r: r["rho"])
                yerr = [0.0 if _nan(r.get(err)) else r[err] for r in prows]
                ax.errorbar([r["rho"] for r in prows], [r[col] for r in prows], yerr=yerr,
                            marker=MARKERS[k % len(MARKERS)], ms=4, capsize=2, label=policy)
            ax.set_yscale("log")
            ax.set_xlabel("load")
            ax.set_ylabel("mean response / M/G/1 work" if normalized else "mean response time")
            ax.set_title(f"n={drows[0]['n']}, {dist}")
            ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_tails(rows, path):
    """Complementary CDF of response time, one panel per (distribution, load)."""
    panels = _groups(rows, lambda r: (r["dist"], r["rho"]))
    if not panels:
        return None
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), squeeze=False, figsize=(4.2 * len(panels), 3.8))
        for ax, ((dist, rho), prow) in zip(axes[0], panels.items()):
            for policy, trows in _groups(prow, lambda r: r["policy"]).items():
                ax.plot([r["t"] for r in trows], [max(r["ccdf"], 1e-12) for r in trows], label=policy)
            ax.set_yscale("log")
            ax.set_xlabel("t")
            ax.set_ylabel("P{T > t}")
            ax.set_title(f"{dist}, load {rho:g}")
            ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def _nan(v):
    return v is None or v == "" or (isinstance(v, float) and math.isnan(v))
