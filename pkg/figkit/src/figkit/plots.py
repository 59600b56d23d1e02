"""Publication-style figures from metrics CSVs and field payloads.

All styling is fixed so identical inputs produce identical images.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .payload import CsvError, FieldPayload, read_metrics_csv, read_payload

METRICS = ("E1", "E2", "E3", "E4")
FIELD_STYLE = {
    "rho": dict(color="#1f77b4", marker="o", label="density"),
    "m": dict(color="#d62728", marker="s", label="momentum"),
    "u": dict(color="#2ca02c", marker="^", label="velocity"),
}
_SAVE = dict(dpi=150, metadata={"Software": "figkit"})


def plot_errors(csv_path: str | Path, out_path: str | Path) -> Path:
    """Four log-log panels (E1..E4) with the N^{-1/2} reference slope."""
    rows = read_metrics_csv(csv_path)
    fig, axes = plt.subplots(2, 2, figsize=(9.6, 7.2))
    for ax, metric in zip(axes.ravel(), METRICS):
        series = {}
        for field in FIELD_STYLE:
            pts = sorted((r["N"], r["value"]) for r in rows
                         if r["metric"] == metric and r["field"] == field)
            if pts:
                series[field] = (np.array([p[0] for p in pts]),
                                 np.array([p[1] for p in pts]))
        if not series:
            raise CsvError(f"no rows for metric {metric}")
        for field, (sizes, values) in series.items():
            ax.loglog(sizes, values, **FIELD_STYLE[field], linewidth=1.2, markersize=5)
        # reference slope anchored at the geometric mean of the first points
        all_sizes = np.unique(np.concatenate([s for s, _ in series.values()]))
        first_vals = [v[0] for _, v in series.values()]
        anchor = float(np.exp(np.mean(np.log(first_vals))))
        guide = anchor * (all_sizes / all_sizes[0]) ** -0.5
        ax.loglog(all_sizes, guide, "k-", linewidth=1.0)
        ax.set_title(metric)
        ax.set_xlabel("N")
        ax.grid(True, which="both", alpha=0.25)
    axes[0, 0].legend(fontsize=9)
    fig.suptitle("statistical errors vs ensemble size (solid line: slope -1/2)")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, **_SAVE)
    plt.close(fig)
    return out_path


def plot_heatmap(payload_path: str | Path, out_path: str | Path) -> Path:
    """One panel per payload component over the torus [-1, 1]^2."""
    payload = read_payload(payload_path)
    grids = payload.grids()
    ncomp = len(grids)
    fig, axes = plt.subplots(1, ncomp, figsize=(4.2 * ncomp, 3.8), squeeze=False)
    for c, (ax, grid) in enumerate(zip(axes[0], grids)):
        im = ax.imshow(grid.T, origin="lower", extent=(-1, 1, -1, 1),
                       cmap="viridis", interpolation="nearest")
        ax.set_title(_component_name(payload, c))
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, **_SAVE)
    plt.close(fig)
    return out_path


def diagonal_slice(payload: FieldPayload) -> tuple[np.ndarray, np.ndarray]:
    """Values along the cells nearest the line x1 = x2, ordered by x1.

    On the uniform square grid these are exactly the cells (i, i); the
    returned abscissa holds their centre coordinates.
    """
    grids = payload.grids()
    n = payload.n
    x = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
    values = np.stack([g[np.arange(n), np.arange(n)] for g in grids], axis=-1)
    return x, values


def plot_diagonal(payload_path: str | Path, out_path: str | Path) -> Path:
    payload = read_payload(payload_path)
    x, values = diagonal_slice(payload)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for c in range(values.shape[1]):
        ax.plot(x, values[:, c], marker=".", linewidth=1.2,
                label=_component_name(payload, c))
    ax.set_xlabel("x along the diagonal x1 = x2")
    ax.grid(True, alpha=0.25)
    ax.legend(fontsize=9)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, **_SAVE)
    plt.close(fig)
    return out_path


def _component_name(payload: FieldPayload, c: int) -> str:
    if payload.components == 1:
        return "value"
    if payload.components == payload.d:
        return f"component {c + 1}"
    if payload.components == payload.d + 1:
        return "density" if c == 0 else f"momentum {c}"
    return f"component {c + 1}"
