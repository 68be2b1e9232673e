"""Matplotlib figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .mesh import SurfaceMesh  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_series(rows: list[dict], path, title: str = "") -> Path:
    """Extrema of ``u`` and ``v`` and the bulk value ``w`` over time."""
    t = np.array([float(r["t"]) for r in rows])
    col = {k: np.array([float(r[k]) for r in rows]) for k in ("u_min", "u_max", "v_min", "v_max", "w")}
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        for ax, name in zip(axes[:2], ("u", "v")):
            ax.semilogy(t, col[f"{name}_max"], label=f"max {name}")
            ax.semilogy(t, col[f"{name}_min"], label=f"min {name}")
            ax.set_xlabel("t")
            ax.legend()
        axes[2].plot(t, col["w"])
        axes[2].set_xlabel("t")
        axes[2].set_ylabel("w")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_convergence(h, errors, order: float, path, xlabel: str = "dt", title: str = "") -> Path:
    h = np.asarray(h, dtype=float)
    errors = np.asarray(errors, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3.2))
        ax.loglog(h, errors, "o-", label=f"observed, slope {order:.2f}")
        for p, ls in ((1, ":"), (2, "--")):
            ax.loglog(h, errors[-1] * (h / h[-1]) ** p, ls, color="grey", label=f"order {p}")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("error")
        ax.legend()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_sphere_field(mesh: SurfaceMesh, values, path, title: str = "", spikes=None) -> Path:
    """Two hemispheres in equal-area azimuthal projection, coloured by ``values``."""
    x = mesh.vertices
    values = np.asarray(values, dtype=float)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8, 4))
        lo, hi = float(values.min()), float(values.max())
        for ax, sign, label in zip(axes, (1, -1), ("z > 0", "z < 0")):
            keep = np.all(sign * x[mesh.triangles, 2] >= -1e-12, axis=1)
            r = np.sqrt(2.0 / (1.0 + sign * x[:, 2] + 1e-15))
            px, py = x[:, 0] * r, sign * x[:, 1] * r
            tpc = ax.tripcolor(px, py, mesh.triangles[keep], values, shading="gouraud", vmin=lo, vmax=hi)
            if spikes is not None:
                sel = [i for i in spikes if sign * x[i, 2] >= 0]
                ax.plot(px[sel], py[sel], "w+", ms=10)
            ax.set_aspect("equal")
            ax.set_title(label)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.grid(False)
        fig.colorbar(tpc, ax=axes, shrink=0.8)
        if title:
            fig.suptitle(title)
        return _save(fig, path)
