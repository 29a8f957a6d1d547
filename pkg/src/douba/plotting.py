"""Matplotlib figures written next to the CSV outputs of each command."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 3.6),
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# no dates or version strings, so reruns write identical files
_METADATA = {"png": {"Software": None}, "svg": {"Date": None, "Creator": None}}


def save(fig, path, formats=("png",)) -> list:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = []
    for ext in formats:
        target = path.with_suffix("." + ext)
        fig.savefig(target, bbox_inches="tight", metadata=_METADATA.get(ext))
        out.append(target)
    plt.close(fig)
    return out


def _density(m):
    """Cell densities of a 1D grid measure, or raw weights otherwise."""
    x = m.points[:, 0]
    if m.grid is not None:
        return x, m.weights / m.grid.cell_volume
    return x, m.weights


def plot_barycenter_1d(path, marginals, barycenter, reference=None, title=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, nu in enumerate(marginals):
            x, y = _density(nu)
            if nu.grid is not None:
                ax.plot(x, y, color="0.6", lw=0.8, label="marginals" if k == 0 else None)
            else:
                ax.vlines(x, 0, y, color="0.6", lw=0.8, label="marginals" if k == 0 else None)
        if reference is not None:
            x, y = _density(reference)
            ax.plot(x, y, color="tab:blue", lw=1.0, ls="--", label="unregularized")
        x, y = _density(barycenter)
        ax.plot(x, y, color="tab:red", lw=1.4, label="barycenter")
        ax.set_xlabel("x")
        ax.set_ylabel("density")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return save(fig, path)


def plot_barycenter_2d(path, barycenter, marginals=()):
    g = barycenter.grid
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        img = (barycenter.weights / g.cell_volume).reshape(g.cells_per_axis)
        ax.imshow(
            img.T,
            origin="lower",
            extent=(g.domain.lo[0], g.domain.hi[0], g.domain.lo[1], g.domain.hi[1]),
            cmap="magma",
            aspect="auto",
        )
        for nu in marginals:
            ax.scatter(nu.points[:, 0], nu.points[:, 1], s=12, c="w", marker="x")
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        return save(fig, path)


def plot_trace(path, iters, values, ylabel, logy=True):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        values = np.asarray(values, dtype=float)
        if logy and np.all(values[np.isfinite(values)] > 0):
            ax.semilogy(iters, values, lw=1.0)
        else:
            ax.plot(iters, values, lw=1.0)
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        return save(fig, path)


def plot_cloud(path, positions, marginals=(), init=None, title=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if init is not None:
            ax.scatter(init[:, 0], init[:, 1], s=6, c="0.75", label="initial")
        ax.scatter(positions[:, 0], positions[:, 1], s=6, c="tab:red", label="particles")
        for k, nu in enumerate(marginals):
            ax.scatter(nu.points[:, 0], nu.points[:, 1], s=40, marker="s", facecolors="none", edgecolors="k",
                       label="marginal atoms" if k == 0 else None)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, loc="upper right")
        return save(fig, path)


def plot_rate(path, ns, mean_kl, slope, intercept):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ns = np.asarray(ns, dtype=float)
        ax.loglog(ns, mean_kl, "o", color="tab:red", label="mean KL")
        ax.loglog(ns, np.exp(intercept) * ns**slope, color="0.3", lw=1.0, label=f"fit, slope {slope:.2f}")
        ax.loglog(ns, mean_kl[0] * (ns / ns[0]) ** -0.5, color="tab:blue", ls=":", lw=1.0, label="n^-1/2")
        ax.set_xlabel("samples per marginal n")
        ax.set_ylabel("H(empirical | population)")
        ax.legend(frameon=False)
        return save(fig, path)


def plot_heatmap(path, lambdas, taus, dist, curve=None):
    """``dist[i, j]`` is the distance at ``(lambdas[i], taus[j])``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        mesh = ax.pcolormesh(lambdas, taus, np.asarray(dist).T, shading="nearest", cmap="viridis")
        fig.colorbar(mesh, ax=ax, label="W2 / sqrt(d) to unregularized")
        if curve is not None:
            ax.plot(curve[:, 0], curve[:, 1], color="w", lw=1.4, label="tau*(lambda)")
            ax.legend(frameon=False, loc="upper left", labelcolor="w")
        ax.set_xlabel("lambda")
        ax.set_ylabel("tau")
        ax.set_xlim(min(lambdas), max(lambdas))
        ax.set_ylim(min(taus), max(taus))
        return save(fig, path, formats=("png", "svg"))


def plot_stability(path, deltas, kl, bound):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(deltas, bound, "s-", color="0.3", label="bound")
        ax.plot(deltas, kl, "o-", color="tab:red", label="observed KL")
        ax.set_yscale("symlog", linthresh=1e-8)
        ax.set_xlabel("displacement delta")
        ax.set_ylabel("relative entropy")
        ax.legend(frameon=False)
        return save(fig, path)


def plot_plan(path, plan, x, y):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.imshow(plan, origin="lower", aspect="auto", cmap="Greys",
                  extent=(y.min(), y.max(), x.min(), x.max()))
        ax.set_xlabel("y")
        ax.set_ylabel("x")
        return save(fig, path)
