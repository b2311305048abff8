"""Report figures rendered to files next to the CSV products (headless backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_grad_profiles(bundle, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    delays = sorted({T for _, T in bundle.traces})
    cmap = plt.get_cmap("viridis")
    for (tag, T), tr in sorted(bundle.traces.items()):
        color = cmap(delays.index(T) / max(1, len(delays) - 1))
        style = "-" if bundle.gate_tags.get(tag, "dense") != "dense" else "--"
        norms = np.where(tr[:, 1] > 0, tr[:, 1], np.nan)
        ax.semilogy(tr[:, 0], norms, style, color=color, label=f"{tag} T={T}")
    ax.set_xlabel("tau")
    ax.set_ylabel("||dL/dh_tau||")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_depth_fit(fit, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    xs, ys = fit.samples[:, 0], fit.samples[:, 1]
    ax.plot(xs, ys, "o", ms=4)
    grid = np.linspace(0, xs.max(), 50)
    ax.plot(grid, fit.slope * grid + fit.intercept, "-",
            label=f"slope {fit.slope:.4f}, R2 {fit.r2:.3f}")
    ax.set_xlabel("updates taken (p T)")
    ax.set_ylabel("log ||dh_T / dh_0||")
    ax.legend()
    return _save(fig, path)


def plot_metrics(rows, path, key="eval_loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in rows]
    ax.plot(steps, [r[key] for r in rows])
    ax.set_xlabel("step")
    ax.set_ylabel(key)
    return _save(fig, path)


def plot_pca(pca, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    proj = pca.projected
    T = proj.shape[1]
    for b in range(proj.shape[0]):
        ax.scatter(proj[b, :, 0], proj[b, :, 1] if proj.shape[2] > 1 else np.zeros(T),
                   c=np.linspace(0, 1, T), s=3, cmap="viridis")
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    return _save(fig, path)


def plot_maps(maps, path) -> Path:
    fig, axes = plt.subplots(len(maps), 2, figsize=(6, 3 * len(maps)), squeeze=False)
    for l, m in enumerate(maps):
        axes[l, 0].imshow(m["gate"], cmap="Greys", vmin=0, vmax=1)
        axes[l, 0].set_title(f"layer {l} gate activity")
        lim = np.abs(m["increment"]).max() or 1.0
        axes[l, 1].imshow(m["increment"], cmap="RdBu_r", vmin=-lim, vmax=lim)
        axes[l, 1].set_title(f"layer {l} mean increment")
    return _save(fig, path)


def plot_bench(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode in ("dense", "sparse"):
        sel = [r for r in rows if r["mode"] == mode and r["head"] == "total"]
        sel.sort(key=lambda r: r["sparsity"])
        ax.errorbar([r["sparsity"] for r in sel], [r["median_us"] for r in sel],
                    yerr=[r["iqr_us"] / 2 for r in sel], marker="o", label=mode)
    ax.set_xlabel("sparsity")
    ax.set_ylabel("us / step")
    ax.legend()
    return _save(fig, path)
