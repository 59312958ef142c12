"""Report figures written next to the CSV and PGM outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def loss_curve(path, steps, losses, steps_per_epoch: int | None = None):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.6, alpha=0.5, label="batch")
    if steps_per_epoch and len(losses) >= steps_per_epoch:
        n = len(losses) // steps_per_epoch
        per_epoch = np.asarray(losses[: n * steps_per_epoch]).reshape(n, -1).mean(axis=1)
        ax.plot(np.asarray(steps[: n * steps_per_epoch]).reshape(n, -1)[:, -1], per_epoch, "o-", label="epoch mean")
    ax.set_xlabel("step")
    ax.set_ylabel("negative ELBO (nats)")
    ax.legend()
    _save(fig, path)


def acceptance_bars(path, labels, rates):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(range(len(rates)), rates, color="0.4")
    ax.set_xticks(range(len(rates)), labels)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("section time")
    ax.set_ylabel("acceptance rate")
    for i, r in enumerate(rates):
        ax.text(i, r + 0.02, f"{r:.3f}", ha="center", fontsize=8)
    _save(fig, path)


def image(path, img, title: str = ""):
    h, w = img.shape
    fig, ax = plt.subplots(figsize=(max(2.0, w / 40), max(2.0, h / 40) + (0.3 if title else 0)))
    ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    _save(fig, path)


def speed_histogram(path, positive, negative, slope: float):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    top = max(2.0 * slope, max(positive, default=0.0)) or 1.0
    bins = np.linspace(0, top, 50)
    ax.hist(np.minimum(positive, top), bins=bins, alpha=0.6, label="consecutive frames")
    if len(negative):
        # counter-examples beyond the plotted range pile up in the last bin
        ax.hist(np.minimum(negative, top), bins=bins, alpha=0.6, label="counter-examples")
    ax.axvline(slope, color="k", ls="--", label=f"slope {slope:.4g}")
    ax.set_xlabel("spatial speed per unit time")
    ax.legend()
    _save(fig, path)
