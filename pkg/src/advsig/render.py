"""PNG figures for confusion matrices, accuracy comparisons, saliency profiles and heat maps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .attacks import AttackKind  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def confusion_figure(counts: np.ndarray, path, title: str = "") -> Path:
    counts = np.asarray(counts)
    labels = [AttackKind(k).label for k in range(len(counts))]
    rows = counts.sum(1, keepdims=True)
    frac = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    for i in range(len(counts)):
        for j in range(len(counts)):
            ax.text(j, i, f"{100 * frac[i, j]:.1f}", ha="center", va="center", fontsize=7,
                    color="white" if frac[i, j] > 0.5 else "black")
    ax.set_xticks(range(len(labels)), labels, rotation=45)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    return _save(fig, path)


def accuracy_bars(header, rows, path, title: str = "") -> Path:
    """Grouped bars from a ``comparison_rows`` table (values in percent)."""
    names = header[1:]
    classes = [r[0] for r in rows]
    vals = np.array([[float(v) for v in r[1:]] for r in rows])
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    pos = np.arange(len(classes))
    for i, n in enumerate(names):
        ax.bar(pos + i * width, vals[:, i], width, label=n)
    ax.set_xticks(pos + width * (len(names) - 1) / 2, classes)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _save(fig, path)


def profile_figure(profiles: dict, path, title: str = "") -> Path:
    """Overlay of aggregate saliency profiles; dotted lines mark layer boundaries."""
    fig, ax = plt.subplots(figsize=(8, 3))
    bounds = None
    for name, prof in profiles.items():
        ax.plot(prof.values, label=f"{name} (n={prof.n_samples})", lw=1)
        bounds = prof.bounds
    for b in (bounds or [])[1:-1]:
        ax.axvline(b, color="grey", ls=":", lw=0.6)
    ax.set_xlabel("filter (sorted within layer)")
    ax.set_ylabel("standardized saliency")
    ax.legend(fontsize=7)
    ax.set_title(title)
    return _save(fig, path)


def normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    return np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)


def heatmap_figure(image: np.ndarray, saliency_map: np.ndarray, path, title: str = "") -> Path:
    """Side-by-side image and min-max normalized heat map; raw map saved next to it as ``.npy``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path.with_suffix(".npy"), np.asarray(saliency_map, dtype=np.float32))
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = img.transpose(1, 2, 0)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    fig, axes = plt.subplots(1, 2, figsize=(4, 2.2))
    axes[0].imshow(np.clip(img, 0, 1), cmap="gray" if img.ndim == 2 else None)
    axes[1].imshow(normalize_map(np.asarray(saliency_map)), cmap="inferno")
    for a in axes:
        a.axis("off")
    fig.suptitle(title, fontsize=8)
    return _save(fig, path)
