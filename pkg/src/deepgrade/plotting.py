"""Static figures for grading maps, structure rankings and repeated-run metrics."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import IoError  # noqa: E402

GRADING_CMAP = "RdBu_r"


def mid_slices(data):
    """Axial, coronal and sagittal mid-planes of an (x, y, z) array, each oriented for display."""
    x, y, z = (d // 2 for d in data.shape)
    return {
        "axial": data[:, :, z].T,
        "coronal": data[:, y, :].T,
        "sagittal": data[x, :, :].T,
    }


def _save(fig, path):
    try:
        fig.savefig(path, dpi=120, bbox_inches="tight")
    except OSError as exc:
        raise IoError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)


def plot_grading_map(grading_map, path, title=None):
    """Three mid-slices of a grading map on a fixed [-1, 1] diverging scale."""
    slices = mid_slices(np.asarray(grading_map.data))
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.4))
    for ax, (name, img) in zip(axes, slices.items()):
        im = ax.imshow(img, cmap=GRADING_CMAP, vmin=-1, vmax=1, origin="lower", interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=list(axes), shrink=0.8, label="grading")
    if title:
        fig.suptitle(title, fontsize=10)
    _save(fig, path)


def plot_group_maps(group_maps, path):
    """One row of mid-slices per diagnostic group."""
    groups = list(group_maps)
    fig, axes = plt.subplots(len(groups), 3, figsize=(9, 3 * len(groups)), squeeze=False)
    for row, dx in zip(axes, groups):
        for ax, (name, img) in zip(row, mid_slices(np.asarray(group_maps[dx].data)).items()):
            im = ax.imshow(img, cmap=GRADING_CMAP, vmin=-1, vmax=1, origin="lower", interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if dx == groups[0]:
                ax.set_title(name, fontsize=9)
        row[0].set_ylabel(dx)
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.6, label="mean grading")
    _save(fig, path)


def plot_top_structures(ranking, path, title=None, highlight=()):
    """Horizontal bars of (structure id, score) pairs, best at the top; ``highlight`` ids are shaded."""
    ids = [int(r[0]) for r in ranking]
    scores = [float(r[1]) for r in ranking]
    fig, ax = plt.subplots(figsize=(4.5, 0.3 * len(ids) + 1.2))
    colors = ["tab:red" if i in set(highlight) else "tab:gray" for i in ids]
    pos = np.arange(len(ids))[::-1]
    ax.barh(pos, scores, color=colors)
    ax.set_yticks(pos)
    ax.set_yticklabels([str(i) for i in ids])
    ax.set_xlim(-1, 1)
    ax.axvline(0, color="k", lw=0.6)
    ax.set_xlabel("mean structure grading")
    ax.set_ylabel("structure id")
    if title:
        ax.set_title(title, fontsize=10)
    _save(fig, path)


def plot_repetition_bacc(report_dict, path):
    """Per-repetition test BACC of the GCN, the SVM and their fusion."""
    reps = report_dict["repetitions"]
    x = np.arange(len(reps))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for offset, (model, marker) in zip((-0.15, 0.0, 0.15), (("gcn", "o"), ("svm", "s"), ("fused", "D"))):
        ax.plot(x + offset, [r["test"][model]["bacc"] for r in reps], marker, label=model)
    ax.set_xticks(x)
    ax.set_xlabel("repetition")
    ax.set_ylabel("test BACC")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)
