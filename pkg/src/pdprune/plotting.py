"""PNG figures for `pdprune report`, drawn next to the CSV exports.

matplotlib is optional. ``available()`` says whether it can be imported;
every renderer imports it lazily and uses the Agg backend so nothing
needs a display.
"""
from __future__ import annotations

from typing import Dict, List, Mapping, Sequence


def available() -> bool:
    try:
        import matplotlib  # noqa: F401
    except ImportError:
        return False
    return True


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    _pyplot().close(fig)


def bar_per_layer(path, layers: Sequence[str], values: Sequence[float], ylabel: str, title: str,
                  reference: Sequence[float] = None) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(layers) + 2), 3.2))
    x = range(len(layers))
    if reference is not None:
        ax.bar(x, reference, color="0.85", label="dense")
    ax.bar(x, values, color="tab:blue", label="pruned" if reference is not None else None)
    ax.set_xticks(list(x))
    ax.set_xticklabels(layers, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if reference is not None:
        ax.legend(frameon=False)
    _save(fig, path)


def flips_per_epoch(path, series: Mapping[str, Sequence[int]]) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for label, counts in series.items():
        ax.plot(range(len(counts)), counts, marker=".", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("weights flipped")
    ax.set_yscale("symlog", linthresh=1)
    ax.legend(frameon=False)
    _save(fig, path)


def magnitude_histogram(path, edges: Sequence[float], counts: Sequence[int], title: str) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    # the first bin starts at zero, so it is drawn at the second edge on a log axis
    left = list(edges[:-1])
    if len(left) > 1 and left[0] == 0:
        left[0] = edges[1] / 10 if edges[1] > 0 else 1e-12
    widths = [b - a for a, b in zip(left, edges[1:])]
    ax.bar(left, counts, width=widths, align="edge", color="tab:gray")
    ax.set_xscale("log")
    ax.set_xlabel("|w|")
    ax.set_ylabel("count")
    ax.set_title(title)
    _save(fig, path)


def sweep_curve(path, taus: Sequence[float], accuracies: Sequence[float], best: float) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    pairs = sorted(zip(taus, accuracies))
    ax.plot([p[0] for p in pairs], [p[1] for p in pairs], marker="o")
    ax.axvline(best, color="tab:red", linestyle=":")
    ax.set_xscale("log")
    ax.set_xlabel("temperature")
    ax.set_ylabel("test accuracy")
    _save(fig, path)
