"""Sparsity, MAC and mask-flip accounting."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from ..errors import InputError
from .models import Conv2d, Flatten, Linear, ModelSpec


@dataclass
class MacReport:
    per_layer: Dict[str, int]
    dense_per_layer: Dict[str, int]

    @property
    def total(self) -> int:
        return int(sum(self.per_layer.values()))

    @property
    def dense_total(self) -> int:
        return int(sum(self.dense_per_layer.values()))


def mac_count(spec: ModelSpec, masks: Optional[Mapping[str, np.ndarray]] = None,
              input_shape: Optional[Tuple[int, ...]] = None, channel_pruned: bool = False,
              biases: Optional[Mapping[str, Optional[np.ndarray]]] = None) -> MacReport:
    """Per-sample multiply-accumulate counts.

    Linear: one MAC per nonzero weight. Conv2d: H_out * W_out MACs per
    nonzero kernel weight. With ``channel_pruned`` an output channel whose
    live weights are all zero (and whose bias is zero or absent) is treated
    as a constant zero, so downstream weights reading it are skipped.
    Layers missing from ``masks`` count as dense.
    """
    masks = masks or {}
    biases = biases or {}
    shape = tuple(input_shape or spec.input_shape)
    if shape != spec.input_shape:
        spec = ModelSpec(spec.layers, shape, spec.name, spec.init, spec.seed, list(spec.names))
    shapes = spec.shapes()
    dead = np.zeros(shape[0], dtype=bool)
    per, dense = {}, {}
    for i, (name, layer) in enumerate(zip(spec.names, spec.layers)):
        if isinstance(layer, (Linear, Conv2d)):
            wshape = spec.weight_shape(name)
            mask = masks.get(name)
            mask = np.ones(wshape, dtype=bool) if mask is None else np.asarray(mask) != 0
            if mask.shape != wshape:
                raise InputError(f"mask for {name} has shape {mask.shape}, layer needs {wshape}")
            positions = 1 if isinstance(layer, Linear) else shapes[i][1] * shapes[i][2]
            live = mask.copy()
            if channel_pruned:
                live[:, dead] = False
            per[name] = int(np.count_nonzero(live)) * positions
            dense[name] = int(np.prod(wshape)) * positions
            if channel_pruned:
                b = biases.get(name)
                if b is not None:
                    bias_zero = np.asarray(b) == 0
                else:
                    # an unknown bias might be nonzero, so the channel stays live
                    bias_zero = np.full(wshape[0], not layer.bias)
                dead = ~live.reshape(wshape[0], -1).any(axis=1) & bias_zero
            else:
                dead = np.zeros(wshape[0], dtype=bool)
        elif isinstance(layer, Flatten):
            prev = shapes[i - 1] if i else shape
            dead = np.repeat(dead, int(np.prod(prev[1:]))) if len(prev) == 3 else dead
    return MacReport(per, dense)


@dataclass
class FlipTracker:
    """Counts weights whose rounded mask changed at least once within an epoch."""
    previous: Dict[str, np.ndarray] = field(default_factory=dict)
    flipped: Dict[str, np.ndarray] = field(default_factory=dict)

    def start_epoch(self) -> None:
        self.previous.clear()
        self.flipped.clear()

    def observe(self, name: str, keep: np.ndarray) -> None:
        keep = np.asarray(keep, dtype=bool)
        prev = self.previous.get(name)
        if prev is None:
            self.flipped[name] = np.zeros(keep.shape, dtype=bool)
        else:
            self.flipped[name] |= prev != keep
        self.previous[name] = keep.copy()

    def counts(self) -> Dict[str, int]:
        return {name: int(np.count_nonzero(f)) for name, f in self.flipped.items()}

    def total(self) -> int:
        return int(sum(self.counts().values()))


def log_histogram(values, bins: int = 40) -> Tuple[np.ndarray, np.ndarray]:
    """Histogram of |values| on log-spaced edges; the first bin starts at 0.

    Every element lands in exactly one bin, zeros included.
    """
    a = np.abs(np.asarray(values, dtype=np.float64).reshape(-1))
    pos = a[a > 0]
    if pos.size == 0:
        edges = np.array([0.0, 1.0])
    else:
        lo, hi = np.log10(pos.min()), np.log10(pos.max())
        if hi <= lo:
            hi = lo + 1e-9
        edges = np.concatenate([[0.0], np.logspace(lo, hi, bins)])
        edges[-1] = max(edges[-1], pos.max())
    counts, edges = np.histogram(a, bins=edges)
    return edges, counts


def write_histogram_csv(path, edges, counts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_edge", "count"])
        for edge, count in zip(edges[:-1], counts):
            w.writerow([repr(float(edge)), int(count)])


def sparsity_report(masks: Mapping[str, np.ndarray], weights: Mapping[str, np.ndarray],
                    soft: Optional[Mapping[str, np.ndarray]] = None, bins: int = 40) -> dict:
    """Per-layer and global sparsity plus log-scale |w| histograms of the masked weights."""
    layers = {}
    zeros = total = soft_zeros = 0
    for name, mask in masks.items():
        mask = np.asarray(mask)
        n = mask.size
        z = int(np.count_nonzero(mask == 0))
        entry = {"n": n, "zeros": z, "sparsity": z / n if n else 0.0}
        if soft is not None and name in soft:
            sz = int(np.count_nonzero(np.asarray(soft[name]) < 0.5))
            entry["soft_sparsity"] = sz / n if n else 0.0
            soft_zeros += sz
        edges, counts = log_histogram(np.asarray(weights[name]) * (mask != 0), bins)
        entry["hist_edges"] = edges.tolist()
        entry["hist_counts"] = counts.tolist()
        layers[name] = entry
        zeros += z
        total += n
    out = {"layers": layers, "zeros": zeros, "n": total, "sparsity": zeros / total if total else 0.0}
    if soft is not None:
        out["soft_sparsity"] = soft_zeros / total if total else 0.0
    return out


def dip_near_zero(values, bins: int = 41) -> bool:
    """True when the signed histogram of nonzero values has a trough at 0 between two peaks."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    v = v[v != 0]
    if v.size < 10:
        return False
    lim = np.abs(v).max()
    counts, edges = np.histogram(v, bins=bins, range=(-lim, lim))
    centre = bins // 2
    left, right = counts[:centre].max(), counts[centre + 1:].max()
    return counts[centre] < min(left, right)
