"""N:M and output-channel pruning on top of the soft-mask core.

N:M treats every run of M consecutive weights (flat row-major order) as
its own tiny layer with ratio (M - N) / M. Channel mode thresholds the
per-output-channel L2 norms instead of individual magnitudes and scales
the whole channel by sigma((norm^2 - t^2) / tau).

Hard finalization in both modes selects by exact count. Among equal
magnitudes (or norms) the lower index is kept.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import (MaskParams, NM, CHANNEL, UNSTRUCTURED, prune_count, split_point, threshold_for_count,
                   compute_threshold, finalize_hard, soft_mask)
from .errors import InputError


@dataclass(frozen=True)
class NMConfig:
    n: int
    m: int

    def __post_init__(self):
        if not (isinstance(self.n, int) and isinstance(self.m, int) and 0 < self.n < self.m):
            raise InputError(f"N:M needs integers 0 < N < M, got {self.n}:{self.m}")

    @property
    def ratio(self) -> float:
        return (self.m - self.n) / self.m

    def __str__(self) -> str:
        return f"{self.n}:{self.m}"


def _data(w) -> np.ndarray:
    return w.data if isinstance(w, Tensor) else np.asarray(w)


def _group_counts(size: int, cfg: NMConfig, ratio: Optional[float]) -> Tuple[int, int]:
    """Pruned count for a full group and for the short trailing group of ``size``."""
    if ratio is None or ratio == cfg.ratio:
        full = cfg.m - cfg.n
        rem = size - (-(-cfg.n * size // cfg.m)) if size else 0   # keep ceil(N*size/M)
        return full, rem
    if not 0.0 <= ratio <= 1.0:
        raise InputError(f"ratio must lie in [0, 1], got {ratio}")
    full = prune_count(ratio, cfg.m)
    rem = size - math.ceil((1.0 - ratio) * size - 1e-9) if size else 0
    return full, rem


def _groups(w, cfg: NMConfig):
    flat = np.abs(np.asarray(_data(w), dtype=np.float64).reshape(-1))
    if cfg.m > flat.size:
        raise InputError(f"group size {cfg.m} exceeds the {flat.size} weights in the layer")
    g = flat.size // cfg.m
    return flat[: g * cfg.m].reshape(g, cfg.m), flat[g * cfg.m:]


def nm_thresholds(w, cfg: NMConfig, ratio: Optional[float] = None) -> np.ndarray:
    """One threshold per group of M consecutive weights (plus one for a short tail group).

    ``ratio`` defaults to (M - N) / M; smaller values are used while ramping.
    """
    full, tail = _groups(w, cfg)
    k, k_tail = _group_counts(tail.size, cfg, ratio)
    if k <= 0:
        t = 0.5 * full.min(axis=1)
    elif k >= cfg.m:
        t = 2.0 * full.max(axis=1)
    else:
        part = np.partition(full, (k - 1, k), axis=1)
        t = split_point(part[:, k - 1], part[:, k])
    if tail.size:
        t = np.append(t, threshold_for_count(tail, k_tail))
    return t


def nm_threshold_map(w, cfg: NMConfig, ratio: Optional[float] = None) -> np.ndarray:
    """Per-element thresholds with the layer's shape."""
    data = _data(w)
    t = nm_thresholds(data, cfg, ratio)
    per = np.repeat(t, cfg.m)[: data.size]
    return per.reshape(data.shape)


def nm_soft_mask(w: Tensor, cfg: NMConfig, tau: float, ratio: Optional[float] = None,
                 thresholds: Optional[np.ndarray] = None) -> Tensor:
    tmap = nm_threshold_map(w, cfg, ratio) if thresholds is None else thresholds
    return soft_mask(w, MaskParams(tau=tau, mode=NM, n=cfg.n, m=cfg.m), t=tmap)


def nm_finalize(w, cfg: NMConfig, ratio: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Keep exactly the largest (M - pruned) magnitudes per group; ties keep lower index."""
    data = _data(w)
    full, tail = _groups(data, cfg)
    k, k_tail = _group_counts(tail.size, cfg, ratio)
    keep = np.zeros(data.size, dtype=bool)
    order = np.argsort(-full, axis=1, kind="stable")
    g = full.shape[0]
    kept_idx = order[:, : cfg.m - k] + (np.arange(g) * cfg.m)[:, None]
    keep[kept_idx.reshape(-1)] = True
    if tail.size:
        tail_order = np.argsort(-tail, kind="stable")[: tail.size - k_tail]
        keep[g * cfg.m + tail_order] = True
    mask = keep.reshape(data.shape).astype(data.dtype)
    return data * mask, mask


# -- channels ----------------------------------------------------------------------
@dataclass
class ChannelView:
    """Output channels live on axis 0 (conv O×C×kH×kW kernels, linear weight rows)."""
    axis: int = 0
    norms: Optional[np.ndarray] = None

    @classmethod
    def of(cls, w) -> "ChannelView":
        return cls(axis=0, norms=channel_norms(w))


def channel_norms(w) -> np.ndarray:
    data = np.asarray(_data(w), dtype=np.float64)
    if data.ndim == 0 or data.shape[0] == 0:
        raise InputError("weights have no channel axis")
    return np.sqrt((data.reshape(data.shape[0], -1) ** 2).sum(axis=1))


def channel_threshold(w, ratio: float) -> float:
    return compute_threshold(channel_norms(w), ratio)


def channel_soft_mask(w: Tensor, view: Optional[ChannelView], ratio: float, tau: float,
                      t: Optional[float] = None) -> Tensor:
    """Per-channel soft mask expanded to w's shape.

    The squared norms are computed inside the graph, so every weight of a
    channel receives gradient through its channel's mask value.
    """
    if view is not None and view.axis != 0:
        raise InputError("only output-channel (axis 0) pruning is supported")
    if t is None:
        norms = view.norms if view is not None and view.norms is not None else channel_norms(w)
        t = compute_threshold(norms, ratio)
    sq = ad.sum_channels(ad.square(w))
    m = ad.sigmoid(ad.scale(ad.add(sq, -float(t) ** 2), 1.0 / tau))
    return ad.expand_channels(m, w.shape)


def channel_finalize(w, ratio: float, count: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Zero the round(ratio * C) lowest-norm channels; ties keep the lower index."""
    data = _data(w)
    norms = channel_norms(data)
    c = norms.size
    k = prune_count(ratio, c) if count is None else count
    order = np.lexsort((-np.arange(c), norms))       # ascending norm, higher index first
    keep = np.ones(c, dtype=bool)
    keep[order[:k]] = False
    mask = np.broadcast_to(keep.reshape((-1,) + (1,) * (data.ndim - 1)), data.shape).astype(data.dtype)
    return data * mask, mask


def finalize_structured(w, mode: str, *, cfg: Optional[NMConfig] = None, ratio: Optional[float] = None,
                        params: Optional[MaskParams] = None) -> Tuple[np.ndarray, np.ndarray]:
    if mode == NM:
        return nm_finalize(w, cfg, ratio)
    if mode == CHANNEL:
        return channel_finalize(w, ratio)
    if mode == UNSTRUCTURED:
        if params is None:
            params = MaskParams(t=compute_threshold(_data(w), ratio))
        return finalize_hard(w, params)
    raise InputError(f"unknown mode {mode!r}")
