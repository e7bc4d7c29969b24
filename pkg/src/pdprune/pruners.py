"""Per-layer pruning strategies driven by the training loop.

Each pruner keeps the thresholds computed by its last :meth:`refresh` and
uses them for the next forward pass. ``refresh`` always sees detached
weight values.
"""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import (CHANNEL, NM, UNSTRUCTURED, MaskParams, apply_mask, hard_mask, mask_values,
                   prune_count, threshold_for_count)
from .errors import InputError
from .structured import (NMConfig, channel_finalize, channel_norms, channel_soft_mask, nm_finalize,
                         nm_threshold_map)


class Pruner:
    mode = UNSTRUCTURED

    def refresh(self, w: np.ndarray, ratio: float) -> None:
        raise NotImplementedError

    def masked(self, w: Tensor) -> Tensor:
        raise NotImplementedError

    def keep_mask(self, w: np.ndarray) -> np.ndarray:
        """Rounded mask (bool, w's shape) under the current thresholds."""
        raise NotImplementedError

    def soft_values(self, w: np.ndarray) -> np.ndarray:
        return self.keep_mask(w).astype(np.float64)

    def finalize(self, w: np.ndarray, ratio: float) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def threshold_summary(self) -> Optional[float]:
        return None


class PDPUnstructured(Pruner):
    def __init__(self, tau: float):
        self.params = MaskParams(tau=tau)
        self.t = 0.0

    def refresh(self, w, ratio):
        a = np.abs(w).reshape(-1)
        self.t = threshold_for_count(a, prune_count(ratio, a.size))

    def masked(self, w):
        return apply_mask(w, self.params, t=self.t)

    def keep_mask(self, w):
        return np.abs(w) >= self.t

    def soft_values(self, w):
        return mask_values(w, self.t, self.params.tau)

    def finalize(self, w, ratio):
        self.refresh(w, ratio)
        mask = hard_mask(w, self.t).astype(w.dtype)
        return w * mask, mask

    def threshold_summary(self):
        return self.t


class PDPNM(Pruner):
    mode = NM

    def __init__(self, cfg: NMConfig, tau: float):
        self.cfg = cfg
        self.params = MaskParams(tau=tau, mode=NM, n=cfg.n, m=cfg.m)
        self.tmap: Optional[np.ndarray] = None

    def _group_ratio(self, ratio):
        # layer ratio is the ramp scale times (M - N) / M
        return None if ratio >= self.cfg.ratio else ratio

    def refresh(self, w, ratio):
        self.tmap = nm_threshold_map(w, self.cfg, self._group_ratio(ratio))

    def masked(self, w):
        return apply_mask(w, self.params, t=self.tmap.astype(w.dtype))

    def keep_mask(self, w):
        return hard_mask(w, self.tmap).astype(bool)

    def soft_values(self, w):
        return mask_values(w, self.tmap, self.params.tau)

    def finalize(self, w, ratio):
        self.refresh(w, ratio)
        return nm_finalize(w, self.cfg, self._group_ratio(ratio))

    def threshold_summary(self):
        return None if self.tmap is None else float(np.mean(self.tmap))


class PDPChannel(Pruner):
    mode = CHANNEL

    def __init__(self, tau: float):
        self.tau = tau
        self.t = 0.0

    def refresh(self, w, ratio):
        norms = channel_norms(w)
        self.t = threshold_for_count(norms, prune_count(ratio, norms.size))

    def masked(self, w):
        return ad.mul(channel_soft_mask(w, None, 0.0, self.tau, t=self.t), w)

    def _expand(self, per_channel, w):
        return np.broadcast_to(per_channel.reshape((-1,) + (1,) * (w.ndim - 1)), w.shape)

    def keep_mask(self, w):
        return self._expand(channel_norms(w) >= self.t, w)

    def soft_values(self, w):
        n = channel_norms(w)
        return self._expand(mask_values(n, self.t, self.tau), w)

    def finalize(self, w, ratio):
        self.refresh(w, ratio)
        return channel_finalize(w, 0.0, count=prune_count(ratio, w.shape[0]))

    def threshold_summary(self):
        return self.t


class HardMagnitude(Pruner):
    """Binary magnitude mask recomputed every step; pruned weights get zero gradient."""

    def __init__(self, mode: str = UNSTRUCTURED, cfg: Optional[NMConfig] = None):
        if mode == NM and cfg is None:
            raise InputError("N:M baseline needs an NMConfig")
        self.mode = mode
        self.cfg = cfg
        self.mask: Optional[np.ndarray] = None
        self.t: Optional[float] = None

    def _compute(self, w, ratio):
        if self.mode == UNSTRUCTURED:
            a = np.abs(w).reshape(-1)
            self.t = threshold_for_count(a, prune_count(ratio, a.size))
            return hard_mask(w, self.t)
        if self.mode == NM:
            return nm_finalize(w, self.cfg, None if ratio >= self.cfg.ratio else ratio)[1]
        return channel_finalize(w, 0.0, count=prune_count(ratio, w.shape[0]))[1]

    def refresh(self, w, ratio):
        self.mask = self._compute(w, ratio).astype(w.dtype)

    def masked(self, w):
        return ad.mul(w, Tensor(self.mask))

    def keep_mask(self, w):
        return self.mask.astype(bool)

    def finalize(self, w, ratio):
        self.refresh(w, ratio)
        return w * self.mask, self.mask

    def threshold_summary(self):
        return self.t


def make_pruner(method: str, mode: str, tau: float, nm: Optional[NMConfig] = None) -> Pruner:
    if method == "hard":
        return HardMagnitude(mode, nm)
    if method != "pdp":
        raise InputError(f"unknown pruning method {method!r}")
    if mode == UNSTRUCTURED:
        return PDPUnstructured(tau)
    if mode == NM:
        if nm is None:
            raise InputError("N:M mode needs N and M")
        return PDPNM(nm, tau)
    if mode == CHANNEL:
        return PDPChannel(tau)
    raise InputError(f"unknown mode {mode!r}")
