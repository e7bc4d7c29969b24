"""Parameter-free soft pruning masks.

A weight w is scaled by m(w) = sigmoid((w^2 - t^2) / tau), where t is the
magnitude halfway between the largest weight that a hard mask at ratio r
would prune and the smallest one it would keep. The two-way softmax
exp(w^2/tau) / (exp(w^2/tau) + exp(t^2/tau)) is the same function; the
sigmoid form cannot overflow.

Thresholds are computed from detached weight values: no gradient flows
into t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError

UNSTRUCTURED = "unstructured"
NM = "nm"
CHANNEL = "channel"


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def prune_count(ratio: float, n: int) -> int:
    return round_half_away(ratio * n)


@dataclass
class MaskParams:
    t: float = 0.0
    tau: float = 1e-4
    mode: str = UNSTRUCTURED
    n: Optional[int] = None     # N of N:M
    m: Optional[int] = None     # M of N:M
    effective_ratio: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise InputError(f"tau must be positive, got {self.tau}")
        if self.t < 0:
            raise InputError(f"threshold must be nonnegative, got {self.t}")
        if self.mode not in (UNSTRUCTURED, NM, CHANNEL):
            raise InputError(f"unknown mode {self.mode!r}")
        if self.mode == NM and not (self.n and self.m and 0 < self.n < self.m):
            raise InputError("N:M mode needs 0 < N < M")
        if not 0.0 <= self.effective_ratio < 1.0:
            raise InputError("effective ratio must lie in [0, 1)")


def _check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio < 1.0:
        raise InputError(f"ratio must lie in [0, 1), got {ratio}")


def compute_threshold(weights, ratio: float) -> float:
    """Midpoint between the k-th and (k+1)-th smallest magnitudes, k = round(ratio * n).

    Uses a partial selection (introselect), not a sort. k == 0 gives half
    the smallest magnitude so nothing sits on the boundary; k == n (only
    possible through rounding) gives twice the largest so everything is
    pruned.
    """
    _check_ratio(ratio)
    a = np.abs(np.asarray(weights, dtype=np.float64).reshape(-1))
    if a.size == 0:
        raise InputError("cannot threshold an empty weight set")
    return threshold_for_count(a, prune_count(ratio, a.size))


def threshold_for_count(a: np.ndarray, k: int) -> float:
    """Threshold pruning exactly the ``k`` smallest of the magnitudes ``a``."""
    n = a.size
    if k <= 0:
        return 0.5 * float(a.min())
    if k >= n:
        return 2.0 * float(a.max())
    part = np.partition(a, (k - 1, k))
    return float(split_point(part[k - 1], part[k]))


def split_point(lo, hi):
    """Midpoint of lo <= hi that still lies strictly above lo when lo < hi.

    For adjacent floats the midpoint rounds onto lo, which would keep the
    weight meant to be pruned; hi is used then.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    mid = 0.5 * (lo + hi)
    return np.where((mid <= lo) & (hi > lo), hi, mid)


def mask_logits(w, t: float, tau: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return (w * w - t * t) / tau


def mask_values(w, t, tau: float) -> np.ndarray:
    """m(w) on plain arrays; ``t`` may be a scalar or an array broadcastable to w."""
    w = np.asarray(w, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return ad.stable_sigmoid((w * w - t * t) / tau)


def prune_chance(w, t, tau: float) -> np.ndarray:
    """z(w) = 1 - m(w), the chance of the to-prune state. z + m == 1 exactly in float64."""
    return 1.0 - mask_values(w, t, tau)


def soft_mask(w: Tensor, params: MaskParams, t=None) -> Tensor:
    """Differentiable m(w) = sigmoid((w^2 - t^2) / tau).

    ``t`` overrides ``params.t`` and may be an array of per-element
    thresholds with w's shape (used by the N:M adapter).
    """
    w = w if isinstance(w, Tensor) else Tensor(w)
    t = params.t if t is None else t
    if np.ndim(t) == 0:
        logits = ad.add(ad.square(w), -float(t) ** 2)
    else:
        t = np.asarray(t, dtype=w.dtype)
        if t.shape != w.shape:
            raise InputError(f"threshold array {t.shape} does not match weights {w.shape}")
        logits = ad.sub(ad.square(w), Tensor(t * t))
    return ad.sigmoid(ad.scale(logits, 1.0 / params.tau))


def apply_mask(w: Tensor, params: MaskParams, t=None) -> Tensor:
    """Masked weight m(w) * w, differentiable through both factors."""
    return ad.mul(soft_mask(w, params, t), w)


def analytic_grad_factor(w, params: MaskParams, t=None):
    """d(m(w) * w)/dw = m + 2 (w^2 / tau) m (1 - m).

    The second term is the boost that peaks where m = 0.5. Accepts scalars
    or arrays.
    """
    t = params.t if t is None else t
    w = np.asarray(w, dtype=np.float64)
    m = mask_values(w, t, params.tau)
    out = m + 2.0 * (w * w / params.tau) * m * (1.0 - m)
    return float(out) if out.ndim == 0 else out


def hard_mask(w, t) -> np.ndarray:
    """round(m(w)) with 0.5 rounded up to keep.

    m(w) >= 0.5 exactly when |w| >= t, and comparing magnitudes directly
    avoids sigmoid saturation and squaring error near the boundary.
    """
    return (np.abs(np.asarray(w)) >= np.asarray(t, dtype=np.float64)).astype(np.float64)


def finalize_hard(w, params: MaskParams) -> Tuple[np.ndarray, np.ndarray]:
    """Binarize the mask and zero the pruned weights. Returns (w_pruned, mask)."""
    data = w.data if isinstance(w, Tensor) else np.asarray(w)
    mask = hard_mask(data, params.t).astype(data.dtype)
    return data * mask, mask


def sparsity(mask) -> float:
    mask = np.asarray(mask)
    return float(np.count_nonzero(mask == 0)) / mask.size if mask.size else 0.0
