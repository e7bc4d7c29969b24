"""Hard-mask magnitude pruning, the comparison point for soft masks."""
from __future__ import annotations

from ..autodiff import Tensor
from ..core import UNSTRUCTURED, _check_ratio
from ..pruners import HardMagnitude


def hard_baseline_step(w: Tensor, ratio: float, mode: str = UNSTRUCTURED, nm=None):
    """Mask ``w`` by magnitude at ``ratio``; returns (masked weight, binary mask).

    The mask is a constant in the graph, so the gradient reaching a pruned
    weight is exactly zero.
    """
    _check_ratio(ratio)
    pruner = HardMagnitude(mode, nm)
    pruner.refresh(w.data, ratio)
    return pruner.masked(w), pruner.mask.copy()
