"""Soft, parameter-free pruning masks with a small from-scratch training stack."""
from .autodiff import Tensor, backward, no_grad
from .core import (MaskParams, analytic_grad_factor, apply_mask, compute_threshold, finalize_hard,
                   prune_chance, soft_mask)
from .errors import DivergenceError, FormatError, InputError, ShapeError, StateError
from .structured import (ChannelView, NMConfig, channel_finalize, channel_soft_mask, finalize_structured,
                         nm_finalize, nm_soft_mask, nm_thresholds)

__version__ = "0.1.0"
