"""End-to-end training flow with soft-mask pruning.

Epochs [0, s) train densely. At the start of epoch s the global budget is
split into frozen per-layer ratios by a global bottom-k magnitude
selection. From then on the effective per-layer ratio is
min(1, eps * (e - s)) * r_i, constant within an epoch; before every
mini-batch each layer's threshold is recomputed from its current weights,
the forward pass uses the soft-masked weights, and SGD updates the raw
weights. After the last epoch every layer is binarized at its frozen
target ratio.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .core import CHANNEL, NM, UNSTRUCTURED, prune_count
from .errors import DivergenceError, FormatError, InputError
from .harness.data import Dataset
from .harness.metrics import FlipTracker, mac_count
from .harness.models import Network
from .optim import SGD, cosine_lr
from .pruners import make_pruner
from .structured import NMConfig

log = logging.getLogger(__name__)

GLOBAL = "global"
MANUAL = "manual"
FROM_FILE = "file"


@dataclass
class SparsitySchedule:
    global_ratio: float = 0.0
    warmup_epochs: Optional[int] = 0     # None: chosen during training by warmup_heuristic
    ramp_step: float = 0.015
    total_epochs: int = 1
    per_layer_ratios: Optional[Dict[str, float]] = None

    def __post_init__(self):
        if not 0.0 <= self.global_ratio < 1.0:
            raise InputError(f"sparsity must lie in [0, 1), got {self.global_ratio}")
        if self.total_epochs <= 0:
            raise InputError("total epochs must be positive")
        if self.warmup_epochs is None:
            return
        if self.warmup_epochs < 0:
            raise InputError("warm-up epochs must be nonnegative")
        if self.warmup_epochs > self.total_epochs:
            raise InputError("warm-up cannot exceed the total epoch count")
        if not self.ramp_step > 0:
            raise InputError("ramp step must be positive")

    def ramp_scale(self, epoch: int) -> float:
        if self.warmup_epochs is None or epoch < self.warmup_epochs:
            return 0.0
        return min(1.0, self.ramp_step * (epoch - self.warmup_epochs))

    def ramp_complete_epoch(self) -> int:
        """First epoch whose ramp scale is 1."""
        return self.warmup_epochs + math.ceil(round(1.0 / self.ramp_step, 9))

    def effective(self, epoch: int) -> Dict[str, float]:
        if self.per_layer_ratios is None:
            raise InputError("per-layer ratios are not allocated yet")
        scale = self.ramp_scale(epoch)
        return {k: scale * v for k, v in self.per_layer_ratios.items()}


def allocate_per_layer(names: Sequence[str], weights: Sequence[np.ndarray], r: float) -> Dict[str, float]:
    """Split a global ratio into per-layer ratios by global bottom-k magnitude.

    k = round(r * total); among equal magnitudes at the cut, the later
    weight (layer order, then flat index) is pruned first. Runs in O(n)
    with a partial selection.
    """
    if not 0.0 <= r < 1.0:
        raise InputError(f"global sparsity must lie in [0, 1), got {r}")
    if len(names) != len(weights):
        raise InputError("one weight tensor per layer name is required")
    sizes = np.array([np.size(w) for w in weights])
    if not sizes.size:
        return {}
    mags = np.concatenate([np.abs(np.asarray(w, dtype=np.float64)).reshape(-1) for w in weights])
    k = prune_count(r, mags.size)
    owner = np.repeat(np.arange(len(names)), sizes)
    if k == 0:
        counts = np.zeros(len(names), dtype=np.int64)
    else:
        cut = np.partition(mags, k - 1)[k - 1]
        below = mags < cut
        need = k - int(below.sum())
        ties = np.flatnonzero(mags == cut)
        chosen = below.copy()
        chosen[ties[ties.size - need:]] = True
        counts = np.bincount(owner[chosen], minlength=len(names))
    return {n: float(c) / float(s) for n, c, s in zip(names, counts, sizes)}


def write_allocation(path, ratios: Mapping[str, float]) -> None:
    Path(path).write_text(json.dumps({k: float(v) for k, v in ratios.items()}, indent=2) + "\n")


def read_allocation(path, layer_names: Optional[Sequence[str]] = None) -> Dict[str, float]:
    """Load a layer -> ratio mapping; the layer set must match ``layer_names``."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read allocation {path}: {exc}") from None
    if not isinstance(data, dict):
        raise FormatError("allocation file must map layer names to ratios")
    return validate_allocation(data, layer_names)


def validate_allocation(data: Mapping[str, float], layer_names: Optional[Sequence[str]] = None) -> Dict[str, float]:
    out = {}
    for k, v in data.items():
        try:
            v = float(v)
        except (TypeError, ValueError):
            raise InputError(f"ratio for {k} is not a number") from None
        if not 0.0 <= v <= 1.0:
            raise InputError(f"ratio for {k} must lie in [0, 1], got {v}")
        out[str(k)] = v
    if layer_names is not None and set(out) != set(layer_names):
        raise InputError(f"allocation layers {sorted(out)} do not match prunable layers {sorted(layer_names)}")
    return out


def warmup_heuristic(val_acc: Sequence[float], upper_bound: float = 1.0, window: int = 5,
                     lr_warmup_epochs: int = 0) -> Optional[int]:
    """Suggest s: the epoch right after the first run of ``window`` epochs above half the upper bound."""
    level = 0.5 * upper_bound
    run = 0
    for e in range(lr_warmup_epochs, len(val_acc)):
        run = run + 1 if val_acc[e] > level else 0
        if run == window:
            return e + 1
    return None


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_warmup_epochs: float = 0.0
    batch_size: int = 128


@dataclass
class PruneConfig:
    method: str = "pdp"                 # pdp | hard | dense
    mode: str = UNSTRUCTURED
    nm: Optional[NMConfig] = None
    tau: float = 1e-4
    allocation: str = GLOBAL            # global | manual | file
    manual_ratios: Optional[Dict[str, float]] = None

    def __post_init__(self):
        if self.method not in ("pdp", "hard", "dense"):
            raise InputError(f"unknown method {self.method!r}")
        if self.mode not in (UNSTRUCTURED, NM, CHANNEL):
            raise InputError(f"unknown mode {self.mode!r}")
        if self.mode == NM and self.nm is None:
            raise InputError("N:M mode needs N and M")
        if not self.tau > 0:
            raise InputError("tau must be positive")
        if self.allocation not in (GLOBAL, MANUAL, FROM_FILE):
            raise InputError(f"unknown allocation source {self.allocation!r}")


@dataclass
class TrainResult:
    network: Network
    masks: Dict[str, np.ndarray]
    ratios: Dict[str, float]
    history: List[dict]
    summary: dict
    warmup_snapshot: Optional[Dict[str, np.ndarray]] = None


def _layer_ratios(network: Network, schedule: SparsitySchedule, prune: PruneConfig) -> Dict[str, float]:
    names = network.spec.prunable()
    if prune.mode == NM:
        return {n: prune.nm.ratio for n in names}
    if prune.allocation in (MANUAL, FROM_FILE):
        if prune.manual_ratios is None:
            raise InputError("manual allocation needs per-layer ratios")
        return validate_allocation(prune.manual_ratios, names)
    if prune.mode == CHANNEL:
        # channel norms are not comparable across layers of different fan-in, so
        # every layer gets the same ratio; the last layer's outputs are the logits
        last = network.spec.weight_layers()[-1][0]
        return {n: (0.0 if n == last else schedule.global_ratio) for n in names}
    return allocate_per_layer(names, [network.weights[n].data for n in names], schedule.global_ratio)


def _evaluate(network: Network, data: Optional[Dataset], overrides=None) -> float:
    if data is None or len(data) == 0:
        return float("nan")
    return network.accuracy(data.x, data.y, overrides)


def train_with_pdp(network: Network, train: Dataset, schedule: SparsitySchedule,
                   prune: Optional[PruneConfig] = None, optim: Optional[OptimConfig] = None,
                   seed: int = 0, val: Optional[Dataset] = None,
                   on_epoch: Optional[Callable[[dict], None]] = None,
                   track_flips: bool = True) -> TrainResult:
    """Train ``network`` in place and return its finalized masks and history.

    ``prune.method`` selects soft masks ("pdp"), the hard magnitude baseline
    ("hard") or no pruning at all ("dense"). The same seed yields the same
    initial batch order for all three, so epochs before warm-up ends match
    bit for bit.
    """
    prune = prune or PruneConfig()
    optim = optim or OptimConfig()
    pruning = prune.method != "dense"
    names = network.spec.prunable()
    pruners = {n: make_pruner("pdp" if prune.method == "dense" else prune.method, prune.mode, prune.tau, prune.nm)
               for n in names}
    opt = SGD(network.parameters(), optim.momentum, optim.weight_decay)
    rng = np.random.default_rng(seed)
    tracker = FlipTracker()
    steps_per_epoch = max(1, math.ceil(len(train) / optim.batch_size))
    history: List[dict] = []
    ratios: Optional[Dict[str, float]] = None
    warmup_snapshot = None

    auto_warmup = schedule.warmup_epochs is None
    for epoch in range(schedule.total_epochs):
        if pruning and auto_warmup and ratios is None:
            suggested = warmup_heuristic([h["val_acc"] for h in history],
                                         lr_warmup_epochs=int(math.ceil(optim.lr_warmup_epochs)))
            if suggested is not None:
                schedule.warmup_epochs = epoch
                log.info("warm-up heuristic starts pruning at epoch %d", epoch)
        if pruning and epoch == schedule.warmup_epochs and ratios is None:
            warmup_snapshot = network.state()
            ratios = _layer_ratios(network, schedule, prune)
            schedule.per_layer_ratios = dict(ratios)
            log.info("allocated per-layer ratios at epoch %d: %s", epoch, ratios)
        active = pruning and ratios is not None
        effective = schedule.effective(epoch) if active else {}
        tracker.start_epoch()
        loss_sum, correct, seen = 0.0, 0, 0
        for step, (xb, yb) in enumerate(train.batches(optim.batch_size, rng)):
            overrides = None
            if active:
                overrides = {}
                for n in names:
                    w = network.weights[n]
                    pruners[n].refresh(w.data, effective[n])
                    if track_flips:
                        tracker.observe(n, pruners[n].keep_mask(w.data))
                    overrides[n] = pruners[n].masked(w)
            logits = network.forward(xb, overrides)
            loss = ad.softmax_cross_entropy(logits, yb)
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step}",
                    _diagnostics(network, pruners if active else {}, epoch, step, lval, effective))
            ad.backward(loss)
            lr = cosine_lr(optim.lr, epoch + step / steps_per_epoch, schedule.total_epochs, optim.lr_warmup_epochs)
            opt.step(lr)
            opt.zero_grad()
            loss_sum += lval * len(yb)
            correct += int(np.sum(logits.data.argmax(axis=1) == yb))
            seen += len(yb)

        record = {
            "epoch": epoch,
            "phase": "dense" if not active else ("ramp" if schedule.ramp_scale(epoch) < 1 else "target"),
            "lr": cosine_lr(optim.lr, epoch + 1, schedule.total_epochs, optim.lr_warmup_epochs),
            "loss": loss_sum / max(seen, 1),
            "train_acc": correct / max(seen, 1),
            "ramp_scale": schedule.ramp_scale(epoch) if active else 0.0,
            "layers": {},
        }
        eval_overrides = None
        if active:
            eval_overrides = {}
            for n in names:
                w = network.weights[n]
                p = pruners[n]
                p.refresh(w.data, effective[n])
                with ad.no_grad():
                    eval_overrides[n] = p.masked(w)
                keep = p.keep_mask(w.data)
                soft = p.soft_values(w.data)
                record["layers"][n] = {
                    "target_ratio": effective[n],
                    "threshold": p.threshold_summary(),
                    "soft_sparsity": float(np.mean(soft < 0.5)),
                    "hard_sparsity": float(1.0 - np.mean(keep)),
                    "flips": tracker.counts().get(n, 0),
                }
        else:
            for n in names:
                record["layers"][n] = {"target_ratio": 0.0, "threshold": None, "soft_sparsity": 0.0,
                                       "hard_sparsity": 0.0, "flips": 0}
        record["flips"] = int(sum(v["flips"] for v in record["layers"].values()))
        record["val_acc"] = _evaluate(network, val, eval_overrides)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.info("epoch %d loss %.4f train %.4f val %.4f flips %d", epoch, record["loss"],
                 record["train_acc"], record["val_acc"], record["flips"])

    # binarize at the frozen per-layer targets
    if pruning and ratios is None:
        ratios = _layer_ratios(network, schedule, prune)
        schedule.per_layer_ratios = dict(ratios)
    masks = {}
    for n in names:
        w = network.weights[n]
        if pruning:
            pruned, mask = pruners[n].finalize(w.data, ratios[n])
        else:
            mask = np.ones_like(w.data)
            pruned = w.data
        w.data = np.array(pruned, dtype=network.dtype)
        masks[n] = mask
    ratios = ratios or {n: 0.0 for n in names}
    summary = summarize(network, masks, ratios, prune, val)
    return TrainResult(network, masks, ratios, history, summary, warmup_snapshot)


def summarize(network: Network, masks: Mapping[str, np.ndarray], ratios: Mapping[str, float],
              prune: PruneConfig, test: Optional[Dataset] = None) -> dict:
    spec = network.spec
    biases = {n: (b.data if b is not None else None) for n, b in network.biases.items()}
    macs = mac_count(spec, masks, channel_pruned=prune.mode == CHANNEL, biases=biases)
    layers = {}
    zeros = total = 0
    for n in spec.prunable():
        m = masks[n]
        z = int(np.count_nonzero(m == 0))
        layers[n] = {"n": int(m.size), "zeros": z, "sparsity": z / m.size,
                     "allocated": float(ratios.get(n, 0.0)),
                     "mac": macs.per_layer[n], "dense_mac": macs.dense_per_layer[n]}
        zeros += z
        total += m.size
    nonzero = sum(int(np.count_nonzero(t.data)) for t in network.parameters())
    return {
        "method": prune.method,
        "mode": prune.mode if prune.mode != NM else f"nm {prune.nm.n}:{prune.nm.m}",
        "test_acc": _evaluate(network, test),
        "sparsity": zeros / total if total else 0.0,
        "pruned_weights": zeros,
        "prunable_weights": total,
        "target_pruned": int(round(sum(ratios.get(n, 0.0) * masks[n].size for n in spec.prunable()))),
        "mac": macs.total,
        "dense_mac": macs.dense_total,
        "params": spec.param_count(),
        "nonzero_params": nonzero,
        "layers": layers,
    }


def _diagnostics(network, pruners, epoch, step, loss, effective) -> dict:
    layers = {}
    for n, w in network.weights.items():
        d = w.data
        layers[n] = {
            "finite": bool(np.all(np.isfinite(d))),
            "max_abs": float(np.nanmax(np.abs(d))) if d.size else 0.0,
            "threshold": pruners[n].threshold_summary() if n in pruners else None,
            "ratio": effective.get(n),
        }
    return {"epoch": epoch, "step": step, "loss": loss, "layers": layers}
