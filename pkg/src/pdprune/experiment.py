"""Glue between an ExperimentConfig and a run directory on disk."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np

from . import artifacts
from .config import ExperimentConfig
from .core import NM
from .errors import DivergenceError, FormatError, InputError
from .harness.data import Dataset, load_mnist_split, synthetic_split
from .harness.models import Network, build_spec
from .schedule import (FROM_FILE, OptimConfig, PruneConfig, SparsitySchedule, TrainResult, read_allocation,
                       train_with_pdp)
from .structured import NMConfig

log = logging.getLogger(__name__)

DIAGNOSTICS_FILE = "diagnostics.json"


def load_data(cfg: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    dtype = np.dtype(cfg.dtype)
    if cfg.dataset == "mnist":
        train = load_mnist_split("train", cfg.data_dir, dtype).subset(cfg.n_train)
        test = load_mnist_split("test", cfg.data_dir, dtype).subset(cfg.n_test)
        return train, test
    return synthetic_split(cfg.seed, cfg.n_train or cfg.synthetic_samples, cfg.n_test or cfg.synthetic_test,
                           cfg.n_features, cfg.n_classes, separation=cfg.separation, noise=cfg.noise,
                           dtype=dtype)


def build_network(cfg: ExperimentConfig, train: Dataset) -> Network:
    spec = build_spec(cfg.model_name(), train.sample_shape, train.n_classes, seed=cfg.seed)
    return Network(spec, dtype=np.dtype(cfg.dtype), seed=cfg.seed)


def prune_config(cfg: ExperimentConfig, network: Optional[Network] = None) -> PruneConfig:
    nm = NMConfig(cfg.nm_n, cfg.nm_m) if cfg.mode == NM else None
    ratios = cfg.manual_ratios
    if cfg.allocation == FROM_FILE:
        names = network.spec.prunable() if network is not None else None
        ratios = read_allocation(cfg.allocation_file, names)
    return PruneConfig(method=cfg.method, mode=cfg.mode, nm=nm, tau=cfg.tau, allocation=cfg.allocation,
                       manual_ratios=ratios)


@dataclass
class RunOutput:
    directory: Path
    result: TrainResult


def run_experiment(cfg: ExperimentConfig, out_dir=None,
                   on_epoch: Optional[Callable[[dict], None]] = None) -> RunOutput:
    """Train per ``cfg`` and write the full run directory.

    On divergence the metrics written so far are kept, diagnostics.json is
    added, and the DivergenceError propagates.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else cfg.resolved_output_dir()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create output directory {out}: {exc}") from None
    cfg.save(out / artifacts.CONFIG_FILE)
    metrics_path = out / artifacts.METRICS_FILE
    if metrics_path.exists():
        metrics_path.unlink()

    train, test = load_data(cfg)
    network = build_network(cfg, train)
    schedule = SparsitySchedule(cfg.sparsity, cfg.warmup_epochs, cfg.ramp_step, cfg.epochs)
    optim = OptimConfig(cfg.lr, cfg.momentum, cfg.weight_decay, cfg.lr_warmup_epochs, cfg.batch_size)
    prune = prune_config(cfg, network)

    with artifacts.MetricsWriter(metrics_path) as sink:
        def emit(record):
            sink(record)
            if on_epoch is not None:
                on_epoch(record)
        try:
            result = train_with_pdp(network, train, schedule, prune, optim, seed=cfg.seed, val=test,
                                    on_epoch=emit)
        except DivergenceError as exc:
            (out / DIAGNOSTICS_FILE).write_text(json.dumps(exc.diagnostics, indent=2, default=str) + "\n")
            raise

    summary = dict(result.summary)
    summary["seed"] = cfg.seed
    summary["tau"] = cfg.tau
    summary["epochs"] = cfg.epochs
    summary["warmup_epochs"] = schedule.warmup_epochs
    summary["total_flips"] = int(sum(h["flips"] for h in result.history))
    artifacts.write_masks(out / artifacts.MASKS_FILE, result.masks)
    artifacts.write_weights(out / artifacts.WEIGHTS_FILE, result.network.state())
    artifacts.write_summary(out / artifacts.SUMMARY_FILE, summary)
    result.summary = summary
    return RunOutput(out, result)
