"""Experiment configuration: a flat dataclass stored as JSON."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

from .core import CHANNEL, NM, UNSTRUCTURED
from .errors import FormatError, InputError
from .schedule import FROM_FILE, GLOBAL, MANUAL

OUTPUT_ROOT_ENV = "PDP_OUTPUT_ROOT"
DEFAULT_TAU = 1e-4
DEFAULT_RAMP_STEP = 0.015


@dataclass
class ExperimentConfig:
    model: Optional[str] = None         # None: mnist_mlp on MNIST, toy_mlp on synthetic data
    dataset: str = "mnist"               # mnist | synthetic
    data_dir: Optional[str] = None
    n_train: Optional[int] = None        # subset sizes; None keeps everything
    n_test: Optional[int] = None
    n_features: int = 64                 # synthetic only
    n_classes: int = 10
    synthetic_samples: int = 4000
    synthetic_test: int = 1000
    separation: float = 2.0
    noise: float = 2.0                   # per-feature std before clipping to the separable radius

    method: str = "pdp"                  # pdp | hard | dense
    mode: str = UNSTRUCTURED
    nm_n: Optional[int] = None
    nm_m: Optional[int] = None
    sparsity: float = 0.9
    warmup_epochs: Optional[int] = 5     # None picks s from validation accuracy
    ramp_step: float = DEFAULT_RAMP_STEP
    epochs: int = 40
    tau: float = DEFAULT_TAU
    allocation: str = GLOBAL
    allocation_file: Optional[str] = None
    manual_ratios: Optional[Dict[str, float]] = None

    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_warmup_epochs: float = 0.0
    batch_size: int = 128
    dtype: str = "float32"
    seed: int = 0
    output_dir: Optional[str] = None

    def model_name(self) -> str:
        if self.model:
            return self.model
        return "mnist_mlp" if self.dataset == "mnist" else "toy_mlp"

    def validate(self) -> "ExperimentConfig":
        if not 0.0 <= self.sparsity < 1.0:
            raise InputError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if self.method not in ("pdp", "hard", "dense"):
            raise InputError(f"unknown method {self.method!r}")
        if self.mode not in (UNSTRUCTURED, NM, CHANNEL):
            raise InputError(f"unknown mode {self.mode!r}")
        if self.mode == NM and not (self.nm_n and self.nm_m and 0 < self.nm_n < self.nm_m):
            raise InputError("N:M mode needs 0 < N < M")
        if self.dataset not in ("mnist", "synthetic"):
            raise InputError(f"unknown dataset {self.dataset!r}")
        if not self.tau > 0:
            raise InputError("tau must be positive")
        if not self.ramp_step > 0:
            raise InputError("ramp step must be positive")
        if self.epochs <= 0:
            raise InputError("epochs must be positive")
        if self.warmup_epochs is not None and not 0 <= self.warmup_epochs <= self.epochs:
            raise InputError("warm-up epochs must lie in [0, epochs]")
        if self.batch_size <= 0:
            raise InputError("batch size must be positive")
        if self.allocation not in (GLOBAL, MANUAL, FROM_FILE):
            raise InputError(f"unknown allocation {self.allocation!r}")
        if self.allocation == FROM_FILE and not self.allocation_file:
            raise InputError("allocation 'file' needs --allocation-file")
        if self.allocation == MANUAL and not self.manual_ratios:
            raise InputError("allocation 'manual' needs per-layer ratios")
        if self.dtype not in ("float32", "float64"):
            raise InputError("dtype must be float32 or float64")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise FormatError("config must be a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise FormatError(f"cannot read config {path}: {exc}") from None
        return cls.loads(text)

    def resolved_output_dir(self, default_name: str = "run") -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name
