"""Layer specs, the small model zoo, and a runnable network."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import InputError, ShapeError


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int
    bias: bool = True
    prunable: bool = True


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = False
    prunable: bool = True


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Linear, Conv2d, ReLU, Flatten]


@dataclass
class ModelSpec:
    layers: List[Layer]
    input_shape: Tuple[int, ...]
    name: str = "model"
    init: str = "he_normal"
    seed: int = 0
    names: List[Optional[str]] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if not self.names:
            counts = {"fc": 0, "conv": 0}
            for layer in self.layers:
                if isinstance(layer, Linear):
                    counts["fc"] += 1
                    self.names.append(f"fc{counts['fc']}")
                elif isinstance(layer, Conv2d):
                    counts["conv"] += 1
                    self.names.append(f"conv{counts['conv']}")
                else:
                    self.names.append(None)
        self.shapes()   # validates composition

    def shapes(self) -> List[Tuple[int, ...]]:
        """Activation shape (per sample) after every layer."""
        shape = self.input_shape
        out = []
        for layer in self.layers:
            if isinstance(layer, Linear):
                if len(shape) != 1 or shape[0] != layer.in_features:
                    raise ShapeError(f"Linear({layer.in_features}) cannot take input {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ShapeError(f"Conv2d({layer.in_channels}) cannot take input {shape}")
                h = ad.conv_output_size(shape[1], layer.kernel, layer.stride, layer.padding)
                w = ad.conv_output_size(shape[2], layer.kernel, layer.stride, layer.padding)
                if h <= 0 or w <= 0:
                    raise ShapeError(f"Conv2d produces non-positive extent from {shape}")
                shape = (layer.out_channels, h, w)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            out.append(shape)
        return out

    def weight_layers(self) -> List[Tuple[str, Layer]]:
        return [(n, l) for n, l in zip(self.names, self.layers) if n is not None]

    def prunable(self) -> List[str]:
        return [n for n, l in self.weight_layers() if l.prunable]

    def weight_shape(self, name: str) -> Tuple[int, ...]:
        layer = dict(self.weight_layers())[name]
        if isinstance(layer, Linear):
            return (layer.out_features, layer.in_features)
        return (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)

    def param_count(self) -> int:
        total = 0
        for _, layer in self.weight_layers():
            if isinstance(layer, Linear):
                total += layer.in_features * layer.out_features + (layer.out_features if layer.bias else 0)
            else:
                total += layer.in_channels * layer.out_channels * layer.kernel ** 2 + \
                    (layer.out_channels if layer.bias else 0)
        return total


def mlp(sizes: Sequence[int], name: str = "mlp", seed: int = 0) -> ModelSpec:
    layers: List[Layer] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return ModelSpec(layers, (sizes[0],), name=name, seed=seed)


def mnist_mlp(seed: int = 0) -> ModelSpec:
    return mlp([784, 256, 128, 10], name="mnist_mlp", seed=seed)


def toy_mlp(n_features: int = 32, n_classes: int = 4, hidden: Sequence[int] = (64, 32), seed: int = 0) -> ModelSpec:
    return mlp([n_features, *hidden, n_classes], name="toy_mlp", seed=seed)


def toy_cnn(input_shape: Tuple[int, int, int] = (1, 28, 28), n_classes: int = 10,
            channels: Tuple[int, int] = (8, 16), seed: int = 0) -> ModelSpec:
    """conv3x3 -> relu -> conv3x3/2 -> relu -> flatten -> linear. Convs carry no bias."""
    c, h, w = input_shape
    c1, c2 = channels
    h2 = ad.conv_output_size(h, 3, 2, 1)
    w2 = ad.conv_output_size(w, 3, 2, 1)
    layers = [Conv2d(c, c1, 3, 1, 1), ReLU(), Conv2d(c1, c2, 3, 2, 1), ReLU(), Flatten(),
              Linear(c2 * h2 * w2, n_classes)]
    return ModelSpec(layers, input_shape, name="toy_cnn", seed=seed)


ZOO = {
    "mnist_mlp": lambda input_shape, n_classes, seed: mnist_mlp(seed),
    "toy_mlp": lambda input_shape, n_classes, seed: toy_mlp(int(np.prod(input_shape)), n_classes, seed=seed),
    "toy_cnn": lambda input_shape, n_classes, seed: toy_cnn(
        input_shape if len(input_shape) == 3 else (1,) + _square(int(np.prod(input_shape))), n_classes, seed=seed),
}


def _square(n: int) -> Tuple[int, int]:
    side = int(round(n ** 0.5))
    if side * side != n:
        raise InputError(f"cannot view {n} features as a square image")
    return side, side


def build_spec(name: str, input_shape: Tuple[int, ...], n_classes: int, seed: int = 0) -> ModelSpec:
    try:
        factory = ZOO[name]
    except KeyError:
        raise InputError(f"unknown model {name!r}; choose from {sorted(ZOO)}") from None
    return factory(tuple(input_shape), n_classes, seed)


class Network:
    """Parameters for a :class:`ModelSpec` plus a forward pass.

    ``forward`` accepts replacement weight tensors by layer name, which is
    how soft masks enter the graph without touching the raw parameters.
    """

    def __init__(self, spec: ModelSpec, dtype=np.float64, seed: Optional[int] = None):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(spec.seed if seed is None else seed)
        self.weights: Dict[str, Tensor] = {}
        self.biases: Dict[str, Optional[Tensor]] = {}
        for name, layer in spec.weight_layers():
            shape = spec.weight_shape(name)
            fan_in = int(np.prod(shape[1:]))
            w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            self.weights[name] = Tensor(w.astype(self.dtype), requires_grad=True)
            out = shape[0]
            self.biases[name] = Tensor(np.zeros(out, self.dtype), requires_grad=True) if layer.bias else None
        self.input_shape = spec.input_shape

    def parameters(self) -> List[Tensor]:
        params = []
        for name in self.weights:
            params.append(self.weights[name])
            if self.biases[name] is not None:
                params.append(self.biases[name])
        return params

    def forward(self, x, weights: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        x = ad.reshape(x, (x.shape[0],) + self.input_shape)
        weights = weights or {}
        for name, layer in zip(self.spec.names, self.spec.layers):
            if isinstance(layer, Linear):
                x = ad.linear(x, weights.get(name, self.weights[name]))
                if self.biases[name] is not None:
                    x = ad.bias_add(x, self.biases[name])
            elif isinstance(layer, Conv2d):
                x = ad.conv2d(x, weights.get(name, self.weights[name]), layer.stride, layer.padding)
                if self.biases[name] is not None:
                    x = ad.bias_add(x, self.biases[name])
            elif isinstance(layer, ReLU):
                x = ad.relu(x)
            elif isinstance(layer, Flatten):
                x = ad.reshape(x, (x.shape[0], -1))
        return x

    def predict(self, x, weights: Optional[Mapping[str, Tensor]] = None, batch_size: int = 1000) -> np.ndarray:
        preds = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                preds.append(self.forward(x[i:i + batch_size], weights).data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=int)

    def accuracy(self, x, y, weights: Optional[Mapping[str, Tensor]] = None) -> float:
        if len(y) == 0:
            return 0.0
        return float(np.mean(self.predict(x, weights) == np.asarray(y)))

    def state(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.weights:
            out[f"{name}.weight"] = self.weights[name].data.copy()
            if self.biases[name] is not None:
                out[f"{name}.bias"] = self.biases[name].data.copy()
        return out

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for key, value in state.items():
            name, kind = key.rsplit(".", 1)
            target = self.weights[name] if kind == "weight" else self.biases[name]
            if target is None or target.shape != tuple(value.shape):
                raise ShapeError(f"state entry {key} does not match the model")
            target.data = np.array(value, dtype=self.dtype)
