"""Minimal feed-forward network engine.

Supported layers: 1-D convolution (valid padding, stride 1, ReLU), 1-D max
pooling (stride = pool length), dense (ReLU, optional dropout) and a final
dense softmax classifier. Activations are kept channels-first internally,
``(N, channels, time)``, and flattened channel-major before a dense layer,
so units appended to a convolution show up as trailing dense inputs.

Input batches use the dataset layout ``(N, window_length, channels)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .metrics import ConfusionMatrix


class ShapeError(ValueError):
    """A tensor or architecture shape does not fit where it is used."""

    def __init__(self, message: str, layer: int | None = None):
        self.layer = layer
        prefix = f"layer {layer}: " if layer is not None else ""
        super().__init__(prefix + message)


class TrainingError(RuntimeError):
    pass


class LayerKind(str, enum.Enum):
    CONV1D = "Conv1D"
    MAXPOOL1D = "MaxPool1D"
    DENSE = "Dense"
    SOFTMAX = "Softmax"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    units: int = 0
    kernel: int = 1
    frozen: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.has_weights and self.units < 1:
            raise ValueError(f"{self.kind.value} layer needs units >= 1, got {self.units}")
        if self.kernel < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")

    @property
    def has_weights(self) -> bool:
        return self.kind is not LayerKind.MAXPOOL1D


@dataclass(frozen=True)
class ModelArchitecture:
    layers: tuple
    input_shape: tuple  # (window_length, channels)
    _in_shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        length, channels = (int(v) for v in self.input_shape)
        object.__setattr__(self, "input_shape", (length, channels))
        if len(layers) < 2:
            raise ShapeError(f"need at least 2 layers, got {len(layers)}")
        kinds = [spec.kind for spec in layers]
        if kinds.count(LayerKind.SOFTMAX) != 1 or kinds[-1] is not LayerKind.SOFTMAX:
            raise ShapeError("exactly one Softmax layer is required, and it must be last")

        shapes = []
        cur = ("seq", channels, length)
        for i, spec in enumerate(layers):
            shapes.append(cur)
            if spec.kind is LayerKind.CONV1D:
                if cur[0] != "seq":
                    raise ShapeError("Conv1D needs a sequence input, got a flat vector", i)
                t_out = cur[2] - spec.kernel + 1
                if t_out < 1:
                    raise ShapeError(f"kernel {spec.kernel} longer than input length {cur[2]}", i)
                cur = ("seq", spec.units, t_out)
            elif spec.kind is LayerKind.MAXPOOL1D:
                if cur[0] != "seq":
                    raise ShapeError("MaxPool1D needs a sequence input, got a flat vector", i)
                t_out = cur[2] // spec.kernel
                if t_out < 1:
                    raise ShapeError(f"pool {spec.kernel} longer than input length {cur[2]}", i)
                cur = ("seq", cur[1], t_out)
            else:
                cur = ("flat", spec.units)
        object.__setattr__(self, "_in_shapes", tuple(shapes))

    def __len__(self):
        return len(self.layers)

    @property
    def class_count(self) -> int:
        return self.layers[-1].units

    def input_shape_of(self, index: int) -> tuple:
        return self._in_shapes[index]

    def param_shape(self, index: int):
        """``(weight_shape, bias_shape)`` of a layer, or None for pooling."""
        spec = self.layers[index]
        inp = self._in_shapes[index]
        if spec.kind is LayerKind.CONV1D:
            return (spec.units, inp[1], spec.kernel), (spec.units,)
        if spec.kind is LayerKind.MAXPOOL1D:
            return None
        width = inp[1] * inp[2] if inp[0] == "seq" else inp[1]
        return (spec.units, width), (spec.units,)

    def weighted_layers(self) -> list[int]:
        return [i for i, spec in enumerate(self.layers) if spec.has_weights]

    def next_weighted(self, index: int) -> int | None:
        for j in range(index + 1, len(self.layers)):
            if self.layers[j].has_weights:
                return j
        return None

    def replace_layer(self, index: int, **changes) -> "ModelArchitecture":
        layers = list(self.layers)
        layers[index] = replace(layers[index], **changes)
        return ModelArchitecture(tuple(layers), self.input_shape)

    def with_frozen(self, indices) -> "ModelArchitecture":
        """Copy with exactly the given layers marked frozen."""
        indices = set(indices)
        layers = tuple(replace(spec, frozen=i in indices) for i, spec in enumerate(self.layers))
        return ModelArchitecture(layers, self.input_shape)

    def units(self) -> list[int]:
        return [spec.units if spec.has_weights else 0 for spec in self.layers]

    def describe(self) -> str:
        """Compact notation, e.g. ``196-16C_4M_1024D`` (softmax omitted)."""
        tokens = []
        for spec in self.layers:
            if spec.kind is LayerKind.CONV1D:
                tokens.append(f"{spec.units}-{spec.kernel}C")
            elif spec.kind is LayerKind.MAXPOOL1D:
                tokens.append(f"{spec.kernel}M")
            elif spec.kind is LayerKind.DENSE:
                tokens.append(f"{spec.units}D")
        return "_".join(tokens)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [
                {"kind": s.kind.value, "units": s.units, "kernel": s.kernel, "frozen": s.frozen}
                for s in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArchitecture":
        layers = tuple(LayerSpec(**spec) for spec in d["layers"])
        return cls(layers, tuple(d["input_shape"]))


@dataclass
class WeightSet:
    """Per-layer weights and biases; pooling layers hold None."""

    weights: list
    biases: list

    @property
    def layer_count(self) -> int:
        return len(self.weights)

    def copy(self) -> "WeightSet":
        return WeightSet(
            [None if a is None else a.copy() for a in self.weights],
            [None if a is None else a.copy() for a in self.biases],
        )

    def check(self, arch: ModelArchitecture) -> None:
        if self.layer_count != len(arch) or len(self.biases) != len(arch):
            raise ShapeError(f"weight set has {self.layer_count} layers, architecture has {len(arch)}")
        for i in range(len(arch)):
            expected = arch.param_shape(i)
            w, b = self.weights[i], self.biases[i]
            if expected is None:
                if w is not None or b is not None:
                    raise ShapeError("pooling layer must not carry weights", i)
                continue
            if w is None or b is None:
                raise ShapeError("missing weights", i)
            if w.shape != expected[0] or b.shape != expected[1]:
                raise ShapeError(
                    f"weights {w.shape}/{b.shape} do not match expected {expected[0]}/{expected[1]}", i
                )

    def identical(self, other: "WeightSet", layers=None) -> bool:
        """Bit-for-bit equality, optionally restricted to some layers."""
        if self.layer_count != other.layer_count:
            return False
        idx = range(self.layer_count) if layers is None else layers
        for i in idx:
            for a, b in ((self.weights[i], other.weights[i]), (self.biases[i], other.biases[i])):
                if a is None or b is None:
                    if a is not b:
                        return False
                    continue
                if a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
                    return False
        return True

    def max_abs_diff(self, other: "WeightSet") -> float:
        worst = 0.0
        for pairs in (zip(self.weights, other.weights), zip(self.biases, other.biases)):
            for a, b in pairs:
                if a is None:
                    continue
                if a.shape != b.shape:
                    return math.inf
                worst = max(worst, float(np.max(np.abs(a - b))) if a.size else 0.0)
        return worst


@dataclass(frozen=True)
class TrainConfig:
    local_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 0.01
    dropout_rate: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


def init_weights(arch: ModelArchitecture, seed: int) -> WeightSet:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i, spec in enumerate(arch.layers):
        shapes = arch.param_shape(i)
        if shapes is None:
            weights.append(None)
            biases.append(None)
            continue
        w_shape, b_shape = shapes
        if spec.kind is LayerKind.CONV1D:
            fan_in = w_shape[1] * w_shape[2]
            fan_out = w_shape[0] * w_shape[2]
        else:
            fan_in, fan_out = w_shape[1], w_shape[0]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=w_shape))
        biases.append(np.zeros(b_shape))
    return WeightSet(weights, biases)


def _unpack(data):
    if hasattr(data, "frames"):
        return data.frames, data.labels
    x, y = data
    return x, y


def _to_internal(arch: ModelArchitecture, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    length, channels = arch.input_shape
    if x.ndim == 2 and x.shape[1] == length * channels:
        x = x.reshape(-1, length, channels)
    if x.ndim != 3 or x.shape[1:] != (length, channels):
        raise ShapeError(f"input batch {x.shape} does not match (N, {length}, {channels})", 0)
    return np.ascontiguousarray(x.transpose(0, 2, 1))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(arch, w, x, dropout=0.0, rng=None):
    cache = []
    h = x
    n = x.shape[0]
    for i, spec in enumerate(arch.layers):
        kind = spec.kind
        if kind is LayerKind.CONV1D:
            z = kernels.conv1d_forward(h, w.weights[i], w.biases[i])
            cache.append((h, z))
            h = np.maximum(z, 0.0)
        elif kind is LayerKind.MAXPOOL1D:
            out, idx = kernels.maxpool1d_forward(h, spec.kernel)
            cache.append((idx, h.shape[2]))
            h = out
        else:
            in_shape = h.shape
            hf = h.reshape(n, -1)
            z = hf @ w.weights[i].T + w.biases[i]
            if kind is LayerKind.SOFTMAX:
                cache.append((hf, in_shape))
                h = z
                break
            mask = None
            a = np.maximum(z, 0.0)
            if dropout > 0.0 and rng is not None:
                mask = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
                a = a * mask
            cache.append((hf, in_shape, z, mask))
            h = a
    return h, cache


def _backward(arch, w, cache, logits, labels, stop):
    """Gradients for every weighted layer at index >= ``stop``."""
    n = logits.shape[0]
    probs = _softmax(logits)
    d = probs
    d[np.arange(n), labels] -= 1.0
    d /= n
    grads = [None] * len(arch)
    for i in range(len(arch) - 1, stop - 1, -1):
        spec = arch.layers[i]
        kind = spec.kind
        if kind is LayerKind.MAXPOOL1D:
            idx, t_in = cache[i]
            d = kernels.maxpool1d_backward(np.ascontiguousarray(d), idx, spec.kernel, t_in)
            continue
        if kind is LayerKind.CONV1D:
            h, z = cache[i]
            d = d * (z > 0)
            gx, gw, gb = kernels.conv1d_backward(h, w.weights[i], d, i > stop)
            grads[i] = (gw, gb)
            d = gx
            continue
        if kind is LayerKind.SOFTMAX:
            hf, in_shape = cache[i]
        else:
            hf, in_shape, z, mask = cache[i]
            if mask is not None:
                d = d * mask
            d = d * (z > 0)
        grads[i] = (d.T @ hf, d.sum(axis=0))
        if i > stop:
            d = (d @ w.weights[i]).reshape(in_shape)
    return grads


def _cross_entropy(logits, labels) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(logsum - z[np.arange(len(labels)), labels]))


def forward(arch: ModelArchitecture, w: WeightSet, batch) -> np.ndarray:
    """Class probabilities, one row per sample (inference mode, no dropout)."""
    w.check(arch)
    logits, _ = _forward(arch, w, _to_internal(arch, batch))
    return _softmax(logits)


def loss_and_gradients(arch: ModelArchitecture, w: WeightSet, batch, labels):
    """Mean cross-entropy and its gradient for every weighted layer, no dropout.

    Returns ``(loss, grads)`` with ``grads[i] = (dW, db)`` or None for pooling.
    """
    w.check(arch)
    labels = np.asarray(labels, dtype=np.int64)
    logits, cache = _forward(arch, w, _to_internal(arch, batch))
    loss = _cross_entropy(logits, labels)
    return loss, _backward(arch, w, cache, logits, labels, 0)


def loss(arch: ModelArchitecture, w: WeightSet, batch, labels) -> float:
    logits, _ = _forward(arch, w, _to_internal(arch, batch))
    return _cross_entropy(logits, np.asarray(labels, dtype=np.int64))


def train_local(arch: ModelArchitecture, w: WeightSet, train_data, cfg: TrainConfig) -> WeightSet:
    """Mini-batch SGD over ``cfg.local_epochs`` epochs; frozen layers are untouched."""
    x, y = _unpack(train_data)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot train on an empty dataset")
    w.check(arch)
    if y.min() < 0 or y.max() >= arch.class_count:
        raise ValueError(f"labels outside [0, {arch.class_count})")
    trainable = [i for i in arch.weighted_layers() if not arch.layers[i].frozen]
    out = w.copy()
    if not trainable:
        return out
    stop = trainable[0]
    xi = _to_internal(arch, x)
    n = len(y)
    rng = np.random.default_rng(cfg.rng_seed)
    lr = cfg.learning_rate
    for epoch in range(cfg.local_epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits, cache = _forward(arch, out, xi[idx], cfg.dropout_rate, rng)
            batch_loss = _cross_entropy(logits, y[idx])
            if not math.isfinite(batch_loss):
                norms = {
                    i: float(np.abs(out.weights[i]).max()) for i in arch.weighted_layers()
                }
                raise TrainingError(
                    f"non-finite loss {batch_loss} at epoch {epoch} batch {b} "
                    f"(lr={lr}, max |w| per layer={norms})"
                )
            grads = _backward(arch, out, cache, logits, y[idx], stop)
            for i in trainable:
                gw, gb = grads[i]
                out.weights[i] -= lr * gw
                out.biases[i] -= lr * gb
    return out


def predict(arch: ModelArchitecture, w: WeightSet, batch, batch_size: int = 4096) -> np.ndarray:
    w.check(arch)
    xi = _to_internal(arch, batch)
    preds = [
        np.argmax(_forward(arch, w, xi[s:s + batch_size])[0], axis=1)
        for s in range(0, xi.shape[0], batch_size)
    ]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(arch: ModelArchitecture, w: WeightSet, test_data) -> ConfusionMatrix:
    x, y = _unpack(test_data)
    return ConfusionMatrix.from_predictions(y, predict(arch, w, x), arch.class_count)


def grow_layer(arch: ModelArchitecture, w: WeightSet, layer_index: int, new_units):
    """Append units to a Conv1D or Dense layer.

    ``new_units`` is a sequence of ``(incoming_weights, bias)``. The next
    weighted layer receives zero-valued connections from the new units, so
    the network computes the same function right after growth.
    """
    spec = arch.layers[layer_index]
    if spec.kind is LayerKind.SOFTMAX:
        raise ShapeError("the softmax layer cannot grow", layer_index)
    if spec.kind is LayerKind.MAXPOOL1D:
        raise ShapeError("a pooling layer has no units to grow", layer_index)
    w.check(arch)
    new_units = list(new_units)
    if not new_units:
        return arch, w.copy()
    m = len(new_units)
    unit_shape = arch.param_shape(layer_index)[0][1:]
    fan_in = int(np.prod(unit_shape))
    rows, bias = [], []
    for vec, b in new_units:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != fan_in:
            raise ShapeError(f"new unit has {vec.size} incoming weights, layer expects {fan_in}", layer_index)
        rows.append(vec.reshape(unit_shape))
        bias.append(float(b))

    grown = arch.replace_layer(layer_index, units=spec.units + m)
    out = w.copy()
    out.weights[layer_index] = np.concatenate([w.weights[layer_index], np.stack(rows)], axis=0)
    out.biases[layer_index] = np.concatenate([w.biases[layer_index], np.asarray(bias)])

    j = arch.next_weighted(layer_index)
    wj = w.weights[j]
    if arch.layers[j].kind is LayerKind.CONV1D:
        pad = np.zeros((wj.shape[0], m, wj.shape[2]))
        out.weights[j] = np.concatenate([wj, pad], axis=1)
    else:
        inp = arch.input_shape_of(j)
        extra = m * inp[2] if inp[0] == "seq" else m
        out.weights[j] = np.concatenate([wj, np.zeros((wj.shape[0], extra))], axis=1)
    out.check(grown)
    return grown, out
