"""Server-side aggregation strategies.

Every strategy turns the clients' locally trained weight sets into a new
server model and an :class:`AggregatorDirective`. Strategies that retrain
between layers (FedMA-lite, FedDist) call back into the engine through a
``retrain(arch, start_weights, sub_round)`` callable, where ``arch`` marks
the layers to keep frozen; without a callback the sub-round is recorded in
the directive but no training happens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .distance import DistanceMatrix, distance_matrix, neuron_matrix, pairwise_distance
from .nn import LayerKind, ModelArchitecture, ShapeError, WeightSet, grow_layer

__all__ = [
    "AggregatorDirective",
    "DistanceMatrix",
    "FedAvg",
    "FedDist",
    "FedMA",
    "FedPer",
    "PenaltyPolicy",
    "SubRound",
    "fedavg",
    "feddist",
    "fedma_lite",
    "fedper",
    "hungarian",
    "make_strategy",
    "pairwise_distance",
]


@dataclass(frozen=True)
class SubRound:
    """One layer-wise retraining step inside a communication round."""

    layer: int
    frozen: tuple
    retrain: tuple


@dataclass
class AggregatorDirective:
    server_weights: WeightSet
    arch: ModelArchitecture
    overwrite: frozenset  # layers clients take from the server at the next broadcast
    client_weights: list  # client models at the end of aggregation, shaped like ``arch``
    freeze_plan: list = field(default_factory=list)
    added_units: dict = field(default_factory=dict)
    distances: list = field(default_factory=list)
    has_global_model: bool = True


@dataclass(frozen=True)
class PenaltyPolicy:
    """Round-indexed addition to the FedDist growth threshold."""

    kind: str = "linear"
    coefficient: float = 2e-4  # penalty(50) ~ initial hidden-layer mean distance on synthetic data

    def __post_init__(self):
        if self.kind not in {"linear", "none"}:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if not self.coefficient >= 0:
            raise ValueError("penalty coefficient must be >= 0")

    def __call__(self, t: int) -> float:
        value = self.coefficient * t if self.kind == "linear" else 0.0
        if not math.isfinite(value):
            raise ValueError(f"penalty({t}) is not finite")
        return value


def _check_same_shapes(client_weights, layers=None):
    if not client_weights:
        raise ValueError("no client weights to aggregate")
    ref = client_weights[0]
    idx = range(ref.layer_count) if layers is None else layers
    for k, w in enumerate(client_weights[1:], start=1):
        if w.layer_count != ref.layer_count:
            raise ShapeError(f"client {k} has {w.layer_count} layers, client 0 has {ref.layer_count}")
        for i in idx:
            a, b = ref.weights[i], w.weights[i]
            if (a is None) != (b is None) or (a is not None and (
                    a.shape != b.shape or ref.biases[i].shape != w.biases[i].shape)):
                raise ShapeError(f"client {k} does not match client 0", i)


def _weighted_mean(arrays, coeffs):
    # Anchored on the first array: sum_k c_k a_k = a_0 + sum_k c_k (a_k - a_0)
    # since the coefficients sum to one. Agreeing clients then average exactly.
    base = np.asarray(arrays[0], dtype=np.float64)
    acc = base.copy()
    for a, c in zip(arrays[1:], coeffs[1:]):
        acc += c * (a - base)
    return acc


def _coefficients(n):
    n = np.asarray(n, dtype=np.float64)
    total = n.sum()
    if not total > 0 or (n < 0).any():
        raise ValueError("sample counts must be non-negative with a positive sum")
    return n / total


def _average_layers(client_weights, n, layers, into: WeightSet) -> None:
    coeffs = _coefficients(n)
    for i in layers:
        if client_weights[0].weights[i] is None:
            continue
        into.weights[i] = _weighted_mean([w.weights[i] for w in client_weights], coeffs)
        into.biases[i] = _weighted_mean([w.biases[i] for w in client_weights], coeffs)


def fedavg(client_weights, n) -> WeightSet:
    """Coordinate-wise average weighted by sample counts, in client order."""
    client_weights = list(client_weights)
    if len(client_weights) != len(n):
        raise ValueError("one sample count per client is required")
    _check_same_shapes(client_weights)
    out = WeightSet([None] * client_weights[0].layer_count, [None] * client_weights[0].layer_count)
    _average_layers(client_weights, n, range(out.layer_count), out)
    return out


def apply_overwrite(client_w: WeightSet, server_w: WeightSet, layers) -> WeightSet:
    """Client copy with the given layers replaced by the server's."""
    out = client_w.copy()
    for i in layers:
        if server_w.weights[i] is not None:
            out.weights[i] = server_w.weights[i].copy()
            out.biases[i] = server_w.biases[i].copy()
    return out


def fedper(arch: ModelArchitecture, client_weights, n, base_layer_count: int,
           server_w: WeightSet | None = None) -> AggregatorDirective:
    """Average the lowest ``base_layer_count`` layers; the rest stay on the clients."""
    if not 1 <= base_layer_count < len(arch):
        raise ValueError(f"base_layer_count must lie in [1, {len(arch) - 1}], got {base_layer_count}")
    client_weights = list(client_weights)
    base = list(range(base_layer_count))
    _check_same_shapes(client_weights, base)
    if server_w is None:
        out = WeightSet(
            [None if w is None else np.zeros_like(w) for w in client_weights[0].weights],
            [None if b is None else np.zeros_like(b) for b in client_weights[0].biases],
        )
    else:
        out = server_w.copy()
    _average_layers(client_weights, n, base, out)
    return AggregatorDirective(
        server_weights=out,
        arch=arch,
        overwrite=frozenset(i for i in base if arch.layers[i].has_weights),
        client_weights=[w.copy() for w in client_weights],
        has_global_model=False,
    )


def hungarian(cost) -> np.ndarray:
    """Minimum-cost assignment; returns the column chosen for every row.

    Accepts rectangular matrices. With more rows than columns, only as many
    rows as columns are assigned and the rest get -1.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = cost.shape
    if rows == 0 or cols == 0:
        return np.full(rows, -1, dtype=np.int64)
    if rows <= cols:
        return kernels.linear_sum_assignment(cost)
    row_of_col = kernels.linear_sum_assignment(np.ascontiguousarray(cost.T))
    out = np.full(rows, -1, dtype=np.int64)
    out[row_of_col] = np.arange(cols)
    return out


def _unit_shape(arch, layer):
    return arch.param_shape(layer)[0][1:]


def _split_neurons(rows, unit_shape):
    g = rows.shape[0]
    return rows[:, :-1].reshape((g,) + tuple(unit_shape)).copy(), rows[:, -1].copy()


def _remap_fan_in(arch: ModelArchitecture, w: WeightSet, layer: int, assign, width: int) -> np.ndarray:
    """Next-layer weights with input unit ``c`` moved to position ``assign[c]``.

    Positions that no old unit maps to get zero weights.
    """
    j = arch.next_weighted(layer)
    wj = w.weights[j]
    assign = np.asarray(assign)
    if arch.layers[j].kind is LayerKind.CONV1D:
        out = np.zeros((wj.shape[0], width, wj.shape[2]))
        out[:, assign, :] = wj
        return out
    inp = arch.input_shape_of(j)
    if inp[0] == "seq":
        t = inp[2]
        blocks = wj.reshape(wj.shape[0], -1, t)
        out = np.zeros((wj.shape[0], width, t))
        out[:, assign, :] = blocks
        return out.reshape(wj.shape[0], width * t)
    out = np.zeros((wj.shape[0], width))
    out[:, assign] = wj
    return out


def _retrain(retrain, arch, starts, layer):
    weighted = arch.weighted_layers()
    frozen = tuple(i for i in weighted if i <= layer)
    sub = SubRound(layer, frozen, tuple(i for i in weighted if i > layer))
    if retrain is None:
        return sub, starts
    trained = retrain(arch.with_frozen(frozen), starts, sub)
    if len(trained) != len(starts):
        raise RuntimeError("retrain callback returned the wrong number of clients")
    return sub, list(trained)


def fedma_lite(arch: ModelArchitecture, client_weights, n, epsilon: float | None = None,
               retrain=None) -> AggregatorDirective:
    """Layer-wise matched averaging with Hungarian assignment on neuron distances.

    For each hidden layer, lowest first, client neurons are matched to a
    running set of global neurons (seeded by client 0). Matched neurons are
    averaged weighted by sample count; a neuron whose match cost exceeds
    ``epsilon`` (default: mean + 3 std of that client's match costs) becomes
    a new global neuron. Clients then adopt the global layer, remap their
    next layer's inputs, and retrain the layers above before the next layer
    is matched. The output layer is a plain weighted average.
    """
    client_weights = [w.copy() for w in client_weights]
    if len(client_weights) < 2:
        raise ValueError("fedma_lite needs at least 2 clients")
    if len(client_weights) != len(n):
        raise ValueError("one sample count per client is required")
    _check_same_shapes(client_weights)
    n = [float(v) for v in n]
    original = arch.units()
    weighted = arch.weighted_layers()
    plan = []
    server = None
    for layer in weighted[:-1]:
        unit_shape = _unit_shape(arch, layer)
        tables = [neuron_matrix(w.weights[layer], w.biases[layer]) for w in client_weights]
        sums = [row * n[0] for row in tables[0]]
        mass = [n[0]] * len(sums)
        assigns = [np.arange(len(tables[0]))]
        for k in range(1, len(tables)):
            current = np.stack([s / m for s, m in zip(sums, mass)])
            cost = kernels.cost_matrix(np.ascontiguousarray(tables[k]), current)
            if not np.isfinite(cost).all():
                raise ValueError(f"layer {layer}: non-finite matching cost for client {k}")
            col = hungarian(cost)
            if (col < 0).any():
                raise ValueError(f"layer {layer}: assignment infeasible for client {k}")
            matched = cost[np.arange(len(col)), col]
            eps = epsilon if epsilon is not None else matched.mean() + 3.0 * matched.std()
            assign = np.empty(len(col), dtype=np.int64)
            for c, g in enumerate(col):
                if matched[c] > eps:
                    sums.append(tables[k][c] * n[k])
                    mass.append(n[k])
                    assign[c] = len(sums) - 1
                else:
                    sums[g] = sums[g] + tables[k][c] * n[k]
                    mass[g] += n[k]
                    assign[c] = g
            assigns.append(assign)
        global_rows = np.stack([s / m for s, m in zip(sums, mass)])
        gw, gb = _split_neurons(global_rows, unit_shape)
        width = len(global_rows)
        grown = arch.replace_layer(layer, units=width)
        j = arch.next_weighted(layer)
        starts = []
        for w, assign in zip(client_weights, assigns):
            adapted = w.copy()
            adapted.weights[j] = _remap_fan_in(arch, w, layer, assign, width)
            adapted.weights[layer] = gw.copy()
            adapted.biases[layer] = gb.copy()
            if server is not None:
                for i in weighted:
                    if i >= layer:
                        break
                    adapted.weights[i] = server.weights[i].copy()
                    adapted.biases[i] = server.biases[i].copy()
            adapted.check(grown)
            starts.append(adapted)
        arch = grown
        sub, client_weights = _retrain(retrain, arch, starts, layer)
        plan.append(sub)
        server = WeightSet(list(client_weights[0].weights), list(client_weights[0].biases)).copy()
        server.weights[layer], server.biases[layer] = gw, gb
        _average_layers(client_weights, n, [i for i in weighted if i > layer], server)

    if server is None:
        server = fedavg(client_weights, n)
    else:
        _average_layers(client_weights, n, [weighted[-1]], server)
    server.check(arch)
    added = {i: arch.units()[i] - original[i] for i in weighted if arch.units()[i] != original[i]}
    return AggregatorDirective(
        server_weights=server,
        arch=arch.with_frozen(()),
        overwrite=frozenset(weighted),
        client_weights=client_weights,
        freeze_plan=plan,
        added_units=added,
    )


def feddist(arch: ModelArchitecture, client_weights, n, t: int,
            penalty: PenaltyPolicy | None = None, trigger: str = "individual",
            multiplicity: str = "farthest", retrain=None) -> AggregatorDirective:
    """Weighted average plus growth of neurons that diverge across clients.

    After averaging, every hidden layer (lowest first) is scanned: the
    distance of each client neuron to the averaged neuron at the same index
    is compared with ``3 * std + mean + penalty(t)`` of that neuron's
    distances across clients. With ``trigger="individual"`` a neuron grows
    the layer when any single client exceeds the threshold (strictly);
    ``trigger="mean"`` compares the mean distance instead. The appended
    neuron copies the farthest client's neuron (``multiplicity="all"``
    appends every offender). Growth freezes the layer and everything below
    it on the clients, retrains the layers above, and re-averages them
    before the next layer is scanned.
    """
    if t < 1:
        raise ValueError("round index t must be >= 1")
    if trigger not in {"individual", "mean"}:
        raise ValueError(f"unknown trigger {trigger!r}")
    if multiplicity not in {"farthest", "all"}:
        raise ValueError(f"unknown multiplicity {multiplicity!r}")
    penalty = penalty or PenaltyPolicy()
    extra = penalty(t)
    client_weights = [w.copy() for w in client_weights]
    server = fedavg(client_weights, n)
    server.check(arch)
    weighted = arch.weighted_layers()
    plan, added, tables = [], {}, []
    for layer in weighted[:-1]:
        dm = distance_matrix(layer, server, client_weights)
        tables.append(dm)
        threshold = 3.0 * dm.std + dm.mean + extra
        picks = []
        if trigger == "individual":
            over = dm.entries > threshold[None, :]
            for d in np.flatnonzero(over.any(axis=0)):
                if multiplicity == "farthest":
                    picks.append((int(np.argmax(dm.entries[:, d])), int(d)))
                else:
                    picks.extend((int(k), int(d)) for k in np.flatnonzero(over[:, d]))
        else:
            for d in np.flatnonzero(dm.mean > threshold):
                picks.append((int(np.argmax(dm.entries[:, d])), int(d)))
        if not picks:
            continue
        new_units = [
            (client_weights[k].weights[layer][d].ravel(), client_weights[k].biases[layer][d])
            for k, d in picks
        ]
        grown, server = grow_layer(arch, server, layer, new_units)
        frozen_layers = [i for i in weighted if i <= layer]
        starts = []
        for w in client_weights:
            _, padded = grow_layer(arch, w, layer, new_units)
            starts.append(apply_overwrite(padded, server, frozen_layers))
        arch = grown
        added[layer] = added.get(layer, 0) + len(new_units)
        sub, client_weights = _retrain(retrain, arch, starts, layer)
        plan.append(sub)
        _average_layers(client_weights, n, [i for i in weighted if i > layer], server)
    server.check(arch)
    return AggregatorDirective(
        server_weights=server,
        arch=arch.with_frozen(()),
        overwrite=frozenset(weighted),
        client_weights=client_weights,
        freeze_plan=plan,
        added_units=added,
        distances=tables,
    )


class Strategy:
    """Engine-facing wrapper around one aggregation function."""

    name = "base"
    has_global_model = True

    def broadcast_layers(self, arch: ModelArchitecture) -> list[int]:
        return arch.weighted_layers()

    def uplink_layers(self, arch: ModelArchitecture) -> list[int]:
        return arch.weighted_layers()

    def aggregate(self, arch, server_w, client_weights, n, t, retrain=None) -> AggregatorDirective:
        raise NotImplementedError

    def params(self) -> dict:
        return {}


class FedAvg(Strategy):
    name = "fedavg"

    def aggregate(self, arch, server_w, client_weights, n, t, retrain=None):
        return AggregatorDirective(
            server_weights=fedavg(client_weights, n),
            arch=arch,
            overwrite=frozenset(arch.weighted_layers()),
            client_weights=[w.copy() for w in client_weights],
        )


class FedPer(Strategy):
    name = "fedper"
    has_global_model = False

    def __init__(self, base_layers: int | None = None):
        self.base_layers = base_layers

    def base_count(self, arch: ModelArchitecture) -> int:
        if self.base_layers is not None:
            return self.base_layers
        # default: everything below the first dense layer (the feature extractor)
        for i, spec in enumerate(arch.layers):
            if spec.kind in (LayerKind.DENSE, LayerKind.SOFTMAX):
                return i if i > 0 else len(arch) - 1
        return len(arch) - 1  # pragma: no cover - softmax always present

    def broadcast_layers(self, arch):
        return [i for i in arch.weighted_layers() if i < self.base_count(arch)]

    uplink_layers = broadcast_layers

    def aggregate(self, arch, server_w, client_weights, n, t, retrain=None):
        return fedper(arch, client_weights, n, self.base_count(arch), server_w)

    def params(self):
        return {"base_layers": self.base_layers}


class FedMA(Strategy):
    name = "fedma"

    def __init__(self, epsilon: float | None = None):
        self.epsilon = epsilon

    def aggregate(self, arch, server_w, client_weights, n, t, retrain=None):
        if len(client_weights) < 2:
            return FedAvg().aggregate(arch, server_w, client_weights, n, t)
        return fedma_lite(arch, client_weights, n, self.epsilon, retrain)

    def params(self):
        return {"epsilon": self.epsilon}


class FedDist(Strategy):
    name = "feddist"

    def __init__(self, penalty: PenaltyPolicy | None = None, trigger: str = "individual",
                 multiplicity: str = "farthest"):
        self.penalty = penalty or PenaltyPolicy()
        self.trigger = trigger
        self.multiplicity = multiplicity

    def aggregate(self, arch, server_w, client_weights, n, t, retrain=None):
        return feddist(arch, client_weights, n, t, self.penalty, self.trigger,
                       self.multiplicity, retrain)

    def params(self):
        return {
            "penalty": self.penalty.kind,
            "penalty_coefficient": self.penalty.coefficient,
            "trigger": self.trigger,
            "multiplicity": self.multiplicity,
        }


STRATEGIES = {cls.name: cls for cls in (FedAvg, FedPer, FedMA, FedDist)}


def make_strategy(name: str, **params) -> Strategy:
    """Build a strategy by config name with its parameter table."""
    try:
        cls = STRATEGIES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}") from None
    if cls is FedDist:
        kind = params.pop("penalty", "linear")
        coefficient = params.pop("penalty_coefficient", PenaltyPolicy.coefficient)
        return FedDist(PenaltyPolicy(kind, float(coefficient)), **params)
    return cls(**params)
