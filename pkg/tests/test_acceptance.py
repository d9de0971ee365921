"""Acceptance criteria, one marked group per criterion.

The terminal summary prints a PASS/FAIL line for each criterion number.
"""
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from fedsim import aggregators, engine, runner
from fedsim.aggregators import FedAvg, FedDist, PenaltyPolicy, fedavg, fedma_lite, hungarian
from fedsim.config import config_from_dict
from fedsim.data import SynthSpec, WindowedDataset, global_test_set, synth_noniid
from fedsim.distance import neuron_matrix
from fedsim.engine import ClientState, EngineConfig, clients_from_partitions, evaluate_round, init_server, run_round
from fedsim.metrics import ConfusionMatrix, f1_per_class, macro_f1
from fedsim.nn import (
    LayerKind,
    LayerSpec,
    ModelArchitecture,
    TrainConfig,
    WeightSet,
    evaluate,
    forward,
    init_weights,
    loss,
    loss_and_gradients,
    train_local,
)
from fedsim.serialization import payload_nbytes

from conftest import conv_arch, dense_arch
from oracles import (
    brute_force_assignment,
    central_difference,
    f1_fractions,
    param_count,
    permute_hidden,
    weighted_average_loop,
)

criterion = pytest.mark.criterion


def _random_weightsets(rng, k):
    n_layers = int(rng.integers(1, 4))
    shapes = [tuple(int(s) for s in rng.integers(1, 6, size=rng.integers(1, 4))) for _ in range(n_layers)]
    sets = []
    for _ in range(k):
        ws = [rng.normal(scale=rng.uniform(0.1, 10), size=s) for s in shapes]
        bs = [rng.normal(size=s[0]) for s in shapes]
        sets.append(WeightSet(ws, bs))
    return sets


@criterion(1, "fedavg equals per-coordinate loop oracle")
def test_c01_fedavg_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(1, 9))
        sets = _random_weightsets(rng, k)
        n = [int(v) for v in rng.integers(1, 500, size=k)]
        got = fedavg(sets, n)
        for i in range(sets[0].layer_count):
            for attr in ("weights", "biases"):
                want = weighted_average_loop([getattr(s, attr)[i] for s in sets], n)
                worst = max(worst, float(np.abs(getattr(got, attr)[i] - want).max()))
    elapsed = time.perf_counter() - start
    print(f"c1 max abs diff {worst:.3e} in {elapsed:.2f}s")
    assert worst < 1e-12
    assert elapsed < 10


def _iid(k, seed=0, **kw):
    parts = synth_noniid(SynthSpec(n_clients=k, seed=seed, **kw))
    return clients_from_partitions(parts), global_test_set(parts)


@criterion(2, "FedDist behaves like FedAvg on IID clients")
def test_c02_feddist_degenerates_to_fedavg():
    arch = conv_arch(filters=8, kernel=3, pool=2, dense=16, classes=3, input_shape=(8, 2))
    cfg = EngineConfig(TrainConfig(), seed=11)
    a_clients, gt = _iid(5, seed=4)
    b_clients, _ = _iid(5, seed=4)
    a = init_server(arch, 2)
    b = init_server(arch, 2)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        a, ra = run_round(a, a_clients, FedAvg(), cfg, gt)
        b, rb = run_round(b, b_clients, FedDist(), cfg, gt)
        assert rb.arch_delta == [0] * len(arch)
        assert b.arch.units() == arch.units()
        worst = max(worst, a.weights.max_abs_diff(b.weights))
    elapsed = time.perf_counter() - start
    print(f"c2 max abs diff over 20 rounds {worst:.3e}, final F1 {rb.global_macro_f1:.4f}, {elapsed:.1f}s")
    assert worst < 1e-9
    assert elapsed < 300


GROWTH_TRAIN = TrainConfig(local_epochs=5, batch_size=32, learning_rate=0.05, dropout_rate=0.5)


def _outlier_run(offset, seed, rounds=5):
    clients, gt = _iid(11, seed=seed, mode="outlier", outlier_offset=offset)
    arch = dense_arch(hidden=(16,), classes=3, input_shape=(8, 2))
    server = init_server(arch, seed)
    strategy = FedDist(PenaltyPolicy("none", 0.0))
    added = []
    for _ in range(rounds):
        server, r = run_round(server, clients, strategy, EngineConfig(GROWTH_TRAIN, seed=seed), gt)
        added.append(sum(r.arch_delta))
    return added


class _Watch:
    """Wraps grow_layer and ClientTrainer.__call__ to check conservatism and freezing."""

    def __init__(self, monkeypatch):
        self.growths = 0
        self.growth_err = 0.0
        self.sub_rounds = 0
        self.frozen_ok = True
        self.probe = {}
        real_grow = aggregators.grow_layer
        real_call = engine.ClientTrainer.__call__

        def grow(arch, w, layer, new_units):
            grown, out = real_grow(arch, w, layer, new_units)
            x = self._probe(arch.input_shape)
            diff = float(np.abs(forward(arch, w, x) - forward(grown, out, x)).max())
            self.growth_err = max(self.growth_err, diff)
            self.growths += 1
            return grown, out

        def call(trainer, arch, starts, sub_round):
            before = [[(s.weights[i].tobytes(), s.biases[i].tobytes()) for i in sub_round.frozen] for s in starts]
            trained = real_call(trainer, arch, starts, sub_round)
            for snap, w in zip(before, trained):
                after = [(w.weights[i].tobytes(), w.biases[i].tobytes()) for i in sub_round.frozen]
                self.frozen_ok &= snap == after
            self.sub_rounds += 1
            return trained

        monkeypatch.setattr(aggregators, "grow_layer", grow)
        monkeypatch.setattr(engine.ClientTrainer, "__call__", call)

    def _probe(self, shape):
        if shape not in self.probe:
            self.probe[shape] = np.random.default_rng(99).normal(size=(100, *shape))
        return self.probe[shape]


@criterion(3, "planted outlier triggers growth, zero offset does not")
@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1])
def test_c03_growth_trigger(seed):
    start = time.perf_counter()
    grown = _outlier_run(2.0, seed)
    flat = _outlier_run(0.0, seed)
    print(f"c3 seed {seed}: added per round with offset {grown}, without {flat}")
    assert sum(grown) >= 1
    assert sum(flat) == 0
    assert time.perf_counter() - start < 300


@criterion(4, "growth leaves the network function unchanged")
def test_c04_growth_conservatism_during_run(monkeypatch):
    watch = _Watch(monkeypatch)
    _outlier_run(2.0, 0, rounds=2)
    print(f"c4 {watch.growths} grow_layer calls, max output change {watch.growth_err:.3e}")
    assert watch.growths > 0
    assert watch.growth_err < 1e-9


@criterion(4, "growth leaves the network function unchanged")
@pytest.mark.parametrize("layer", [0, 2])
def test_c04_growth_conservatism_conv(layer):
    rng = np.random.default_rng(layer)
    arch = conv_arch(filters=4, kernel=3, pool=2, dense=6, input_shape=(10, 3))
    w = init_weights(arch, 5)
    fan_in = int(np.prod(arch.param_shape(layer)[0][1:]))
    units = [(rng.normal(size=fan_in) * 5, 3.0), (rng.normal(size=fan_in), -1.0)]
    grown, out = aggregators.grow_layer(arch, w, layer, units)
    x = rng.normal(size=(100, 10, 3))
    assert grown.units()[layer] == arch.units()[layer] + 2
    assert np.abs(forward(arch, w, x) - forward(grown, out, x)).max() < 1e-9


def _random_arch(rng):
    steps = int(rng.integers(6, 12))
    channels = int(rng.integers(1, 4))
    layers = []
    if rng.random() < 0.8:
        layers.append(LayerSpec(LayerKind.CONV1D, int(rng.integers(1, 4)), int(rng.integers(1, 4))))
        if rng.random() < 0.7:
            layers.append(LayerSpec(LayerKind.MAXPOOL1D, 0, int(rng.integers(1, 3))))
    for _ in range(int(rng.integers(1, 3))):
        layers.append(LayerSpec(LayerKind.DENSE, int(rng.integers(2, 6))))
    layers.append(LayerSpec(LayerKind.SOFTMAX, int(rng.integers(2, 5))))
    return ModelArchitecture(tuple(layers), (steps, channels))


def _relative_error(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


@criterion(5, "finite-difference gradient check")
@pytest.mark.parametrize("seed", range(10))
def test_c05_gradients(seed):
    rng = np.random.default_rng(500 + seed)
    arch = _random_arch(rng)
    w = init_weights(arch, seed)
    for i in arch.weighted_layers():
        w.biases[i] += rng.normal(scale=0.1, size=w.biases[i].shape)
    x = rng.normal(size=(4, *arch.input_shape))
    y = rng.integers(0, arch.class_count, size=4)
    _, grads = loss_and_gradients(arch, w, x, y)
    worst = 0.0
    for i in arch.weighted_layers():
        for got, target in ((grads[i][0], w.weights[i]), (grads[i][1], w.biases[i])):
            num = central_difference(lambda: loss(arch, w, x, y), target)
            worst = max(worst, _relative_error(got, num))
    print(f"c5 {arch.describe()} in={arch.input_shape} rel err {worst:.2e}")
    assert worst < 1e-4


class _Planted(FedDist):
    """FedDist that shifts one neuron of client 0 in every hidden layer before aggregating."""

    def __init__(self, shift):
        super().__init__(PenaltyPolicy("none", 0.0))
        self.shift = shift

    def aggregate(self, arch, server_w, client_weights, n, t, retrain=None):
        client_weights = [w.copy() for w in client_weights]
        w0 = client_weights[0]
        for i in arch.weighted_layers()[:-1]:
            w0.weights[i][0] += self.shift
            w0.biases[i][0] += self.shift
        return super().aggregate(arch, server_w, client_weights, n, t, retrain)


# conv -> pool -> dense -> dense -> softmax; three hidden weighted layers
SPEC_KINDS = ("C", "M", "D", "D", "S")
SPEC_KERNELS = (3, 2, 0, 0, 0)


def _growth_arch():
    return ModelArchitecture(
        (
            LayerSpec(LayerKind.CONV1D, 4, 3),
            LayerSpec(LayerKind.MAXPOOL1D, 0, 2),
            LayerSpec(LayerKind.DENSE, 6),
            LayerSpec(LayerKind.DENSE, 5),
            LayerSpec(LayerKind.SOFTMAX, 3),
        ),
        (8, 2),
    )


FORCED_TRAIN = TrainConfig(local_epochs=1, batch_size=32, learning_rate=0.01, dropout_rate=0.0)


def _forced_growth_rounds(rounds=2, k=12):
    clients, gt = _iid(k, seed=3)
    arch = _growth_arch()
    server = init_server(arch, 3)
    reports, archs = [], []
    for _ in range(rounds):
        archs.append(server.arch)
        server, r = run_round(server, clients, _Planted(5.0), EngineConfig(FORCED_TRAIN, seed=3), gt)
        reports.append(r)
    return archs, reports


def _payload(units):
    return 4 * sum(param_count(units, SPEC_KINDS, SPEC_KERNELS, (8, 2)))


@criterion(6, "frozen layers bit-identical across every sub-round")
def test_c06_freezing_contract(monkeypatch):
    watch = _Watch(monkeypatch)
    _, reports = _forced_growth_rounds(rounds=2)
    print(f"c6 {watch.sub_rounds} sub-rounds checked")
    assert watch.sub_rounds == sum(r.sub_rounds for r in reports) >= 6
    assert watch.frozen_ok


@criterion(7, "Hungarian assignment matches exhaustive search")
def test_c07_hungarian_exhaustive():
    rng = np.random.default_rng(7)
    mismatches = 0
    for trial in range(1000):
        r = int(rng.integers(1, 7))
        c = int(rng.integers(r, 7))
        if trial % 3 == 0:
            cost = rng.integers(0, 4, size=(r, c)).astype(float)  # ties
        else:
            cost = rng.uniform(0, 10, size=(r, c))
        col = hungarian(cost)
        want, best = brute_force_assignment(cost)
        got_cost = cost[np.arange(r), col].sum()
        if len(set(col.tolist())) != r or got_cost != pytest.approx(best, abs=1e-12):
            mismatches += 1
        elif trial % 3 != 0 and not np.array_equal(col, want):
            mismatches += 1
    assert mismatches == 0


@criterion(8, "permuted clients are matched back to the reference")
@pytest.mark.parametrize("seed", range(5))
def test_c08_permutation_recovery(seed):
    rng = np.random.default_rng(800 + seed)
    if seed % 2:
        arch = dense_arch(hidden=(6, 4), classes=3, input_shape=(5, 2))
    else:
        arch = conv_arch(filters=4, kernel=3, pool=2, dense=6, input_shape=(11, 2))
    ref = init_weights(arch, seed)
    hidden = arch.weighted_layers()[:-1]
    for i in hidden:
        ref.biases[i] += rng.normal(size=ref.biases[i].shape)
    clients = [ref.copy()] + [
        permute_hidden(arch, ref, {i: rng.permutation(arch.units()[i]) for i in hidden}) for _ in range(4)
    ]
    d = fedma_lite(arch, clients, [int(v) for v in rng.integers(1, 50, size=5)])
    assert d.added_units == {}
    assert d.arch.units() == arch.units()
    for i in arch.weighted_layers():
        got = neuron_matrix(d.server_weights.weights[i], d.server_weights.biases[i])
        want = neuron_matrix(ref.weights[i], ref.biases[i])
        assert np.abs(got - want).max() < 1e-9
    x = rng.normal(size=(20, *arch.input_shape))
    assert np.abs(forward(arch, d.server_weights, x) - forward(arch, ref, x)).max() < 1e-9


# (confusion matrix rows=true, hand-computed per-class F1, macro F1)
CONFUSIONS = [
    ([[5, 5], [0, 10]], ["2/3", "4/5"], "11/15"),
    ([[3, 0, 0], [0, 4, 0], [0, 0, 5]], ["1", "1", "1"], "1"),
    ([[4, 0, 0], [0, 6, 0], [0, 0, 0]], ["1", "1", "0"], "2/3"),
    ([[0, 2], [3, 0]], ["0", "0"], "0"),
    ([[7]], ["1"], "1"),
    ([[10, 0, 0], [10, 0, 0], [10, 0, 0]], ["1/2", "0", "0"], "1/6"),
    ([[2, 1, 0, 0], [1, 3, 1, 0], [0, 0, 0, 0], [0, 2, 0, 4]], ["2/3", "6/11", "0", "4/5"], "83/165"),
    ([[0, 0], [0, 0]], ["0", "0"], "0"),
    ([[1, 2, 3], [4, 5, 6], [7, 8, 9]], ["1/9", "1/3", "3/7"], "55/189"),
    ([[6, 1, 1], [1, 6, 1], [1, 1, 6]], ["3/4", "3/4", "3/4"], "3/4"),
]


@criterion(9, "per-class and macro F1 against exact fractions")
@pytest.mark.parametrize("counts, per_class, macro", CONFUSIONS)
def test_c09_metric_correctness(counts, per_class, macro):
    per_class = [Fraction(v) for v in per_class]
    macro = Fraction(macro)
    assert f1_fractions(counts) == (per_class, macro)
    cm = ConfusionMatrix(np.array(counts))
    # each per-class value is one integer division, so it is the correctly rounded fraction
    assert [float(v) for v in f1_per_class(cm)] == [float(v) for v in per_class]
    assert macro_f1(cm) == pytest.approx(float(macro), abs=1e-15)


@criterion(10, "communication ledger matches byte arithmetic")
def test_c10_fedavg_ledger():
    k, rounds = 4, 10
    clients, gt = _iid(k, seed=1)
    arch = _growth_arch()
    server = init_server(arch, 1)
    payload = _payload(arch.units())
    assert payload == payload_nbytes(server.weights)
    for _ in range(rounds):
        server, _ = run_round(server, clients, FedAvg(), EngineConfig(FORCED_TRAIN), gt)
    assert server.ledger.total_uplink == rounds * k * payload
    assert server.ledger.total_downlink == rounds * k * payload


@criterion(10, "communication ledger matches byte arithmetic")
def test_c10_forced_growth_bytes():
    k = 12
    archs, reports = _forced_growth_rounds(rounds=2, k=k)
    kinds = SPEC_KINDS
    weighted = [i for i, kind in enumerate(kinds) if kind != "M"]
    for arch, r in zip(archs, reports):
        units = arch.units()
        fedavg_round = k * _payload(units)
        up = down = fedavg_round
        assert all(r.arch_delta[i] >= 1 for i in weighted[:-1]), r.arch_delta
        for layer in weighted[:-1]:
            units[layer] += r.arch_delta[layer]
            sizes = param_count(units, kinds, SPEC_KERNELS, (8, 2))
            down += k * 4 * sum(sizes[i] for i in weighted if i <= layer)
            up += k * 4 * sum(sizes[i] for i in weighted if i > layer)
        print(f"c10 round {r.round}: arch {r.arch} up {r.uplink_bytes} down {r.downlink_bytes}")
        assert r.sub_rounds == len(weighted) - 1
        assert (r.uplink_bytes, r.downlink_bytes) == (up, down)
        levels = len(weighted)
        assert r.uplink_bytes <= (levels - 1) / 2 * fedavg_round * 2


@criterion(10, "communication ledger matches byte arithmetic")
def test_c10_no_growth_round_costs_one_fedavg_round():
    arch = _growth_arch()
    a_clients, gt = _iid(5, seed=2)
    b_clients, _ = _iid(5, seed=2)
    _, ra = run_round(init_server(arch, 0), a_clients, FedAvg(), EngineConfig(FORCED_TRAIN), gt)
    _, rb = run_round(init_server(arch, 0), b_clients, FedDist(), EngineConfig(FORCED_TRAIN), gt)
    assert sum(rb.arch_delta) == 0 and rb.sub_rounds == 0
    assert (rb.uplink_bytes, rb.downlink_bytes) == (ra.uplink_bytes, ra.downlink_bytes) == (5 * _payload(arch.units()),) * 2


SMOKE = SynthSpec(n_clients=5, n_classes=3, mode="dirichlet", alpha=1.0, seed=0)


def _smoke(strategy, rounds=30):
    parts = synth_noniid(SMOKE)
    clients, gt = clients_from_partitions(parts), global_test_set(parts)
    server = init_server(dense_arch(hidden=(16,), classes=3, input_shape=(8, 2)), 0)
    scores = []
    for _ in range(rounds):
        server, r = run_round(server, clients, strategy, EngineConfig(TrainConfig(), seed=0), gt)
        scores.append(r.global_macro_f1)
    return scores


def _centralized(epochs=30):
    parts = synth_noniid(SMOKE)
    gt = global_test_set(parts)
    pooled = WindowedDataset(np.concatenate([p.train.frames for p in parts]),
                             np.concatenate([p.train.labels for p in parts]))
    arch = dense_arch(hidden=(16,), classes=3, input_shape=(8, 2))
    w = init_weights(arch, 0)
    best = 0.0
    for e in range(epochs):
        w = train_local(arch, w, pooled, replace(TrainConfig(), local_epochs=1, rng_seed=e))
        best = max(best, macro_f1(evaluate(arch, w, (gt.frames, gt.labels))))
    return best


@criterion(11, "end-to-end synthetic smoke run")
@pytest.mark.slow
def test_c11_end_to_end_smoke():
    start = time.perf_counter()
    oracle = _centralized()
    avg = _smoke(FedAvg())
    dist = _smoke(FedDist())
    reached = next((t + 1 for t, s in enumerate(avg) if s >= 0.95), None)
    print(f"c11 centralized best {oracle:.4f}; FedAvg reaches 0.95 at round {reached}, "
          f"final {avg[-1]:.4f}; FedDist final {dist[-1]:.4f}")
    assert oracle >= 0.95
    assert reached is not None
    assert dist[-1] >= avg[-1] - 0.02
    assert time.perf_counter() - start < 600


@criterion(12, "three-way evaluation identities")
def test_c12_three_way_sanity():
    clients, gt = _iid(4, seed=5)
    arch = dense_arch(hidden=(8,), classes=3, input_shape=(8, 2))
    server = init_server(arch, 0)
    for _ in range(2):
        server, _ = run_round(server, clients, FedAvg(), EngineConfig(FORCED_TRAIN), gt)
    assert not all(c.weights.identical(server.weights) for c in clients)

    everywhere = [ClientState(c.client_id, c.train, WindowedDataset(gt.frames, gt.labels), c.weights)
                  for c in clients]
    s = evaluate_round(server, everywhere, gt).summary()
    assert s["personalization_macro_f1_mean"] == s["generalization_macro_f1_mean"]
    assert s["personalization_accuracy_mean"] == s["generalization_accuracy_mean"]

    for c in clients:
        c.weights = server.weights.copy()
    s = evaluate_round(server, clients, gt).summary()
    assert s["generalization_macro_f1_mean"] == s["global_macro_f1"]
    assert s["generalization_accuracy_mean"] == s["global_accuracy"]


def _config(tmp_path, strategy, params):
    return config_from_dict({
        "experiment": {"name": strategy, "arch": "4-3C_2M_8D", "rounds": 3, "seed": 9,
                       "output_dir": str(tmp_path / strategy)},
        "train": {"local_epochs": 2, "learning_rate": 0.05},
        "strategy": {"name": strategy, "params": params},
        "data": {"source": "synthetic",
                 "synthetic": {"n_clients": 11, "samples_per_client": 80, "mode": "outlier",
                               "outlier_offset": 2.0, "seed": 9}},
    })


@criterion(13, "re-runs produce byte-identical rounds.csv")
@pytest.mark.parametrize("strategy, params", [
    ("fedavg", {}), ("fedper", {}), ("fedma", {}), ("feddist", {"penalty": "none"}),
])
def test_c13_determinism(tmp_path, strategy, params):
    cfg = _config(tmp_path, strategy, params)
    runner.run_experiment(cfg, tmp_path / "first")
    runner.run_experiment(cfg, tmp_path / "second")
    a = (tmp_path / "first/rounds.csv").read_bytes()
    assert a == (tmp_path / "second/rounds.csv").read_bytes()
    assert a.count(b"\n") == 4
