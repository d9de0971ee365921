"""Round-based federated simulation.

A round broadcasts the server model, trains every client locally, hands the
results to a strategy and records communication cost and metrics. All
clients take part in every round. Client training is independent and may
run on a thread pool; results are always gathered in client order, so the
outcome does not depend on scheduling.

Communication is counted as tensor payload at 32-bit float width:
downlink is what the server sends, uplink what clients return. During a
layer-wise sub-round clients receive the frozen layers and return only the
retrained ones.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .aggregators import Strategy, apply_overwrite
from .data import GlobalTestSet, WindowedDataset
from .metrics import accuracy, divergence_snapshot, macro_f1
from .nn import ModelArchitecture, TrainConfig, WeightSet
from .serialization import payload_nbytes

log = logging.getLogger(__name__)


class RoundError(RuntimeError):
    """Aggregation failed; the server state was left untouched."""


@dataclass
class ClientState:
    client_id: str
    train: WindowedDataset
    test: WindowedDataset
    weights: WeightSet | None = None

    @property
    def n_k(self) -> int:
        return len(self.train)


@dataclass
class CommLedger:
    uplink: list = field(default_factory=list)
    downlink: list = field(default_factory=list)

    def record(self, uplink: int, downlink: int) -> "CommLedger":
        return CommLedger(self.uplink + [int(uplink)], self.downlink + [int(downlink)])

    @property
    def total_uplink(self) -> int:
        return int(sum(self.uplink))

    @property
    def total_downlink(self) -> int:
        return int(sum(self.downlink))


@dataclass
class RoundReport:
    round: int
    strategy: str
    global_macro_f1: float | None
    global_accuracy: float | None
    personalization_macro_f1_mean: float
    personalization_macro_f1_std: float
    personalization_accuracy_mean: float
    personalization_accuracy_std: float
    generalization_macro_f1_mean: float
    generalization_macro_f1_std: float
    generalization_accuracy_mean: float
    generalization_accuracy_std: float
    arch: str
    arch_delta: list
    sub_rounds: int
    uplink_bytes: int
    downlink_bytes: int
    cumulative_uplink_bytes: int
    cumulative_downlink_bytes: int
    divergence: list = field(default_factory=list, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("divergence")
        return d


@dataclass
class ServerState:
    arch: ModelArchitecture
    weights: WeightSet
    round: int = 0
    history: list = field(default_factory=list)
    ledger: CommLedger = field(default_factory=CommLedger)


@dataclass(frozen=True)
class EngineConfig:
    train: TrainConfig = TrainConfig()
    seed: int = 0
    parallel_clients: int = 1
    wire_dtype: str = "float32"


def init_server(arch: ModelArchitecture, seed: int) -> ServerState:
    return ServerState(arch, nn.init_weights(arch, seed))


def client_seed(seed: int, t: int, k: int, sub: int) -> int:
    return int(np.random.SeedSequence([seed, t, k, sub]).generate_state(1)[0])


class ClientTrainer:
    """Trains a batch of clients and meters the bytes they exchange.

    Instances double as the ``retrain`` callback handed to strategies. Every
    sub-round checks that frozen layers come back bit-identical.
    """

    def __init__(self, clients, cfg: EngineConfig, t: int):
        self.clients = clients
        self.cfg = cfg
        self.t = t
        self.uplink = 0
        self.downlink = 0
        self.sub_rounds = 0

    def _map(self, fn, items):
        if self.cfg.parallel_clients > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.cfg.parallel_clients) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def train(self, arch: ModelArchitecture, starts, sub: int) -> list:
        def one(item):
            k, w = item
            cfg = replace(self.cfg.train, rng_seed=client_seed(self.cfg.seed, self.t, k, sub))
            return nn.train_local(arch, w, self.clients[k].train, cfg)

        return self._map(one, list(enumerate(starts)))

    def __call__(self, arch: ModelArchitecture, starts, sub_round) -> list:
        self.sub_rounds += 1
        dtype = self.cfg.wire_dtype
        self.downlink += sum(payload_nbytes(w, sub_round.frozen, dtype) for w in starts)
        trained = self.train(arch, starts, self.sub_rounds)
        for k, (before, after) in enumerate(zip(starts, trained)):
            if not before.identical(after, sub_round.frozen):
                raise RuntimeError(f"client {k}: frozen layers changed during sub-round")
        self.uplink += sum(payload_nbytes(w, sub_round.retrain, dtype) for w in trained)
        return trained


def _score(arch, w, data):
    cm = nn.evaluate(arch, w, data)
    return macro_f1(cm), accuracy(cm)


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


SCORE_FIELDS = (
    "global_macro_f1",
    "global_accuracy",
    "personalization_macro_f1_mean",
    "personalization_macro_f1_std",
    "personalization_accuracy_mean",
    "personalization_accuracy_std",
    "generalization_macro_f1_mean",
    "generalization_macro_f1_std",
    "generalization_accuracy_mean",
    "generalization_accuracy_std",
)


@dataclass
class RoundScores:
    global_macro_f1: float | None
    global_accuracy: float | None
    personalization_f1: list
    personalization_acc: list
    generalization_f1: list
    generalization_acc: list

    def summary(self) -> dict:
        pm, ps = _mean_std(self.personalization_f1)
        pam, pas = _mean_std(self.personalization_acc)
        gm, gs = _mean_std(self.generalization_f1)
        gam, gas = _mean_std(self.generalization_acc)
        return {
            "global_macro_f1": self.global_macro_f1,
            "global_accuracy": self.global_accuracy,
            "personalization_macro_f1_mean": pm,
            "personalization_macro_f1_std": ps,
            "personalization_accuracy_mean": pam,
            "personalization_accuracy_std": pas,
            "generalization_macro_f1_mean": gm,
            "generalization_macro_f1_std": gs,
            "generalization_accuracy_mean": gam,
            "generalization_accuracy_std": gas,
        }


def evaluate_round(server: ServerState, clients, global_test, has_global_model: bool = True) -> RoundScores:
    """Global, personalization and generalization scores.

    Stds are population standard deviations over clients. Without a usable
    server model (FedPer) the global score is None.
    """
    if len(global_test) == 0:
        raise ValueError("global test set is empty")
    test = (global_test.frames, global_test.labels)
    g_f1 = g_acc = None
    if has_global_model:
        g_f1, g_acc = _score(server.arch, server.weights, test)
    pf, pa, gf, ga = [], [], [], []
    for c in clients:
        w = c.weights if c.weights is not None else server.weights
        f, a = _score(server.arch, w, c.test)
        pf.append(f)
        pa.append(a)
        f, a = _score(server.arch, w, test)
        gf.append(f)
        ga.append(a)
    return RoundScores(g_f1, g_acc, pf, pa, gf, ga)


def run_round(server: ServerState, clients, strategy: Strategy, cfg: EngineConfig,
              global_test: GlobalTestSet | None = None):
    """One communication round. Returns ``(new_server, report)``.

    Client states are updated only after aggregation succeeds.
    """
    if not clients:
        raise ValueError("a round needs at least one client")
    t = server.round + 1
    arch = server.arch
    dtype = cfg.wire_dtype
    broadcast = strategy.broadcast_layers(arch)
    trainer = ClientTrainer(clients, cfg, t)

    starts = []
    downlink = 0
    for c in clients:
        if c.weights is None or c.weights.layer_count != server.weights.layer_count:
            starts.append(server.weights.copy())
            downlink += payload_nbytes(server.weights, None, dtype)
        else:
            starts.append(apply_overwrite(c.weights, server.weights, broadcast))
            downlink += payload_nbytes(server.weights, broadcast, dtype)
    trained = trainer.train(arch, starts, 0)
    uplink_layers = strategy.uplink_layers(arch)
    uplink = sum(payload_nbytes(w, uplink_layers, dtype) for w in trained)

    n = [c.n_k for c in clients]
    try:
        directive = strategy.aggregate(arch, server.weights, trained, n, t, trainer)
    except Exception as exc:
        raise RoundError(f"round {t}: {strategy.name} aggregation failed: {exc}") from exc

    uplink += trainer.uplink
    downlink += trainer.downlink
    new_arch = directive.arch
    delta = [after - before for before, after in zip(arch.units(), new_arch.units())]
    ledger = server.ledger.record(uplink, downlink)

    for c, w in zip(clients, directive.client_weights):
        c.weights = w
    new_server = ServerState(new_arch, directive.server_weights, t, list(server.history), ledger)

    if global_test is None:
        scores = dict.fromkeys(SCORE_FIELDS)
    else:
        scores = evaluate_round(new_server, clients, global_test, directive.has_global_model).summary()
    report = RoundReport(
        round=t,
        strategy=strategy.name,
        **scores,
        arch=new_arch.describe(),
        arch_delta=delta,
        sub_rounds=trainer.sub_rounds,
        uplink_bytes=uplink,
        downlink_bytes=downlink,
        cumulative_uplink_bytes=ledger.total_uplink,
        cumulative_downlink_bytes=ledger.total_downlink,
        divergence=divergence_snapshot(directive.server_weights, directive.client_weights),
    )
    new_server.history.append(report)
    log.info("round %d %s global=%s arch=%s up=%d", t, strategy.name,
             report.global_macro_f1, report.arch, uplink)
    return new_server, report


def clients_from_partitions(partitions) -> list[ClientState]:
    return [ClientState(p.client_id, p.train, p.test) for p in partitions]
