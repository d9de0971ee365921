"""Sensor data ingestion, windowing, normalization and client partitioning.

Real data enters as one CSV per sensor with header ``timestamp,x,y,z``;
accelerometer and gyroscope streams are joined on the nearest gyroscope
timestamp. A manifest CSV (``participant,activity,acc,gyr``) lists the
recordings; several rows per participant (e.g. device positions) are
windowed separately and concatenated in manifest order.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class SensorRecording:
    participant_id: str
    samples: np.ndarray  # (T, channels)
    labels: np.ndarray  # (T,)
    sampling_rate_hz: float = 50.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 2 or len(self.labels) != len(self.samples):
            raise ValueError("samples must be (T, channels) with one label per timestep")
        if not np.isfinite(self.samples).all():
            raise ValueError(f"recording for {self.participant_id} contains non-finite samples")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("label ids must be non-negative")


@dataclass
class WindowedDataset:
    frames: np.ndarray  # (N, window_length, channels)
    labels: np.ndarray  # (N,)
    starts: np.ndarray | None = None  # first timestep of each frame, when known
    dropped: int = 0  # windows discarded for lacking a label majority

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.frames) != len(self.labels):
            raise ValueError("frames and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def window_length(self) -> int:
        return self.frames.shape[1]

    @property
    def channels(self) -> int:
        return self.frames.shape[2]

    def subset(self, idx) -> "WindowedDataset":
        starts = None if self.starts is None else self.starts[idx]
        return WindowedDataset(self.frames[idx], self.labels[idx], starts)

    @staticmethod
    def concat(parts, window_length: int, channels: int) -> "WindowedDataset":
        parts = list(parts)
        if not parts:
            return WindowedDataset(np.zeros((0, window_length, channels)), np.zeros(0, dtype=np.int64))
        starts = None
        if all(p.starts is not None for p in parts):
            starts = np.concatenate([p.starts for p in parts])
        return WindowedDataset(
            np.concatenate([p.frames for p in parts]),
            np.concatenate([p.labels for p in parts]),
            starts,
            sum(p.dropped for p in parts),
        )


@dataclass
class ClientPartition:
    client_id: str
    train: WindowedDataset
    test: WindowedDataset

    @property
    def n_k(self) -> int:
        return len(self.train)


@dataclass
class GlobalTestSet:
    frames: np.ndarray
    labels: np.ndarray
    owner: np.ndarray  # index of the client each frame came from

    def __len__(self):
        return len(self.labels)


def global_test_set(clients) -> GlobalTestSet:
    clients = list(clients)
    if not clients:
        raise ValueError("no clients")
    frames = np.concatenate([c.test.frames for c in clients])
    labels = np.concatenate([c.test.labels for c in clients])
    owner = np.concatenate([np.full(len(c.test), k) for k, c in enumerate(clients)])
    return GlobalTestSet(frames, labels, owner)


def window(rec: SensorRecording, length: int = 128, overlap: int = 64) -> WindowedDataset:
    """Slice a recording into fixed-length frames sharing ``overlap`` timesteps.

    A frame is labelled with the class covering strictly more than half of
    its timesteps; frames without such a majority are dropped.
    """
    if not 0 <= overlap < length:
        raise ValueError(f"need 0 <= overlap < length, got overlap={overlap}, length={length}")
    t, channels = rec.samples.shape
    if t < length:
        warnings.warn(
            f"recording of {rec.participant_id} has {t} samples, shorter than one window ({length})",
            RuntimeWarning,
        )
        return WindowedDataset(np.zeros((0, length, channels)), np.zeros(0, dtype=np.int64),
                               np.zeros(0, dtype=np.int64))
    step = length - overlap
    count = (t - length) // step + 1
    starts = np.arange(count) * step
    idx = starts[:, None] + np.arange(length)[None, :]
    frames = rec.samples[idx]
    win_labels = rec.labels[idx]
    n_classes = int(rec.labels.max()) + 1
    counts = np.stack([(win_labels == c).sum(axis=1) for c in range(n_classes)], axis=1)
    majority = counts.argmax(axis=1)
    keep = 2 * counts.max(axis=1) > length
    return WindowedDataset(frames[keep], majority[keep], starts[keep], int((~keep).sum()))


@dataclass
class ZNorm:
    mean: np.ndarray  # (channels,)
    std: np.ndarray  # (channels,)

    def apply(self, ds: WindowedDataset) -> WindowedDataset:
        frames = (ds.frames - self.mean) / self.std
        return WindowedDataset(frames, ds.labels.copy(), ds.starts, ds.dropped)


def fit_znorm(ds: WindowedDataset) -> ZNorm:
    if len(ds) == 0:
        raise ValueError("cannot fit normalization on an empty dataset")
    flat = ds.frames.reshape(-1, ds.channels).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    flat_channels = std == 0
    if flat_channels.any():
        warnings.warn(
            f"zero-variance channel(s) {np.flatnonzero(flat_channels).tolist()}: centered, not scaled",
            RuntimeWarning,
        )
        std = np.where(flat_channels, 1.0, std)
    return ZNorm(mean, std)


def znormalize(ds: WindowedDataset, stats: ZNorm | None = None) -> WindowedDataset:
    """Channel-wise z-normalization, with statistics fitted on ``ds`` unless given."""
    return (stats or fit_znorm(ds)).apply(ds)


def normalize_clients(clients):
    """Fit statistics on the pooled training frames and apply them everywhere."""
    clients = list(clients)
    first = clients[0].train
    pooled = WindowedDataset.concat([c.train for c in clients], first.window_length, first.channels)
    stats = fit_znorm(pooled)
    out = [ClientPartition(c.client_id, stats.apply(c.train), stats.apply(c.test)) for c in clients]
    return out, stats


def partition_by_participant(recordings, split_ratio: float = 0.8, length: int = 128,
                             overlap: int = 64, min_windows: int = 5):
    """One client per participant, split chronologically into train/test.

    Returns ``(clients, global_test)``. Participants are ordered by first
    appearance in ``recordings``.
    """
    if not 0.0 < split_ratio < 1.0:
        raise ValueError("split_ratio must lie in (0, 1)")
    grouped: dict[str, list] = {}
    for rec in recordings:
        grouped.setdefault(rec.participant_id, []).append(rec)
    if not grouped:
        raise ValueError("no recordings")
    clients = []
    for pid, recs in grouped.items():
        channels = recs[0].samples.shape[1]
        ds = WindowedDataset.concat([window(r, length, overlap) for r in recs], length, channels)
        if len(ds) < min_windows:
            warnings.warn(f"participant {pid} has {len(ds)} windows (< {min_windows}); excluded",
                          RuntimeWarning)
            continue
        n_train = int(round(split_ratio * len(ds)))
        n_train = min(max(n_train, 1), len(ds) - 1)
        clients.append(ClientPartition(pid, ds.subset(slice(0, n_train)),
                                       ds.subset(slice(n_train, len(ds)))))
    if not clients:
        raise ValueError("every participant was excluded")
    return clients, global_test_set(clients)


def read_sensor_csv(path):
    """Returns ``(timestamps, xyz)`` from a ``timestamp,x,y,z`` CSV."""
    path = Path(path)
    with path.open(newline="") as fh:
        header = [h.strip().lower() for h in next(csv.reader(fh))]
    if header[:4] != ["timestamp", "x", "y", "z"]:
        raise ValueError(f"{path}: expected header timestamp,x,y,z, got {','.join(header)}")
    table = np.loadtxt(path, delimiter=",", skiprows=1, usecols=(0, 1, 2, 3), ndmin=2)
    order = np.argsort(table[:, 0], kind="stable")
    table = table[order]
    return table[:, 0], table[:, 1:4]


def join_nearest(ts_a, xyz_a, ts_b, xyz_b) -> np.ndarray:
    """For every timestamp of stream a, take the nearest sample of stream b."""
    pos = np.searchsorted(ts_b, ts_a)
    pos = np.clip(pos, 1, len(ts_b) - 1) if len(ts_b) > 1 else np.zeros_like(pos)
    if len(ts_b) > 1:
        left_closer = np.abs(ts_a - ts_b[pos - 1]) <= np.abs(ts_b[pos] - ts_a)
        pos = np.where(left_closer, pos - 1, pos)
    return np.concatenate([xyz_a, xyz_b[pos]], axis=1)


def load_recording(acc_path, gyr_path, participant_id: str, label: int,
                   sampling_rate_hz: float = 50.0) -> SensorRecording:
    ts_a, acc = read_sensor_csv(acc_path)
    ts_g, gyr = read_sensor_csv(gyr_path)
    if len(ts_a) == 0 or len(ts_g) == 0:
        raise ValueError(f"empty sensor file for participant {participant_id}")
    samples = join_nearest(ts_a, acc, ts_g, gyr)
    return SensorRecording(participant_id, samples, np.full(len(samples), label), sampling_rate_hz)


def load_manifest(path, classes=None, sampling_rate_hz: float = 50.0):
    """Read ``participant,activity,acc,gyr`` rows; paths are relative to the manifest.

    Returns ``(recordings, classes)`` where ``classes`` maps class id -> name.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"participant", "activity", "acc", "gyr"} - set(rows[0] if rows else {})
    if missing:
        raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
    if classes is None:
        classes = sorted({r["activity"] for r in rows})
    index = {name: i for i, name in enumerate(classes)}
    recordings = []
    for r in rows:
        if r["activity"] not in index:
            raise ValueError(f"{path}: unknown activity {r['activity']!r}")
        recordings.append(load_recording(path.parent / r["acc"], path.parent / r["gyr"],
                                         r["participant"], index[r["activity"]], sampling_rate_hz))
    return recordings, list(classes)


@dataclass
class SynthSpec:
    """Desk-scale Gaussian classification task split across clients.

    mode: "iid" (uniform class mix everywhere), "dirichlet" (class mix drawn
    from Dirichlet(alpha) per client) or "outlier" (IID, but one client's
    features are shifted by ``outlier_offset``).
    """

    n_clients: int = 5
    n_classes: int = 3
    samples_per_client: int = 200
    window_length: int = 8
    channels: int = 2
    mode: str = "iid"
    alpha: float = 0.5
    outlier_offset: float = 0.0
    outlier_client: int = 0
    class_sep: float = 4.0
    noise: float = 1.0
    test_fraction: float = 0.2
    seed: int = 0
    class_means: list | None = None  # (n_classes, features)
    covariances: list | None = None  # one (features, features) matrix, or one per client
    client_ids: list | None = field(default=None, repr=False)

    @property
    def features(self) -> int:
        return self.window_length * self.channels


def synth_noniid(spec: SynthSpec) -> list[ClientPartition]:
    if spec.n_clients < 1 or spec.n_classes < 2:
        raise ValueError("need at least 1 client and 2 classes")
    if spec.mode not in {"iid", "dirichlet", "outlier"}:
        raise ValueError(f"unknown synthetic mode {spec.mode!r}")
    if not 0.0 < spec.test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(spec.seed)
    d = spec.features
    if spec.class_means is not None:
        means = np.asarray(spec.class_means, dtype=np.float64)
        if means.shape != (spec.n_classes, d):
            raise ValueError(f"class_means must be ({spec.n_classes}, {d})")
    else:
        means = rng.normal(size=(spec.n_classes, d))
        means *= spec.class_sep / np.linalg.norm(means, axis=1, keepdims=True)

    chols = None
    if spec.covariances is not None:
        covs = np.asarray(spec.covariances, dtype=np.float64)
        if covs.ndim == 2:
            covs = np.broadcast_to(covs, (spec.n_clients, d, d))
        if covs.shape != (spec.n_clients, d, d):
            raise ValueError(f"covariances must be ({d}, {d}) or ({spec.n_clients}, {d}, {d})")
        chols = []
        for k, cov in enumerate(covs):
            if not np.allclose(cov, cov.T):
                raise ValueError(f"covariance of client {k} is not symmetric")
            try:
                chols.append(np.linalg.cholesky(cov))
            except np.linalg.LinAlgError:
                raise ValueError(f"degenerate covariance for client {k}") from None

    if spec.mode == "dirichlet":
        props = rng.dirichlet(np.full(spec.n_classes, spec.alpha), size=spec.n_clients)
    else:
        props = np.full((spec.n_clients, spec.n_classes), 1.0 / spec.n_classes)

    n = spec.samples_per_client
    n_test = max(1, int(round(spec.test_fraction * n)))
    ids = spec.client_ids or [f"client-{k:02d}" for k in range(spec.n_clients)]
    clients = []
    for k in range(spec.n_clients):
        y = rng.choice(spec.n_classes, size=n, p=props[k])
        z = rng.normal(size=(n, d))
        noise = z @ chols[k].T if chols is not None else spec.noise * z
        x = means[y] + noise
        if spec.mode == "outlier" and k == spec.outlier_client:
            x = x + spec.outlier_offset
        frames = x.reshape(n, spec.window_length, spec.channels)
        starts = np.arange(n)
        train = WindowedDataset(frames[:n - n_test], y[:n - n_test], starts[:n - n_test])
        test = WindowedDataset(frames[n - n_test:], y[n - n_test:], starts[n - n_test:])
        clients.append(ClientPartition(ids[k], train, test))
    return clients
