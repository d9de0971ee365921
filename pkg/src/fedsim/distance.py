"""Neuron-level Euclidean distances between models of the same shape.

A neuron is one output unit of a weighted layer: a dense unit or a
convolution filter. Its vector is its incoming weights (flattened for a
filter) followed by its bias.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels


def pairwise_distance(a, b) -> float:
    """Euclidean distance between two neuron vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"neuron vectors differ in length: {a.size} vs {b.size}")
    diff = a - b
    return math.sqrt(float(np.dot(diff, diff)))


@dataclass
class DistanceMatrix:
    """Per-layer table of client-neuron to server-neuron distances."""

    layer: int
    entries: np.ndarray  # (K clients, D neurons)
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        self.mean = self.entries.mean(axis=0)
        self.std = self.entries.std(axis=0)


def neuron_matrix(weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Flatten a layer to one row per neuron: incoming weights then bias."""
    d = weights.shape[0]
    return np.concatenate([weights.reshape(d, -1), bias.reshape(d, 1)], axis=1)


def distance_matrix(layer: int, server_w, client_weights) -> DistanceMatrix:
    ref = neuron_matrix(server_w.weights[layer], server_w.biases[layer])
    stacked = []
    for k, cw in enumerate(client_weights):
        rows = neuron_matrix(cw.weights[layer], cw.biases[layer])
        if rows.shape != ref.shape:
            raise ValueError(
                f"layer {layer}: client {k} neuron table {rows.shape} != server {ref.shape}"
            )
        stacked.append(rows)
    if not stacked:
        return DistanceMatrix(layer, np.zeros((0, ref.shape[0])))
    entries = kernels.neuron_distances(ref, np.ascontiguousarray(np.stack(stacked)))
    return DistanceMatrix(layer, entries)
