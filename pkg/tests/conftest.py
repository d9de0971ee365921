import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from fedsim.nn import LayerKind, LayerSpec, ModelArchitecture, init_weights  # noqa: E402

settings.register_profile(
    "fedsim", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("fedsim")


def dense_arch(hidden=(4,), classes=3, input_shape=(4, 2)):
    layers = [LayerSpec(LayerKind.DENSE, u) for u in hidden] + [LayerSpec(LayerKind.SOFTMAX, classes)]
    return ModelArchitecture(tuple(layers), tuple(input_shape))


def conv_arch(filters=3, kernel=3, pool=2, dense=5, classes=3, input_shape=(12, 2)):
    return ModelArchitecture(
        (
            LayerSpec(LayerKind.CONV1D, filters, kernel),
            LayerSpec(LayerKind.MAXPOOL1D, 0, pool),
            LayerSpec(LayerKind.DENSE, dense),
            LayerSpec(LayerKind.SOFTMAX, classes),
        ),
        tuple(input_shape),
    )


def jitter(w, scale, rng):
    """Copy of ``w`` with Gaussian noise on every parameter (biases included)."""
    out = w.copy()
    for i, t in enumerate(out.weights):
        if t is not None:
            out.weights[i] = t + scale * rng.normal(size=t.shape)
            out.biases[i] = out.biases[i] + scale * rng.normal(size=out.biases[i].shape)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_conv():
    arch = conv_arch()
    return arch, init_weights(arch, 7)


# acceptance bookkeeping: one PASS/FAIL line per numbered criterion
_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    if report.when == "call" or report.outcome != "passed":
        number, title = marker
        ok, _ = _CRITERIA.get(number, (True, title))
        _CRITERIA[number] = (ok and report.outcome == "passed", title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}")
