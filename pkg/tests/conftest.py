import numpy as np
import pytest

from artifact.net_core import RELU, Dense, NetSpec


def dense_net(*weights, biases=None, activation=RELU, output_neuron=0) -> NetSpec:
    """Dense chain from weight matrices; biases default to zero."""
    layers = []
    for k, W in enumerate(weights):
        W = np.asarray(W, dtype=float)
        b = np.zeros(W.shape[0]) if biases is None else np.asarray(biases[k], dtype=float)
        layers.append(Dense(W, b, activation))
    return NetSpec(np.asarray(weights[0]).shape[1], output_neuron, tuple(layers))


def focal_toy() -> tuple[NetSpec, np.ndarray]:
    """Small net whose neuron 1 of node 2 has fan-in (7, 2, -1).

    Node-1 neuron 2 reads x_3 - x_4 = 40 - 100 and is therefore closed.
    """
    W1 = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, -1]]
    W2 = [[1, 1, 1], [7, 2, -1], [1, 0, 0]]
    W3 = [[0, 1, 0]]
    return dense_net(W1, W2, W3), np.array([1.0, 1.0, 40.0, 100.0])


@pytest.fixture
def toy():
    return focal_toy()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    """Store and print the one-line verdict of acceptance criterion ``n``."""
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
