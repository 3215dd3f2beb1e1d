import numpy as np
import pytest

from codinet.blocks import NetSpec
from codinet.network import DynamicNet
from codinet.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def tiny_conv_spec(depth=2, channels=3, size=4, classes=3):
    return NetSpec(kind="conv", depth=depth, channels=channels, input_shape=(1, size, size), num_classes=classes, downsample=1, router_hidden=4)


def tiny_dense_spec(depth=2, width=5, classes=3, inputs=4):
    return NetSpec(kind="dense", depth=depth, channels=width, input_shape=(inputs,), num_classes=classes, router_hidden=4)


@pytest.fixture
def tiny_net():
    return DynamicNet(tiny_conv_spec(), seed=7)


def random_input(spec, batch, seed=0):
    return np.random.default_rng(seed).normal(size=(batch,) + tuple(spec.input_shape))


# One line per acceptance criterion, repeated in the terminal summary so it is
# visible without ``-s``.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
