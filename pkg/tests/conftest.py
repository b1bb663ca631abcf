import numpy as np
import pytest

from modelmark.builder import ModelBuilder, dense_classifier
from modelmark.fixtures import Arch, FixtureSpec, gen_fixture
from modelmark.model_format import Opcode


@pytest.fixture(scope="session")
def conv_fixture():
    """Default 3-class CONV_HEAD fixture (600 samples per class)."""
    return gen_fixture(FixtureSpec(classes=3, seed=0))


@pytest.fixture(scope="session")
def small_conv_fixture():
    return gen_fixture(FixtureSpec(classes=3, seed=1, samples_per_class=200))


@pytest.fixture(scope="session")
def linear_fixture():
    return gen_fixture(FixtureSpec(classes=4, arch=Arch.LINEAR_HEAD, seed=5, samples_per_class=150))


@pytest.fixture
def fc_model_bytes():
    """1-operator FC model: input [4] -> FC(3)."""
    rng = np.random.default_rng(0)
    return dense_classifier(rng.normal(size=(3, 4)), rng.normal(size=3), [4], softmax=False)


def two_fc_model() -> bytes:
    b = ModelBuilder()
    x = b.input([5])
    x = b.op(Opcode.FULLY_CONNECTED, [x, b.constant("fc1/w", np.ones((4, 5))), b.constant("fc1/b", np.zeros(4))], [4])
    x = b.op(Opcode.RELU, [x], [4])
    x = b.op(Opcode.FULLY_CONNECTED, [x, b.constant("fc2/w", np.ones((2, 4))), b.constant("fc2/b", np.zeros(2))], [2])
    x = b.op(Opcode.SOFTMAX, [x], [2])
    b.output(x)
    return b.build()


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
