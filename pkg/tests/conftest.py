import numpy as np
import pytest

from prunecert.policy import CategoricalHead, GaussianHead, Layer, PolicyNetwork

ACTS = ("tanh", "relu", "identity")


def random_layers(rng, sizes, activation="tanh", scale=1.0):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = "identity" if i == len(sizes) - 2 else activation
        layers.append(Layer(scale * rng.normal(size=(b, a)), rng.normal(size=b), act))
    return layers


def random_net(rng, sizes, activation="tanh", sigma=None, num_actions=None, scale=1.0):
    actor = random_layers(rng, sizes, activation, scale)
    critic = random_layers(rng, [sizes[0], 4, 1], activation)
    if num_actions is not None:
        head = CategoricalHead(num_actions)
    else:
        head = GaussianHead(np.full(sizes[-1], 0.1 if sigma is None else sigma))
    return PolicyNetwork(actor, critic, head)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """record(number, passed, detail): log one acceptance line and assert."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {detail}"
        lines.append((number, line))
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
