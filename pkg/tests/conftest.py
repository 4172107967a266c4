import numpy as np
import pytest

from h2tdfr import nn

ACCEPTANCE_LINES: list[str] = []


def random_net(seed, in_dim=3, hidden=(5, 4), n_classes=3, batchnorm=True):
    model = nn.build_mlp(in_dim, hidden, n_classes, batchnorm=batchnorm, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for layer in model.layers:
        if isinstance(layer, nn.BatchNorm):
            layer.gamma[:] = rng.uniform(0.5, 1.5, layer.width)
            layer.beta[:] = rng.normal(0, 0.3, layer.width)
            layer.running_mean[:] = rng.normal(0, 0.5, layer.width)
            layer.running_var[:] = rng.uniform(0.5, 2.0, layer.width)
        elif isinstance(layer, nn.Dense):
            layer.bias[:] = rng.normal(0, 0.2, layer.out_dim)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
