import numpy as np
import pytest

from dwacnn.nn import ModelConfig, init_model


def reduced_config(mode="dwa", dim=2):
    # conv 4 filters of width 4, dense 16/8, K=3, L=16
    return ModelConfig(16, dim, 3, filters=4, conv1_width=4, conv1_stride=2, conv2_width=4,
                       conv2_stride=2, fc1=16, fc2=8, conv_mode=mode)


def reduced_model(seed, mode="dwa"):
    rng = np.random.default_rng(seed)
    model = init_model(reduced_config(mode), rng)
    # nontrivial batch-norm affine parameters so their gradients are exercised
    for k in ("bn1.gamma", "bn1.beta", "bn2.gamma", "bn2.beta"):
        model.params[k][:] = rng.normal(1.0 if k.endswith("gamma") else 0.0, 0.3, size=model.params[k].shape)
    x = rng.normal(size=(4, 16, 2))
    y = rng.integers(0, 3, size=4)
    return model, x, y


@pytest.fixture
def tiny():
    return reduced_model(0)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
