import numpy as np
import pytest

from bpfa.nn import AvgPool, BatchNorm, Conv2d, Dense, Flatten, ReLU, SegmentedNetwork


def randomize(net, seed):
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        for name, p in layer.params.items():
            if name == "running_var":
                layer.params[name] = rng.uniform(0.5, 2.0, p.shape)
            elif name == "gamma":
                layer.params[name] = rng.uniform(0.5, 1.5, p.shape)
            else:
                layer.params[name] = rng.standard_normal(p.shape) * 0.5
    return net


def small_conv_net(seed=0, stride=1, padding="same", bn=True):
    layers = [Conv2d("conv1", 1, 3, stride=stride, padding=padding)]
    if bn:
        layers.append(BatchNorm("bn1", 3))
    layers += [ReLU("relu1")]
    shape = SegmentedNetwork(layers + [Flatten("f")], (1, 8, 8)).shapes[-2]
    if shape[1] % 2 == 0:
        layers.append(AvgPool("pool1"))
    layers += [Conv2d("conv2", 3, 4), ReLU("relu2"), Flatten("flatten")]
    probe = SegmentedNetwork(layers, (1, 8, 8))
    layers.append(Dense("embed", probe.shapes[-1][0], 5))
    return randomize(SegmentedNetwork(layers, (1, 8, 8), name="small"), seed)


def small_mlp(seed=0):
    layers = [Flatten("flatten"), Dense("fc1", 64, 12), BatchNorm("bn1", 12), ReLU("relu1"), Dense("embed", 12, 5)]
    return randomize(SegmentedNetwork(layers, (1, 8, 8), name="mlp"), seed)


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_diff(f, x, coords, h=1e-5):
    out = []
    for c in coords:
        xp, xm = x.copy(), x.copy()
        xp[c] += h
        xm[c] -= h
        out.append((f(xp) - f(xm)) / (2 * h))
    return np.array(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config._acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config._acceptance_lines:
            terminalreporter.write_line(line)
