import os

import numpy as np
import pytest

from earlyexit.graph import BranchSpec, NetworkSpec, init_params
from earlyexit.data import Dataset
from earlyexit.layers import Conv, Dense, Flatten, MaxPool, ParameterStore, ReLU


def tiny_two_exit(num_classes=3):
    """2-exit net on 1x8x8 inputs, under 500 parameters."""
    trunk = (Conv(2, 3), MaxPool(2), Conv(3, 2), Flatten(), Dense(6), ReLU(), Dense(num_classes))
    branch = BranchSpec(1, (Conv(2, 2), Flatten(), Dense(num_classes)), 1)
    return NetworkSpec((1, 8, 8), trunk, (branch,), num_classes)


def tiny_three_exit(num_classes=3):
    trunk = (
        Conv(3, 3, padding=1), MaxPool(2), Conv(4, 3, padding=1), ReLU(), MaxPool(2),
        Flatten(), Dense(8), ReLU(), Dense(num_classes),
    )
    branches = (
        BranchSpec(1, (Flatten(), Dense(num_classes)), 1),
        BranchSpec(3, (Conv(2, 1), Flatten(), Dense(num_classes)), 2),
    )
    return NetworkSpec((1, 8, 8), trunk, branches, num_classes)


def random_params(spec, seed, dtype=np.float64, scale=None):
    params = init_params(spec, seed, dtype)
    if scale is not None:
        rng = np.random.default_rng(seed + 1)
        for n in params:
            params[n] = rng.standard_normal(params[n].shape) * scale
    return params


def standalone_exit(spec, params, n):
    """Entry -> exit n as an independent single-exit network with copied parameters."""
    if n == spec.num_exits:
        return spec.trunk_only(), params
    b = spec.branches[n - 1]
    layers = spec.trunk[: b.attach_after + 1] + b.layers
    sub = NetworkSpec(spec.input_shape, layers, (), spec.num_classes)
    sub_params = ParameterStore()
    for i in range(b.attach_after + 1):
        for suffix in (".weight", ".bias"):
            if f"trunk.{i}{suffix}" in params:
                sub_params.add(f"trunk.{i}{suffix}", params[f"trunk.{i}{suffix}"])
    for j in range(len(b.layers)):
        for suffix in (".weight", ".bias"):
            if f"branch{n}.{j}{suffix}" in params:
                sub_params.add(f"trunk.{b.attach_after + 1 + j}{suffix}", params[f"branch{n}.{j}{suffix}"])
    return sub, sub_params


def random_dataset(spec, n, seed, dtype=np.float64):
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((n,) + spec.input_shape).astype(dtype)
    return Dataset(images, rng.integers(0, spec.num_classes, n))


@pytest.fixture
def two_exit():
    return tiny_two_exit()


@pytest.fixture
def three_exit():
    return tiny_three_exit()


def pytest_addoption(parser):
    parser.addoption("--mnist-dir", default=os.environ.get("MNIST_DIR", "/root/data/mnist"),
                     help="directory with the MNIST IDX files (also $MNIST_DIR)")


@pytest.fixture(scope="session")
def mnist_dir(request):
    path = request.config.getoption("--mnist-dir")
    if not os.path.exists(os.path.join(path, "t10k-labels-idx1-ubyte")) and not os.path.exists(
        os.path.join(path, "t10k-labels.idx1-ubyte")
    ):
        pytest.skip(f"MNIST not found in {path} (set --mnist-dir or MNIST_DIR)")
    return path


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
