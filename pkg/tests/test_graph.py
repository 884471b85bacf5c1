import math

import numpy as np
import pytest

from earlyexit.errors import DimensionError, StateError, ValidationError
from earlyexit.graph import (
    BranchSpec,
    NetworkSpec,
    backward_joint,
    baseline_macs,
    branch_macs,
    exit_macs,
    forward_all_exits,
    init_params,
    joint_loss,
)
from earlyexit.layers import ActivationCache, Conv, Dense, Flatten, MaxPool, ReLU, layer_forward, one_hot

from conftest import random_params, standalone_exit, tiny_three_exit, tiny_two_exit
from oracles import numeric_grad, rel_error


def data(spec, seed, n=5):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n,) + spec.input_shape)
    y = one_hot(rng.integers(0, spec.num_classes, n), spec.num_classes)
    return x, y


def test_single_exit_equals_plain_trunk(two_exit):
    spec = two_exit.trunk_only()
    params = init_params(spec, 0)
    x, _ = data(spec, 0)
    (logits,) = forward_all_exits(spec, params, x.astype(np.float32))
    h = x.astype(np.float32)
    for i, layer in enumerate(spec.trunk):
        h = layer_forward(layer, params, f"trunk.{i}", h)
    np.testing.assert_array_equal(logits, h)


@pytest.mark.parametrize("make", [tiny_two_exit, tiny_three_exit])
def test_prefix_sharing_matches_standalone_networks(make):
    spec = make()
    params = random_params(spec, 1)
    x, _ = data(spec, 1)
    outs = forward_all_exits(spec, params, x)
    assert len(outs) == spec.num_exits
    for n in range(1, spec.num_exits + 1):
        sub, sub_params = standalone_exit(spec, params, n)
        (ref,) = forward_all_exits(sub, sub_params, x)
        assert np.max(np.abs(outs[n - 1] - ref)) <= 1e-12
        np.testing.assert_array_equal(outs[n - 1], ref)


def test_forward_deterministic(two_exit):
    params = init_params(two_exit, 2)
    x, _ = data(two_exit, 2)
    a = forward_all_exits(two_exit, params, x)
    b = forward_all_exits(two_exit, params, x)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_forward_rejects_wrong_input(two_exit):
    params = init_params(two_exit, 0)
    with pytest.raises(DimensionError):
        forward_all_exits(two_exit, params, np.ones((2, 1, 9, 9)))


def _logits_with_loss(loss, c=2):
    p = math.exp(-loss * c)
    return np.array([[math.log(p), math.log(1 - p)]])


def test_joint_loss_linear_combination():
    y = one_hot([0], 2)
    logits = [_logits_with_loss(0.2), _logits_with_loss(0.5)]
    assert joint_loss(logits, y, [1.0, 0.3]) == pytest.approx(0.35, abs=1e-12)
    assert joint_loss(logits, y, [0.0, 1.0]) == pytest.approx(0.5, abs=1e-12)
    assert joint_loss(logits, y, [1.0, 0.0]) == pytest.approx(0.2, abs=1e-12)


def test_joint_loss_weight_count_mismatch():
    y = one_hot([0], 2)
    with pytest.raises(ValidationError):
        joint_loss([_logits_with_loss(0.2)], y, [1.0, 0.3])


def grads_of(spec, params, x, y, w):
    params.zero_grad()
    cache = ActivationCache()
    forward_all_exits(spec, params, x, cache)
    loss, _ = backward_joint(spec, params, cache, y, w)
    return loss, {n: params.grad(n).copy() for n in params}


@pytest.mark.parametrize("make,w", [(tiny_two_exit, [1.0, 0.3]), (tiny_three_exit, [1.0, 0.6, 0.3])])
def test_joint_gradient_matches_finite_differences(make, w):
    spec = make()
    params = random_params(spec, 3, scale=0.3)
    x, y = data(spec, 3)
    if spec.num_exits == 2:
        assert params.num_elements() <= 500
    loss, grads = grads_of(spec, params, x, y, w)
    assert loss == pytest.approx(joint_loss(forward_all_exits(spec, params, x), y, w), rel=1e-12)
    f = lambda: joint_loss(forward_all_exits(spec, params, x), y, w)  # noqa: E731
    for name in params:
        assert rel_error(grads[name], numeric_grad(f, params[name])) <= 1e-6, name


def test_zero_weight_branch_gets_no_gradient(two_exit):
    params = random_params(two_exit, 4)
    x, y = data(two_exit, 4)
    _, grads = grads_of(two_exit, params, x, y, [0.0, 1.0])
    for name, g in grads.items():
        if name.startswith("branch1."):
            assert not g.any(), name
        else:
            assert g.any(), name


def test_zero_weight_final_exit_leaves_upper_trunk(two_exit):
    params = random_params(two_exit, 5)
    x, y = data(two_exit, 5)
    _, grads = grads_of(two_exit, params, x, y, [1.0, 0.0])
    attach = two_exit.branches[0].attach_after
    for name, g in grads.items():
        layer = int(name.split(".")[1]) if name.startswith("trunk.") else None
        if layer is not None and layer > attach:
            assert not g.any(), name
        else:
            assert g.any(), name


@pytest.mark.parametrize("make", [tiny_two_exit, tiny_three_exit])
def test_gradient_additivity_and_scaling(make):
    spec = make()
    params = random_params(spec, 6)
    x, y = data(spec, 6)
    w = [1.0, 0.7, 0.3][-spec.num_exits:]
    _, joint = grads_of(spec, params, x, y, w)
    total = {n: np.zeros_like(g) for n, g in joint.items()}
    for k in range(spec.num_exits):
        wk = [0.0] * spec.num_exits
        wk[k] = w[k]
        _, single = grads_of(spec, params, x, y, wk)
        for n in total:
            total[n] += single[n]
    for n in joint:
        assert np.max(np.abs(joint[n] - total[n])) <= 1e-10
    _, scaled = grads_of(spec, params, x, y, [4 * v for v in w])
    for n in joint:
        np.testing.assert_array_equal(scaled[n], 4 * joint[n])


def test_backward_without_forward(two_exit):
    params = init_params(two_exit, 0)
    with pytest.raises(StateError):
        backward_joint(two_exit, params, ActivationCache(), one_hot([0], 3), [1, 1])


def test_validation_rejects_bad_structures():
    head = Dense(3)
    trunk = (Conv(2, 3), MaxPool(2), Conv(3, 2), Flatten(), Dense(6), ReLU(), head)
    br = lambda a, e: BranchSpec(a, (Flatten(), Dense(3)), e)  # noqa: E731
    with pytest.raises(ValidationError, match="no trunk"):
        NetworkSpec((1, 8, 8), (), (), 3)
    with pytest.raises(ValidationError, match="strictly"):
        NetworkSpec((1, 8, 8), trunk, (br(2, 1), br(2, 2)), 3)
    with pytest.raises(ValidationError, match="strictly"):
        NetworkSpec((1, 8, 8), trunk, (br(3, 1), br(1, 2)), 3)
    with pytest.raises(ValidationError, match="outside"):
        NetworkSpec((1, 8, 8), trunk, (br(9, 1),), 3)
    with pytest.raises(ValidationError, match="nested"):
        NetworkSpec((1, 8, 8), trunk, (BranchSpec(1, (br(2, 1), Flatten(), Dense(3)), 1),), 3)
    with pytest.raises(ValidationError, match="dense"):
        NetworkSpec((1, 8, 8), trunk[:-1], (), 3)
    with pytest.raises(ValidationError):
        NetworkSpec((1, 8, 8), trunk, (BranchSpec(1, (Flatten(), Dense(3)), 2),), 3)


def test_shape_break_names_branch():
    trunk = (Conv(2, 3), MaxPool(2), Flatten(), Dense(3))
    with pytest.raises(DimensionError, match="branch 1"):
        NetworkSpec((1, 8, 8), trunk, (BranchSpec(1, (Dense(3),), 1),), 3)


def test_mac_accounting(two_exit):
    # trunk: conv 2x6x6x(1*9)=648, conv 3x2x2x(2*4)=96, dense 12*6=72, dense 6*3=18
    assert baseline_macs(two_exit) == 648 + 96 + 72 + 18
    # branch: conv 2x2x2x(2*4)=64, dense 8*3=24
    assert branch_macs(two_exit) == [88]
    assert exit_macs(two_exit) == [648 + 88, 834 + 88]
