"""Multi-exit networks: a sequential trunk with side branches.

Exits are numbered from the shallowest branch (1) up to the trunk's own
classifier head (N). Each trunk layer runs once per forward pass; a branch
reads the trunk activation right after its ``attach_after`` layer.
"""

import functools
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, StateError, ValidationError
from .layers import (
    Dense,
    ParameterStore,
    cross_entropy,
    init_layer_params,
    layer_backward,
    layer_forward,
    softmax,
)


@dataclass(frozen=True)
class BranchSpec:
    attach_after: int
    layers: tuple
    exit_index: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))


@dataclass(frozen=True)
class NetworkSpec:
    """Trunk layers, flat branch list and class count.

    ``input_shape`` is ``(C, H, W)`` without the batch dimension.
    """

    input_shape: tuple
    trunk: tuple
    branches: tuple = ()
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "trunk", tuple(self.trunk))
        object.__setattr__(self, "branches", tuple(self.branches))
        validate_network(self)

    @property
    def num_exits(self):
        return len(self.branches) + 1

    def trunk_only(self):
        """The baseline network: same trunk, no branches."""
        return NetworkSpec(self.input_shape, self.trunk, (), self.num_classes)

    @functools.cached_property
    def _costs(self):
        # specs are frozen, so per-layer MACs are computed once (fast_inference asks per sample)
        return _trunk_layer_macs(self), _branch_macs(self)

    def trunk_shapes(self):
        """Input shape of every trunk layer, followed by the trunk's output shape."""
        shapes = [self.input_shape]
        for layer in self.trunk:
            shapes.append(layer.out_shape(shapes[-1]))
        return shapes


def trunk_name(i):
    return f"trunk.{i}"


def branch_name(exit_index, j):
    return f"branch{exit_index}.{j}"


def _is_layer(obj):
    return hasattr(obj, "forward") and hasattr(obj, "out_shape") and not isinstance(obj, BranchSpec)


def validate_network(spec):
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise ValidationError(f"input shape must be (C, H, W) with positive extents, got {spec.input_shape}")
    if spec.num_classes < 2:
        raise ValidationError(f"need at least 2 classes, got {spec.num_classes}")
    if not spec.trunk:
        raise ValidationError("no trunk defined")
    for i, layer in enumerate(spec.trunk):
        if not _is_layer(layer):
            raise ValidationError(f"trunk layer {i} is not a layer spec: {layer!r}")
    head = spec.trunk[-1]
    if not (isinstance(head, Dense) and head.features == spec.num_classes):
        raise ValidationError(f"trunk must end in dense({spec.num_classes}), ends in {head!r}")

    prev = -1
    for pos, b in enumerate(spec.branches, start=1):
        if not isinstance(b, BranchSpec):
            raise ValidationError(f"branch {pos} is not a BranchSpec: {b!r}")
        if b.exit_index != pos:
            raise ValidationError(f"branch at position {pos} has exit_index {b.exit_index}; exits must be numbered 1..N-1 in order")
        if not (0 <= b.attach_after < len(spec.trunk) - 1):
            raise ValidationError(
                f"branch {pos} attaches after trunk layer {b.attach_after}, outside 0..{len(spec.trunk) - 2}"
            )
        if b.attach_after <= prev:
            raise ValidationError(
                f"branch {pos} attach point {b.attach_after} must be strictly after the previous branch's ({prev})"
            )
        prev = b.attach_after
        if not b.layers:
            raise ValidationError(f"branch {pos} has no layers")
        for j, layer in enumerate(b.layers):
            if isinstance(layer, BranchSpec):
                raise ValidationError(f"branch {pos} contains a nested branch; only one-level branches are supported")
            if not _is_layer(layer):
                raise ValidationError(f"branch {pos} layer {j} is not a layer spec: {layer!r}")
        tail = b.layers[-1]
        if not (isinstance(tail, Dense) and tail.features == spec.num_classes):
            raise ValidationError(f"branch {pos} must end in dense({spec.num_classes}), ends in {tail!r}")

    # symbolic shape chain
    shapes = [spec.input_shape]
    for i, layer in enumerate(spec.trunk):
        try:
            shapes.append(layer.out_shape(shapes[-1]))
        except DimensionError as e:
            raise DimensionError(f"trunk layer {i} ({layer.kind}): {e}") from None
    for b in spec.branches:
        shape = shapes[b.attach_after + 1]
        for j, layer in enumerate(b.layers):
            try:
                shape = layer.out_shape(shape)
            except DimensionError as e:
                raise DimensionError(f"branch {b.exit_index} layer {j} ({layer.kind}): {e}") from None


def init_params(spec, rng, dtype=np.float32):
    """Fresh parameters in declaration order: trunk layers, then branches by exit."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = ParameterStore()
    shapes = spec.trunk_shapes()
    for i, layer in enumerate(spec.trunk):
        init_layer_params(params, layer, trunk_name(i), shapes[i], rng, dtype)
    for b in spec.branches:
        shape = shapes[b.attach_after + 1]
        for j, layer in enumerate(b.layers):
            init_layer_params(params, layer, branch_name(b.exit_index, j), shape, rng, dtype)
            shape = layer.out_shape(shape)
    return params


def parameter_layout(spec):
    """``[(name, shape), ...]`` in the same declaration order as ``init_params``."""
    out = []
    shapes = spec.trunk_shapes()

    def add(layer, name, in_shape):
        for suffix, shape in layer.param_shapes(in_shape).items():
            out.append((f"{name}.{suffix}", tuple(shape)))

    for i, layer in enumerate(spec.trunk):
        add(layer, trunk_name(i), shapes[i])
    for b in spec.branches:
        shape = shapes[b.attach_after + 1]
        for j, layer in enumerate(b.layers):
            add(layer, branch_name(b.exit_index, j), shape)
            shape = layer.out_shape(shape)
    return out


def run_branch(branch, params, h, cache=None):
    for j, layer in enumerate(branch.layers):
        name = branch_name(branch.exit_index, j)
        try:
            h = layer_forward(layer, params, name, h, cache)
        except DimensionError as e:
            raise DimensionError(f"branch {branch.exit_index}: {e}") from None
    return h


def forward_all_exits(spec, params, x, cache=None):
    """Logits at every exit, ``[exit_1, ..., exit_N]``.

    Pass an ``ActivationCache`` to run in training mode (needed for
    ``backward_joint``).
    """
    x = np.asarray(x)
    if x.shape[1:] != spec.input_shape:
        raise DimensionError(f"input shape {x.shape[1:]} does not match network input {spec.input_shape}")
    attach = {b.attach_after: b for b in spec.branches}
    outs = [None] * spec.num_exits
    h = x
    for i, layer in enumerate(spec.trunk):
        h = layer_forward(layer, params, trunk_name(i), h, cache)
        if i in attach:
            b = attach[i]
            outs[b.exit_index - 1] = run_branch(b, params, h, cache)
    outs[-1] = h
    if cache is not None:
        cache["logits"] = outs
    return outs


def check_exit_weights(weights, num_exits):
    w = [float(v) for v in weights]
    if len(w) != num_exits:
        raise ValidationError(f"got {len(w)} exit weights for a network with {num_exits} exits")
    if any(not np.isfinite(v) or v < 0 for v in w) or not any(v > 0 for v in w):
        raise ValidationError(f"exit weights must be finite, non-negative and not all zero: {w}")
    return w


def joint_loss(logits, y, weights):
    """Weighted sum over exits of the per-exit cross entropy of softmax(logits)."""
    w = check_exit_weights(weights, len(logits))
    return sum(wn * cross_entropy(softmax(z), y)[0] for wn, z in zip(w, logits))


def backward_joint(spec, params, cache, y, weights):
    """Backpropagate the joint loss; parameter gradients accumulate into ``params``.

    Returns ``(joint_loss, per_exit_losses)``.
    """
    if cache is None or "logits" not in cache:
        raise StateError("backward_joint needs the activation cache of a training-mode forward_all_exits")
    logits = cache["logits"]
    w = check_exit_weights(weights, spec.num_exits)
    losses, grads = [], []
    for wn, z in zip(w, logits):
        loss, g = cross_entropy(softmax(z), y)
        losses.append(loss)
        grads.append((wn * g).astype(z.dtype))

    attach = {b.attach_after: b for b in spec.branches}
    g = grads[-1]
    for i in range(len(spec.trunk) - 1, -1, -1):
        if i in attach:
            b = attach[i]
            gb = grads[b.exit_index - 1]
            for j in range(len(b.layers) - 1, -1, -1):
                gb = layer_backward(b.layers[j], params, branch_name(b.exit_index, j), cache, gb)
            g = g + gb
        g = layer_backward(spec.trunk[i], params, trunk_name(i), cache, g, input_grad=i > 0)
    return sum(wn * ln for wn, ln in zip(w, losses)), losses


def _trunk_layer_macs(spec):
    shapes = spec.trunk_shapes()
    return tuple(layer.macs(shapes[i]) for i, layer in enumerate(spec.trunk))


def _branch_macs(spec):
    shapes = spec.trunk_shapes()
    out = []
    for b in spec.branches:
        shape, total = shapes[b.attach_after + 1], 0
        for layer in b.layers:
            total += layer.macs(shape)
            shape = layer.out_shape(shape)
        out.append(total)
    return tuple(out)


def trunk_layer_macs(spec):
    return list(spec._costs[0])


def branch_macs(spec):
    """MAC count of each branch classifier, in exit order."""
    return list(spec._costs[1])


def exit_macs(spec):
    """Cumulative MACs to leave at each exit under sequential early-exit evaluation.

    Leaving at exit ``n`` costs the trunk up to that branch's attach point plus
    every branch classifier evaluated on the way (``1..n``). Reaching exit N
    costs the full trunk plus all branches.
    """
    per_layer = trunk_layer_macs(spec)
    per_branch = branch_macs(spec)
    out = []
    for k, b in enumerate(spec.branches):
        out.append(sum(per_layer[: b.attach_after + 1]) + sum(per_branch[: k + 1]))
    out.append(sum(per_layer) + sum(per_branch))
    return out


def baseline_macs(spec):
    return sum(trunk_layer_macs(spec))


def predict(spec, params, x, exit_index=None, batch_size=512):
    """Argmax class at one exit (default: the last), evaluated in batches."""
    n = spec.num_exits if exit_index is None else exit_index
    preds = []
    for s in range(0, len(x), batch_size):
        logits = forward_all_exits(spec, params, x[s:s + batch_size])[n - 1]
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.intp)

