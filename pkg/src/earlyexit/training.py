"""Adam and the two-phase training pipeline.

Phase one trains the trunk on its own. Phase two copies the trunk weights
into the multi-exit network, initializes the branches fresh, and trains every
exit jointly on the weighted loss. The trunk stays trainable in phase two.
"""

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .graph import (
    backward_joint,
    check_exit_weights,
    forward_all_exits,
    init_params,
)
from .layers import ActivationCache, cross_entropy, one_hot, softmax
from .reporting import atomic_open, timestamp_line

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "split", "exit", "loss", "accuracy")


class Adam:
    """Adam with bias-corrected moment estimates.

    ``step`` consumes the gradients stored in the ``ParameterStore`` and zeroes
    them afterwards.
    """

    def __init__(self, alpha=0.001, beta1=0.99, beta2=0.999, eps=1e-8):
        if alpha < 0 or not 0 < beta1 < 1 or not 0 < beta2 < 1 or eps <= 0:
            raise ValidationError(f"invalid Adam hyperparameters alpha={alpha} beta1={beta1} beta2={beta2} eps={eps}")
        self.alpha = alpha
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, theta in params.items():
            g = params.grad(name)
            if name not in self.m:
                self.m[name] = np.zeros_like(theta)
                self.v[name] = np.zeros_like(theta)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            theta -= (self.alpha * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(theta.dtype, copy=False)
        params.zero_grad()


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 64
    alpha: float = 0.001
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    exit_weights: list = field(default_factory=lambda: [1.0, 0.3])
    seed: int = 0
    phase: str = "branchy"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError(f"epochs must be >= 0 and batch_size >= 1, got {self.epochs}, {self.batch_size}")
        if self.phase not in ("baseline", "branchy"):
            raise ValidationError(f"phase must be 'baseline' or 'branchy', got {self.phase!r}")
        # constructing the optimizer checks the remaining ranges
        Adam(self.alpha, self.beta1, self.beta2, self.eps)

    def optimizer(self):
        return Adam(self.alpha, self.beta1, self.beta2, self.eps)


def exit_metrics(spec, params, data, batch_size=500):
    """Per-exit (loss, accuracy) over a dataset, evaluated in inference mode."""
    n = len(data)
    loss = np.zeros(spec.num_exits)
    correct = np.zeros(spec.num_exits, dtype=np.int64)
    for s in range(0, n, batch_size):
        x = data.images[s:s + batch_size]
        labels = data.labels[s:s + batch_size]
        y = one_hot(labels, spec.num_classes)
        for k, z in enumerate(forward_all_exits(spec, params, x)):
            loss[k] += cross_entropy(softmax(z), y)[0] * len(labels)
            correct[k] += int(np.sum(np.argmax(z, axis=1) == labels))
    return loss / n, correct / n


def _records(epoch, split, losses, accs):
    return [
        {"epoch": epoch, "split": split, "exit": k + 1, "loss": float(l), "accuracy": float(a)}
        for k, (l, a) in enumerate(zip(losses, accs))
    ]


def fit(spec, params, train, config, weights, validation=None):
    """Minimize the weighted multi-exit loss with Adam; returns per-epoch metric records.

    Epoch 0 records the validation metrics before any update. Each epoch uses a
    fresh seeded permutation; the last partial batch is kept.
    """
    if len(train) == 0:
        raise ValidationError("training set is empty")
    weights = check_exit_weights(weights, spec.num_exits)
    opt = config.optimizer()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    records = []
    if validation is not None and len(validation):
        records += _records(0, "validation", *exit_metrics(spec, params, validation))
    n = len(train)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        loss_sum = np.zeros(spec.num_exits)
        correct = np.zeros(spec.num_exits, dtype=np.int64)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            x = train.images[idx]
            labels = train.labels[idx]
            y = one_hot(labels, spec.num_classes)
            cache = ActivationCache()
            logits = forward_all_exits(spec, params, x, cache)
            _, losses = backward_joint(spec, params, cache, y, weights)
            opt.step(params)
            loss_sum += np.asarray(losses) * len(idx)
            for k, z in enumerate(logits):
                correct[k] += int(np.sum(np.argmax(z, axis=1) == labels))
        records += _records(epoch, "train", loss_sum / n, correct / n)
        if validation is not None and len(validation):
            vl, va = exit_metrics(spec, params, validation)
            records += _records(epoch, "validation", vl, va)
            log.info("epoch %d (%.1fs): validation accuracy per exit %s", epoch, time.perf_counter() - t0,
                     ", ".join(f"{a:.4f}" for a in va))
        else:
            log.info("epoch %d (%.1fs): train accuracy per exit %s", epoch, time.perf_counter() - t0,
                     ", ".join(f"{a:.4f}" for a in correct / n))
    return records


def train_baseline(spec, train, config, validation=None, dtype=np.float32):
    """Phase one: train a branch-free network from a fresh seeded init."""
    if spec.branches:
        raise ValidationError("train_baseline expects a network without branches; use spec.trunk_only()")
    params = init_params(spec, np.random.default_rng(np.random.SeedSequence([config.seed, 0])), dtype)
    records = fit(spec, params, train, config, [1.0], validation)
    return params, records


def init_branchy_from_baseline(spec, baseline_params, seed=0, baseline_spec=None):
    """Trunk parameters copied from the baseline; branch parameters freshly initialized."""
    if baseline_spec is not None and tuple(baseline_spec.trunk) != tuple(spec.trunk):
        diff = [
            i for i in range(max(len(spec.trunk), len(baseline_spec.trunk)))
            if i >= len(spec.trunk) or i >= len(baseline_spec.trunk) or spec.trunk[i] != baseline_spec.trunk[i]
        ]
        raise ValidationError(f"trunk layers differ from the baseline at indices {diff}")
    params = init_params(spec, np.random.default_rng(np.random.SeedSequence([seed, 2])), baseline_params.dtype)
    trunk_names = [n for n in params if n.startswith("trunk.")]
    mismatched = [
        n for n in trunk_names if n not in baseline_params or baseline_params[n].shape != params[n].shape
    ]
    extra = [n for n in baseline_params if n not in params]
    if mismatched or extra:
        raise ValidationError(f"baseline parameters do not fit this trunk; differing: {sorted(mismatched + extra)}")
    for n in trunk_names:
        params[n] = baseline_params[n]
    return params


def train_branchy(spec, params, train, config, validation=None):
    """Phase two: jointly train every exit starting from ``params`` (modified in place)."""
    if config.exit_weights is None:
        raise ValidationError("exit weights required for joint training")
    records = fit(spec, params, train, config, config.exit_weights, validation)
    return params, records


def write_metrics_csv(records, path, timestamp=True):
    with atomic_open(path) as f:
        if timestamp:
            f.write(timestamp_line())
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({**r, "loss": f"{r['loss']:.10g}", "accuracy": f"{r['accuracy']:.10g}"})
