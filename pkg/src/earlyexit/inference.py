"""Entropy-gated early-exit inference and its cost accounting.

A sample walks the exits in order. At exit ``n < N`` the branch classifier's
softmax entropy ``e`` is compared with ``T[n]``; the sample leaves when
``e < T[n]``. The last exit always answers. Trunk layers run lazily, so a
sample that continues past a branch reuses the trunk prefix already computed.
"""

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .graph import (
    baseline_macs,
    branch_macs,
    exit_macs,
    forward_all_exits,
    run_branch,
    trunk_layer_macs,
    trunk_name,
)
from .layers import PROB_FLOOR, layer_forward, softmax
from .reporting import atomic_open, timestamp_line

TRACE_FIELDS = ("sample_id", "exit_index", "entropy", "predicted", "true", "macs")


def entropy(p):
    """Shannon entropy in nats along the last axis: ``-sum p ln p``.

    Probabilities are clamped at 1e-12 inside the log, so zero entries
    contribute nothing and the result stays within ``[0, ln C]``.
    """
    p = np.asarray(p, dtype=np.float64)
    h = -np.sum(p * np.log(np.clip(p, PROB_FLOOR, 1.0)), axis=-1)
    return h + 0.0  # turns -0.0 into 0.0


@dataclass(frozen=True)
class ThresholdVector:
    """One entropy threshold per branch exit; the final exit has none."""

    t: tuple

    def __post_init__(self):
        try:
            values = tuple(float(v) for v in self.t)
        except (TypeError, ValueError):
            raise ValidationError(f"thresholds must be numbers, got {self.t!r}") from None
        bad = [v for v in values if not math.isfinite(v) or v < 0]
        if bad:
            raise ValidationError(f"thresholds must be finite and >= 0, got {list(values)}")
        object.__setattr__(self, "t", values)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        return self.t[i]

    def __iter__(self):
        return iter(self.t)


def as_thresholds(T, num_exits):
    tv = T if isinstance(T, ThresholdVector) else ThresholdVector(np.atleast_1d(np.asarray(T, dtype=object)).tolist())
    if len(tv) != num_exits - 1:
        raise ValidationError(f"expected {num_exits - 1} thresholds for a {num_exits}-exit network, got {len(tv)}")
    return tv


def parse_thresholds(text, num_exits):
    """Comma-separated thresholds, e.g. ``"0.025"`` or ``"0.1,0.05"``."""
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"cannot parse thresholds {text!r}") from None
    return as_thresholds(values, num_exits)


@dataclass
class ExitDecision:
    predicted_class: int
    exit_index: int
    entropy: float
    entropies: list  # entropy at every exit evaluated, in order
    logits: np.ndarray = field(repr=False, default=None)


@dataclass
class CostReport:
    macs_evaluated: int
    wall_time: float


def fast_inference(spec, params, x, T):
    """Classify one sample with entropy-gated early exit.

    ``x`` is ``(C, H, W)`` or ``(1, C, H, W)``. Returns
    ``(ExitDecision, CostReport)``; the MAC count covers only the layers that
    actually ran, including branch classifiers whose gate stayed closed.
    """
    T = as_thresholds(T, spec.num_exits)
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.shape != (1,) + spec.input_shape:
        raise DimensionError(f"fast_inference takes one sample of shape {spec.input_shape}, got {x.shape}")
    layer_macs = trunk_layer_macs(spec)
    per_branch = branch_macs(spec)

    t0 = time.perf_counter()
    h, done, macs = x, 0, 0
    entropies = []

    def advance(upto):
        nonlocal h, done, macs
        for i in range(done, upto + 1):
            h = layer_forward(spec.trunk[i], params, trunk_name(i), h)
            macs += layer_macs[i]
        done = max(done, upto + 1)

    for k, b in enumerate(spec.branches):
        advance(b.attach_after)
        z = run_branch(b, params, h)
        macs += per_branch[k]
        e = float(entropy(softmax(z))[0])
        entropies.append(e)
        if e < T[k]:
            decision = ExitDecision(int(np.argmax(z[0])), b.exit_index, e, entropies, z[0])
            return decision, CostReport(macs, time.perf_counter() - t0)
    advance(len(spec.trunk) - 1)
    e = float(entropy(softmax(h))[0])
    entropies.append(e)
    decision = ExitDecision(int(np.argmax(h[0])), spec.num_exits, e, entropies, h[0])
    return decision, CostReport(macs, time.perf_counter() - t0)


@dataclass
class ExitProfile:
    """Entropy and argmax at every exit for every sample of a dataset.

    Gating is a pure function of these arrays, so one profile serves any
    number of threshold vectors.
    """

    entropies: np.ndarray  # (n, N)
    predictions: np.ndarray  # (n, N)
    labels: np.ndarray
    exit_macs: list
    baseline_macs: int

    def __len__(self):
        return len(self.labels)

    @property
    def num_exits(self):
        return self.entropies.shape[1]

    def exits(self, T):
        """1-based exit index per sample under thresholds ``T``."""
        T = as_thresholds(T, self.num_exits)
        out = np.full(len(self), self.num_exits, dtype=np.int64)
        pending = np.ones(len(self), dtype=bool)
        for k, t in enumerate(T):
            leave = pending & (self.entropies[:, k] < t)
            out[leave] = k + 1
            pending &= ~leave
        return out


def exit_profile(spec, params, dataset, batch_size=500):
    """Evaluate every exit on every sample (batched)."""
    n = len(dataset)
    ent = np.empty((n, spec.num_exits))
    pred = np.empty((n, spec.num_exits), dtype=np.int64)
    for s in range(0, n, batch_size):
        for k, z in enumerate(forward_all_exits(spec, params, dataset.images[s:s + batch_size])):
            ent[s:s + len(z), k] = entropy(softmax(z))
            pred[s:s + len(z), k] = np.argmax(z, axis=1)
    return ExitProfile(ent, pred, np.asarray(dataset.labels), exit_macs(spec), baseline_macs(spec))


@dataclass
class EvalReport:
    thresholds: ThresholdVector
    accuracy: float
    exit_fractions: list
    expected_macs: float
    baseline_macs: int
    speedup: float
    mean_latency: float = None  # seconds per sample at batch size 1, when measured
    exit_index: np.ndarray = field(repr=False, default=None)
    predicted: np.ndarray = field(repr=False, default=None)
    entropy: np.ndarray = field(repr=False, default=None)
    labels: np.ndarray = field(repr=False, default=None)
    macs: np.ndarray = field(repr=False, default=None)

    @property
    def num_samples(self):
        return len(self.labels)

    def row(self):
        """One line in the layout of a results table: accuracy, cost, gain, thresholds, exit shares."""
        t = ", ".join(f"{v:g}" for v in self.thresholds) or "-"
        exits = " / ".join(f"{100 * f:.2f}" for f in self.exit_fractions)
        line = (
            f"acc {100 * self.accuracy:.2f}%  avg MACs {self.expected_macs:,.0f}  "
            f"speedup {self.speedup:.2f}x  T [{t}]  exit % {exits}"
        )
        if self.mean_latency is not None:
            line += f"  latency {1e3 * self.mean_latency:.3f} ms"
        return line


def _report(T, exits, predicted, ent, labels, exit_cost, base_macs, latency=None):
    n = len(labels)
    counts = np.bincount(exits, minlength=len(exit_cost) + 1)[1:]
    macs = np.asarray(exit_cost, dtype=np.int64)[exits - 1]
    expected = float(np.mean(macs))
    return EvalReport(
        thresholds=T,
        accuracy=float(np.mean(predicted == labels)),
        exit_fractions=[float(c / n) for c in counts],
        expected_macs=expected,
        baseline_macs=base_macs,
        speedup=base_macs / expected,
        mean_latency=latency,
        exit_index=exits,
        predicted=predicted,
        entropy=ent,
        labels=labels,
        macs=macs,
    )


def evaluate_profile(profile, T):
    """Aggregate report for thresholds ``T`` from a precomputed ``ExitProfile``."""
    if len(profile) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    T = as_thresholds(T, profile.num_exits)
    exits = profile.exits(T)
    rows = np.arange(len(profile))
    return _report(
        T, exits, profile.predictions[rows, exits - 1], profile.entropies[rows, exits - 1],
        profile.labels, profile.exit_macs, profile.baseline_macs,
    )


def evaluate(spec, params, dataset, T, method="batched", profile=None):
    """Accuracy, exit fractions, expected MACs and speedup over ``dataset``.

    ``method="batched"`` gates a batched exit profile (fast, used for sweeps);
    ``method="sequential"`` runs ``fast_inference`` sample by sample and also
    reports the mean batch-size-1 latency.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    T = as_thresholds(T, spec.num_exits)
    if method == "batched":
        return evaluate_profile(profile if profile is not None else exit_profile(spec, params, dataset), T)
    if method != "sequential":
        raise ValidationError(f"unknown evaluation method {method!r}")
    n = len(dataset)
    exits = np.empty(n, dtype=np.int64)
    predicted = np.empty(n, dtype=np.int64)
    ent = np.empty(n)
    total_time = 0.0
    for i in range(n):
        d, cost = fast_inference(spec, params, dataset.images[i], T)
        exits[i], predicted[i], ent[i] = d.exit_index, d.predicted_class, d.entropy
        total_time += cost.wall_time
    return _report(
        T, exits, predicted, ent, np.asarray(dataset.labels), exit_macs(spec), baseline_macs(spec), total_time / n
    )


def measure_latency(spec, params, images, T=None, repeats=1):
    """Mean wall-clock seconds per sample at batch size 1.

    With ``T=None`` the plain trunk runs (the baseline network); otherwise
    each sample goes through ``fast_inference``.
    """
    if len(images) == 0:
        raise ValidationError("no samples to time")
    base = spec.trunk_only()
    if T is not None:
        T = as_thresholds(T, spec.num_exits)
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for x in images:
            if T is None:
                forward_all_exits(base, params, x[None])
            else:
                fast_inference(spec, params, x, T)
        best = min(best, time.perf_counter() - t0)
    return best / len(images)


def write_trace_csv(report, path, timestamp=True):
    """Per-sample trace: which exit answered, its entropy and cost."""
    with atomic_open(path) as f:
        if timestamp:
            f.write(timestamp_line())
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for i in range(report.num_samples):
            w.writerow([
                i, int(report.exit_index[i]), repr(float(report.entropy[i])),
                int(report.predicted[i]), int(report.labels[i]), int(report.macs[i]),
            ])
