"""Threshold sweeps and knee-point selection.

A sweep evaluates every combination of per-exit threshold candidates on one
dataset and records accuracy, expected MACs and exit fractions for each. The
knee is the cheapest point whose accuracy stays within a slack of the
baseline network's accuracy.
"""

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .inference import ThresholdVector, evaluate_profile, exit_profile
from .reporting import atomic_open, timestamp_line

DEFAULT_SLACK = 0.5  # percentage points
_ACC_TOL = 1e-12


class KneeWarning(UserWarning):
    """No sweep point came within the accuracy slack of the baseline."""


@dataclass
class SweepPoint:
    thresholds: ThresholdVector
    accuracy: float
    expected_macs: float
    speedup: float
    exit_fractions: list


@dataclass
class SweepReport:
    points: list
    baseline_accuracy: float
    baseline_macs: int
    knee: int = None
    knee_ok: bool = True
    slack: float = DEFAULT_SLACK
    grid: list = field(default=None, repr=False)

    @property
    def knee_point(self):
        return None if self.knee is None else self.points[self.knee]

    @property
    def num_thresholds(self):
        return len(self.points[0].thresholds) if self.points else 0


def default_grid(num_classes, num_exits, size=25, low=1e-4):
    """Per coordinate: 0 plus ``size`` log-spaced values in ``[low, ln C]``."""
    values = [0.0] + np.geomspace(low, math.log(num_classes), size).tolist()
    return [values] * (num_exits - 1)


def parse_grid(text, num_exits):
    """Grid from text: ``"a,b,c"`` for every coordinate, or ``"a,b;c,d"`` per coordinate."""
    coords = [c for c in text.split(";")]
    try:
        parsed = [[float(v) for v in c.split(",") if v.strip()] for c in coords]
    except ValueError:
        raise ValidationError(f"cannot parse grid {text!r}") from None
    if len(parsed) == 1:
        parsed = parsed * (num_exits - 1)
    return parsed


def _check_grid(grid, num_exits):
    if len(grid) != num_exits - 1:
        raise ValidationError(f"grid has {len(grid)} coordinates, network has {num_exits - 1} thresholds")
    for k, values in enumerate(grid, start=1):
        if len(values) == 0:
            raise ValidationError(f"grid coordinate {k} is empty")
        ThresholdVector(values)  # range check
    return [[float(v) for v in values] for values in grid]


def knee_index(points, baseline_accuracy, slack=DEFAULT_SLACK):
    """Index of the knee and whether it met the accuracy constraint.

    Among points with accuracy >= baseline - slack (percentage points), pick
    the lowest expected MACs; ties go to higher accuracy, then to the
    lexicographically lower threshold vector. If nothing qualifies, fall back
    to the most accurate point and report ``ok=False``.
    """
    if not points:
        raise ValidationError("cannot select a knee from an empty sweep")
    floor = baseline_accuracy - slack / 100.0 - _ACC_TOL
    ok = [i for i, p in enumerate(points) if p.accuracy >= floor]
    if ok:
        best = min(ok, key=lambda i: (points[i].expected_macs, -points[i].accuracy, points[i].thresholds.t))
        return best, True
    best = min(range(len(points)), key=lambda i: (-points[i].accuracy, points[i].expected_macs, points[i].thresholds.t))
    return best, False


def select_knee(report, slack=DEFAULT_SLACK):
    """The knee point of ``report`` for the given slack; warns when no point qualifies."""
    i, ok = knee_index(report.points, report.baseline_accuracy, slack)
    if not ok:
        warnings.warn(
            f"no sweep point within {slack} pp of baseline accuracy {report.baseline_accuracy:.4f}; "
            "returning the most accurate point",
            KneeWarning,
            stacklevel=2,
        )
    return report.points[i]


def sweep(spec, params, dataset, grid=None, baseline_accuracy=None, baseline_macs=None,
          slack=DEFAULT_SLACK, profile=None):
    """Evaluate the Cartesian product of ``grid`` on ``dataset``.

    Points come out in ``itertools.product`` order over the grid coordinates.
    ``baseline_accuracy`` defaults to the final exit's accuracy (every gate
    closed) and ``baseline_macs`` to the trunk's MAC count.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot sweep an empty dataset")
    grid = _check_grid(default_grid(spec.num_classes, spec.num_exits) if grid is None else grid, spec.num_exits)
    if profile is None:
        profile = exit_profile(spec, params, dataset)
    if baseline_accuracy is None:
        baseline_accuracy = float(np.mean(profile.predictions[:, -1] == profile.labels))
    if baseline_macs is None:
        baseline_macs = profile.baseline_macs
    points = []
    for combo in itertools.product(*grid):
        r = evaluate_profile(profile, ThresholdVector(combo))
        points.append(SweepPoint(r.thresholds, r.accuracy, r.expected_macs, baseline_macs / r.expected_macs,
                                 r.exit_fractions))
    report = SweepReport(points, float(baseline_accuracy), int(baseline_macs), slack=slack, grid=grid)
    report.knee, report.knee_ok = knee_index(points, report.baseline_accuracy, slack)
    return report


def threshold_curve(report):
    """Accuracy and exit-1 share against the threshold, for single-threshold sweeps.

    Returns ``(thresholds, accuracy, exit1_fraction)`` sorted by threshold.
    """
    if report.num_thresholds != 1:
        raise ValidationError("threshold curve needs a model with exactly one branch exit")
    pts = sorted(report.points, key=lambda p: p.thresholds[0])
    return (
        np.array([p.thresholds[0] for p in pts]),
        np.array([p.accuracy for p in pts]),
        np.array([p.exit_fractions[0] for p in pts]),
    )


def sweep_header(num_exits):
    return (
        [f"t_{k}" for k in range(1, num_exits)]
        + ["accuracy", "expected_macs", "speedup"]
        + [f"exit_frac_{k}" for k in range(1, num_exits + 1)]
        + ["knee"]
    )


def write_sweep_csv(report, path, timestamp=True):
    """One row per point; the knee row has ``knee = 1``."""
    n_exits = report.num_thresholds + 1
    with atomic_open(path) as f:
        if timestamp:
            f.write(timestamp_line())
        w = csv.writer(f, lineterminator="\n")
        w.writerow(sweep_header(n_exits))
        for i, p in enumerate(report.points):
            w.writerow(
                [repr(t) for t in p.thresholds]
                + [repr(p.accuracy), repr(p.expected_macs), repr(p.speedup)]
                + [repr(v) for v in p.exit_fractions]
                + [int(i == report.knee)]
            )
