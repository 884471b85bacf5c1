"""Command-line interface: ``earlyexit <subcommand> ...``.

Typical pipeline::

    earlyexit train-baseline --data-dir mnist --model-out base.bnet
    earlyexit train-branchy  --data-dir mnist --init-from base.bnet --model-out branchy.bnet
    earlyexit sweep --data-dir mnist --model-in branchy.bnet --baseline-model base.bnet --out sweep.csv
    earlyexit eval  --data-dir mnist --model-in branchy.bnet --thresholds 0.025
"""

import argparse
import logging
import os
import sys

from . import __version__
from .config import load_config
from .data import load_mnist, load_mnist_split
from .errors import ConfigError, DimensionError, ModelFormatError, ParseError, ValidationError
from .inference import evaluate, exit_profile, fast_inference, measure_latency, parse_thresholds, write_trace_csv
from .modelio import load_model, save_model
from .screening import DEFAULT_SLACK, default_grid, parse_grid, sweep, write_sweep_csv
from .training import init_branchy_from_baseline, train_baseline, train_branchy, write_metrics_csv

log = logging.getLogger("earlyexit")

DEFAULT_SEED = 0
VALIDATION_SIZE = 5000


class CommandError(Exception):
    pass


def _metrics_path(args):
    return args.out or os.path.splitext(args.model_out)[0] + "-metrics.csv"


def _train_config(args):
    spec, config = load_config(args.config)
    if args.epochs is not None:
        if args.epochs < 0:
            raise CommandError(f"--epochs must be >= 0, got {args.epochs}")
        config.epochs = args.epochs
    if args.seed is not None:
        config.seed = args.seed
    return spec, config


def cmd_train_baseline(args):
    spec, config = _train_config(args)
    config.phase = "baseline"
    data = load_mnist_split(args.data_dir, args.validation_size, args.split_seed)
    base = spec.trunk_only()
    params, records = train_baseline(base, data.train, config, data.validation)
    save_model(args.model_out, base, params)
    write_metrics_csv(records, _metrics_path(args), timestamp=not args.no_timestamp)
    acc = records[-1]["accuracy"] if records else float("nan")
    print(f"baseline saved to {args.model_out} (validation accuracy {100 * acc:.2f}%)")


def cmd_train_branchy(args):
    if not args.init_from:
        raise CommandError(
            "train-branchy needs --init-from BASELINE_MODEL: training is two-phase, "
            "first train-baseline, then initialize the branchy network from that model"
        )
    spec, config = _train_config(args)
    base = load_model(args.init_from)
    params = init_branchy_from_baseline(spec, base.params, config.seed, baseline_spec=base.spec)
    data = load_mnist_split(args.data_dir, args.validation_size, args.split_seed)
    params, records = train_branchy(spec, params, data.train, config, data.validation)
    save_model(args.model_out, spec, params)
    write_metrics_csv(records, _metrics_path(args), timestamp=not args.no_timestamp)
    accs = [r["accuracy"] for r in records if r["epoch"] == config.epochs and r["split"] == "validation"]
    print(f"branchy model saved to {args.model_out} (validation accuracy per exit "
          + ", ".join(f"{100 * a:.2f}%" for a in accs) + ")")


def _dataset(args):
    if args.split == "test":
        return load_mnist(args.data_dir, "test")
    return load_mnist_split(args.data_dir, args.validation_size, args.split_seed).validation


def _thresholds(args, spec):
    if args.thresholds is None:
        return parse_thresholds(",".join(["0"] * (spec.num_exits - 1)), spec.num_exits)
    return parse_thresholds(args.thresholds, spec.num_exits)


def cmd_eval(args):
    model = load_model(args.model_in)
    T = _thresholds(args, model.spec)
    data = _dataset(args)
    method = "sequential" if args.latency else "batched"
    report = evaluate(model.spec, model.params, data, T, method=method)
    if args.trace:
        write_trace_csv(report, args.trace, timestamp=not args.no_timestamp)
    print(report.row())
    if args.latency:
        base = measure_latency(model.spec, model.params, data.images)
        print(f"baseline latency {1e3 * base:.3f} ms  wall-clock speedup {base / report.mean_latency:.2f}x")


def cmd_sweep(args):
    model = load_model(args.model_in)
    spec = model.spec
    data = _dataset(args)
    grid = default_grid(spec.num_classes, spec.num_exits) if args.grid is None else parse_grid(args.grid, spec.num_exits)
    baseline_accuracy = None
    if args.baseline_model:
        base = load_model(args.baseline_model)
        baseline_accuracy = evaluate(base.spec, base.params, data, []).accuracy
    profile = exit_profile(spec, model.params, data)
    report = sweep(spec, model.params, data, grid, baseline_accuracy, slack=args.slack, profile=profile)
    write_sweep_csv(report, args.out, timestamp=not args.no_timestamp)
    if not args.no_plot:
        from .plots import figure_path, plot_sweep

        plot_sweep(report, figure_path(args.out))
    knee = report.knee_point
    status = "" if report.knee_ok else f"  WARNING: no point within {args.slack} pp of baseline"
    print(f"{len(report.points)} points written to {args.out}; baseline accuracy {100 * report.baseline_accuracy:.2f}%")
    print(
        "knee: T [" + ", ".join(f"{t:g}" for t in knee.thresholds) + f"]  acc {100 * knee.accuracy:.2f}%  "
        f"avg MACs {knee.expected_macs:,.0f}  speedup {knee.speedup:.2f}x  exit % "
        + " / ".join(f"{100 * f:.2f}" for f in knee.exit_fractions) + status
    )


def cmd_infer(args):
    model = load_model(args.model_in)
    T = _thresholds(args, model.spec)
    data = _dataset(args)
    if not 0 <= args.index < len(data):
        raise CommandError(f"--index {args.index} outside 0..{len(data) - 1}")
    decision, cost = fast_inference(model.spec, model.params, data.images[args.index], T)
    print(
        f"sample {args.index}: predicted {decision.predicted_class} (true {int(data.labels[args.index])}) "
        f"at exit {decision.exit_index}, entropy {decision.entropy:.6g}, "
        f"entropies [{', '.join(f'{e:.6g}' for e in decision.entropies)}], "
        f"MACs {cost.macs_evaluated:,}, {1e3 * cost.wall_time:.3f} ms"
    )


def build_parser():
    p = argparse.ArgumentParser(prog="earlyexit", description="Train and run entropy-gated early-exit CNNs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-dir", required=True, help="directory holding the MNIST IDX files")
    common.add_argument("--seed", type=int, help=f"training seed (default: the config's, {DEFAULT_SEED} in the bundled one)")
    common.add_argument("--split-seed", type=int, default=0, help="seed of the train/validation split (default 0)")
    common.add_argument("--validation-size", type=int, default=VALIDATION_SIZE,
                        help=f"examples held out from training for validation (default {VALIDATION_SIZE})")
    common.add_argument("--no-timestamp", action="store_true", help="omit the '# generated' line in CSV outputs")
    common.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = p.add_subparsers(dest="command", required=True)

    def train_parser(name, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.add_argument("--config", help="network/training config (default: bundled b-lenet)")
        sp.add_argument("--epochs", type=int, help="override the config's epoch count")
        sp.add_argument("--model-out", required=True)
        sp.add_argument("--out", help="metrics CSV (default: <model-out>-metrics.csv)")
        return sp

    sp = train_parser("train-baseline", "phase one: train the trunk alone")
    sp.set_defaults(func=cmd_train_baseline)
    sp = train_parser("train-branchy", "phase two: train all exits jointly from a baseline")
    sp.add_argument("--init-from", help="baseline model file (required)")
    sp.set_defaults(func=cmd_train_branchy)

    def model_parser(name, help_text, default_split):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.add_argument("--model-in", required=True)
        sp.add_argument("--split", choices=("test", "validation"), default=default_split)
        return sp

    sp = model_parser("eval", "accuracy, exit shares and cost at fixed thresholds", "test")
    sp.add_argument("--thresholds", help="comma-separated, one per branch exit (default: all 0)")
    sp.add_argument("--trace", help="write a per-sample trace CSV here")
    sp.add_argument("--latency", action="store_true", help="run sample by sample and time batch-size-1 inference")
    sp.set_defaults(func=cmd_eval)

    sp = model_parser("sweep", "screen threshold combinations and pick the knee", "validation")
    sp.add_argument("--grid", help="'a,b,c' for every exit or 'a,b;c,d' per exit (default: 0 + 25 log-spaced)")
    sp.add_argument("--slack", type=float, default=DEFAULT_SLACK, help="accuracy slack in percentage points")
    sp.add_argument("--baseline-model", help="baseline model whose accuracy anchors the knee")
    sp.add_argument("--out", required=True, help="sweep CSV; a PNG figure is written next to it")
    sp.add_argument("--no-plot", action="store_true", help="skip the PNG figure")
    sp.set_defaults(func=cmd_sweep)

    sp = model_parser("infer", "classify one sample with early exit", "test")
    sp.add_argument("--index", type=int, default=0, help="sample index within the split")
    sp.add_argument("--thresholds", help="comma-separated, one per branch exit (default: all 0)")
    sp.set_defaults(func=cmd_infer)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CommandError, ConfigError, DimensionError, ModelFormatError, ParseError, ValidationError, OSError) as e:
        print(f"earlyexit {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
