"""
capesynth command line: calibrate, account, generate, evaluate, sweep, make-blobs.

Exit codes: 0 success, 1 internal error, 2 user or configuration error.
Failures print one machine-readable line to stderr: error: <category>: <detail>
"""

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from capesynth.accountant import PrivacyParams, calibrate_tau, local_sampling_report, total_epsilon
from capesynth.config import Settings, read_flat_config
from capesynth.data_io import (Dataset, atomic_write, load_idx_dataset, make_blobs,
                               read_binary_synthetic, read_csv_dataset, split_dataset, stratified_subset,
                               write_binary_synthetic, write_csv_dataset)
from capesynth.errors import CapeSynthError, ConfigurationError
from capesynth.evaluation import (DEFAULT_BATCH_SIZE, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE, SweepGrid,
                                  evaluate_synthetic, release_provenance, report_sidecar, sweep)
from capesynth.federation import Mode, RunConfig, noise_scales_for, run_pipeline

logger = logging.getLogger("capesynth.cli")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USER = 2


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting on bad flags"""

    def error(self, message):
        raise ConfigurationError(message)


# ---------------------------------------------------------------- flag types

def _epsilon(value: str) -> float:
    try:
        epsilon = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"epsilon must be a positive number or 'inf', got {value!r}")
    if not epsilon > 0:
        raise argparse.ArgumentTypeError(f"epsilon must be positive, got {value!r}")
    return epsilon


def _positive_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value!r}")
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value!r}")
    return number


def _comma_list(item_type):
    def parse(value: str) -> list:
        items = [item.strip() for item in value.split(",") if item.strip()]
        return [item_type(item) for item in items]
    parse.__name__ = f"{item_type.__name__}_list"
    return parse


def _mode(value: str) -> Mode:
    try:
        return Mode.parse(value)
    except ConfigurationError as e:
        raise argparse.ArgumentTypeError(str(e))


def _flag(value) -> bool:
    if isinstance(value, bool):
        return value
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off", ""):
        return False
    raise ConfigurationError(f"expected a boolean, got {value!r}")


# ---------------------------------------------------------------- parser

def _common_parent(settings: Settings) -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--seed", type=int, default=settings.seed, help="master seed (default 42)")
    parent.add_argument("--delta", type=float, default=settings.delta, help="DP delta (default 1e-5)")
    parent.add_argument("--alpha-max", type=int, default=settings.alpha_max,
                        help="largest Renyi order searched (default 200)")
    parent.add_argument("--threads", type=int, default=settings.threads, help="worker threads, 0 = auto")
    parent.add_argument("--config", help="flat key=value file supplying flag defaults")
    parent.add_argument("--log-level", default=settings.log_level, help="DEBUG, INFO, WARNING, ERROR")
    return parent


def _mechanism_flags(parser: argparse.ArgumentParser, with_sizes: bool = True):
    parser.add_argument("--l", type=_positive_int, help="order of mixture")
    parser.add_argument("--c", type=float, default=1.0, help="clipping threshold (default 1)")
    parser.add_argument("--S", type=_positive_int, default=1, help="number of clients (default 1)")
    if with_sizes:
        parser.add_argument("--N", type=_positive_int, help="real dataset size")
        parser.add_argument("--K", type=_positive_int, help="number of classes")
        parser.add_argument("--T", type=_positive_int, help="synthetic records released")


def _real_data_flags(parser: argparse.ArgumentParser, prefix: str, required_help: str):
    parser.add_argument(f"--{prefix}", help=required_help)
    parser.add_argument(f"--{prefix}-labels", help="IDX label file paired with an IDX image file")


def _classifier_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    parser.add_argument("--learning-rate", type=float, default=DEFAULT_LEARNING_RATE)
    parser.add_argument("--batch-size", type=_positive_int, default=DEFAULT_BATCH_SIZE)


def build_parser(settings: Optional[Settings] = None) -> CliParser:
    settings = settings or Settings.from_env()
    parent = _common_parent(settings)
    parser = CliParser(prog="capesynth", description="Federated differentially private synthetic data")
    subparsers = parser.add_subparsers(dest="command", parser_class=CliParser)

    calibrate = subparsers.add_parser("calibrate", parents=[parent], help="noise scales for a target epsilon")
    calibrate.add_argument("--epsilon", type=_epsilon, help="target epsilon, or 'inf'")
    calibrate.add_argument("--mode", type=_mode, default=Mode.FED_CAPE)
    _mechanism_flags(calibrate)
    calibrate.add_argument("--curve-out", help="write the alpha,rdp curve as CSV")
    calibrate.set_defaults(handler=cmd_calibrate)

    account = subparsers.add_parser("account", parents=[parent], help="epsilon for a given noise scale")
    account.add_argument("--tau-g", type=float, help="centralized noise scale (calibrate's tau_central)")
    _mechanism_flags(account)
    account.add_argument("--local-sampling", action="store_true",
                         help="also report epsilon with the client-local sampling rate (diagnostic)")
    account.add_argument("--curve-out", help="write the alpha,rdp curve as CSV")
    account.set_defaults(handler=cmd_account)

    generate = subparsers.add_parser("generate", parents=[parent], help="run the synthesis pipeline")
    _real_data_flags(generate, "input", "real training data (CSV, or IDX images)")
    generate.add_argument("--format", choices=["csv", "idx"], help="input format (default: idx if labels given)")
    generate.add_argument("--label-column", default="label", help="CSV label column name or index")
    generate.add_argument("--num-classes", type=_positive_int, help="K (CSV default: max label + 1; IDX: 10)")
    generate.add_argument("--limit", type=_positive_int, help="class-stratified subset of the input")
    generate.add_argument("--mode", type=_mode, default=Mode.FED_CAPE)
    generate.add_argument("--epsilon", type=_epsilon, help="target epsilon, or 'inf'")
    generate.add_argument("--tau-g", type=float, help="use this centralized noise scale instead of calibrating")
    _mechanism_flags(generate, with_sizes=False)
    generate.add_argument("--T", type=_positive_int, help="records to release (default: N rounded down to K)")
    generate.add_argument("--with-replacement", action="store_true", help="always mix with replacement")
    generate.add_argument("--out", help="synthetic dataset path (.csv for CSV, otherwise binary)")
    generate.add_argument("--out-format", choices=["binary", "csv"])
    generate.add_argument("--report", help="accounting report path (default: <out>.report.txt)")
    generate.add_argument("--curve-out", help="write the alpha,rdp curve as CSV")
    generate.add_argument("--spool-dir", help="exchange client records through files in this directory")
    generate.set_defaults(handler=cmd_generate)

    evaluate = subparsers.add_parser("evaluate", parents=[parent], help="train on synthetic, test on real")
    evaluate.add_argument("--synthetic", help="synthetic dataset (binary, or CSV)")
    evaluate.add_argument("--release-report", help="report written by generate (default: <synthetic>.report.txt)")
    _real_data_flags(evaluate, "train", "real training data (normalization statistics and baseline)")
    _real_data_flags(evaluate, "test", "real held-out data")
    evaluate.add_argument("--format", choices=["csv", "idx"])
    evaluate.add_argument("--label-column", default="label")
    evaluate.add_argument("--num-classes", type=_positive_int)
    evaluate.add_argument("--c", type=float, default=1.0, help="clipping threshold used for generation")
    evaluate.add_argument("--baseline", action="store_true", help="train on real data too and report the ratio")
    evaluate.add_argument("--theta", type=float, help="check the utility threshold theta")
    _classifier_flags(evaluate)
    evaluate.set_defaults(handler=cmd_evaluate)

    sweep_cmd = subparsers.add_parser("sweep", parents=[parent], help="evaluate a mode/l/S/epsilon grid")
    _real_data_flags(sweep_cmd, "train", "real training data")
    _real_data_flags(sweep_cmd, "test", "real held-out data (default: split off --test-fraction)")
    sweep_cmd.add_argument("--format", choices=["csv", "idx"])
    sweep_cmd.add_argument("--label-column", default="label")
    sweep_cmd.add_argument("--num-classes", type=_positive_int)
    sweep_cmd.add_argument("--limit", type=_positive_int)
    sweep_cmd.add_argument("--test-fraction", type=float, default=0.2)
    sweep_cmd.add_argument("--modes", type=_comma_list(Mode.parse), default=[Mode.FED_CAPE])
    sweep_cmd.add_argument("--l", type=_comma_list(int), default=[4])
    sweep_cmd.add_argument("--S", type=_comma_list(int), default=[1])
    sweep_cmd.add_argument("--epsilon", type=_comma_list(_epsilon), default=[math.inf])
    sweep_cmd.add_argument("--seeds", type=_comma_list(int), help="seeds (default: --seed)")
    sweep_cmd.add_argument("--c", type=float, default=1.0)
    sweep_cmd.add_argument("--T", type=_positive_int)
    _classifier_flags(sweep_cmd)
    sweep_cmd.add_argument("--out", help="results CSV; existing rows are kept and skipped")
    sweep_cmd.set_defaults(handler=cmd_sweep)

    blobs = subparsers.add_parser("make-blobs", parents=[parent], help="write a Gaussian-blob CSV dataset")
    blobs.add_argument("--num-classes", type=_positive_int, default=10)
    blobs.add_argument("--per-class", type=_positive_int, default=500)
    blobs.add_argument("--num-features", type=_positive_int, default=20)
    blobs.add_argument("--spread", type=float, default=0.5)
    blobs.add_argument("--center-scale", type=float, default=5.0)
    blobs.add_argument("--out", help="CSV path")
    blobs.set_defaults(handler=cmd_make_blobs)

    parser.subcommands = subparsers.choices
    return parser


def _apply_config_file(parser: CliParser, args: argparse.Namespace, argv: List[str]) -> argparse.Namespace:
    """Reparse with defaults from --config; explicit flags still win"""
    sub = parser.subcommands[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "handler")}
    raw = read_flat_config(args.config, actions.keys())
    defaults = {}
    for dest, value in raw.items():
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[dest] = _flag(value)
            continue
        try:
            converted = action.type(value) if action.type else value
        except (argparse.ArgumentTypeError, ValueError) as e:
            raise ConfigurationError(f"config key {dest!r}: {e}")
        if action.choices is not None and converted not in action.choices:
            raise ConfigurationError(f"config key {dest!r}: {value!r} is not one of {list(action.choices)}")
        defaults[dest] = converted
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require(args: argparse.Namespace, *names: str):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise ConfigurationError(f"{args.command} requires {', '.join(missing)}")


# ---------------------------------------------------------------- helpers

def _load_real(path: str, labels: Optional[str], fmt: Optional[str], label_column: str,
               num_classes: Optional[int], limit: Optional[int] = None, seed: int = 42) -> Dataset:
    fmt = fmt or ("idx" if labels else "csv")
    if fmt == "idx":
        if labels is None:
            raise ConfigurationError(f"IDX input {path} needs its label file")
        return load_idx_dataset(path, labels, num_classes or 10, limit, seed)
    dataset = read_csv_dataset(path, label_column, num_classes)
    if limit is not None and limit < len(dataset):
        dataset = stratified_subset(dataset, limit, seed)
    return dataset


def _load_synthetic(path: str, num_classes: int) -> Dataset:
    if Path(path).suffix.lower() == ".csv":
        return read_csv_dataset(path, "label", num_classes)
    return read_binary_synthetic(path).as_dataset()


def _write_text(path: str, text: str):
    with atomic_write(path) as tmp:
        tmp.write_text(text)


def _default_release_size(N: int, K: int) -> int:
    return N - N % K


# ---------------------------------------------------------------- subcommands

def cmd_calibrate(args: argparse.Namespace) -> int:
    """Print the noise scales and accounting report for a target epsilon"""
    _require(args, "epsilon", "l", "N", "K", "T")
    S = args.mode.clients(args.S)
    privacy = PrivacyParams(args.epsilon, args.delta, args.l, args.c, args.T, args.N, args.K, S, args.alpha_max)
    _, report = calibrate_tau(replace(privacy, S=1))
    report = report.with_scales(noise_scales_for(args.mode, report.tau_central, S))
    print(f"mode={args.mode.value}\nS={S}\nN={privacy.N}\nK={privacy.K}\nl={privacy.l}\nc={privacy.c!r}")
    print(report.to_text(), end="")
    if args.curve_out:
        report.write_curve_csv(args.curve_out)
    return EXIT_OK


def cmd_account(args: argparse.Namespace) -> int:
    """Print epsilon and the optimal order for a given centralized noise scale"""
    _require(args, "tau_g", "l", "N", "K", "T")
    if args.tau_g == 0:
        raise ConfigurationError("tau_g = 0 is the non-private setting; epsilon is infinite")
    if not (args.tau_g > 0):
        raise ConfigurationError(f"tau_g must be positive, got {args.tau_g}")
    privacy = PrivacyParams(math.inf, args.delta, args.l, args.c, args.T, args.N, args.K, args.S, args.alpha_max)
    report = total_epsilon(privacy, args.tau_g)
    print(report.to_text(), end="")
    if args.local_sampling:
        local = local_sampling_report(privacy, args.tau_g)
        print(f"local_sampling_rate={local.sampling_rate!r}")
        print(f"local_sampling_epsilon={local.epsilon_achieved!r}")
        print(f"local_sampling_alpha_star={local.alpha_star}")
    if args.curve_out:
        report.write_curve_csv(args.curve_out)
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    """Run the pipeline on a real dataset and write the released dataset and report"""
    _require(args, "input", "l", "out")
    if args.epsilon is None and args.tau_g is None and args.mode is not Mode.NON_PRIVATE:
        raise ConfigurationError("generate requires --epsilon or --tau-g (or --mode non_private)")
    if args.tau_g is not None and not (args.tau_g >= 0 and math.isfinite(args.tau_g)):
        raise ConfigurationError(f"tau_g must be finite and non-negative, got {args.tau_g}")

    dataset = _load_real(args.input, args.input_labels, args.format, args.label_column,
                         args.num_classes, args.limit, args.seed)
    T = args.T or _default_release_size(len(dataset), dataset.num_classes)
    epsilon = args.epsilon if args.epsilon is not None else math.inf
    S = args.mode.clients(args.S)
    privacy = PrivacyParams(epsilon, args.delta, args.l, args.c, T, len(dataset), dataset.num_classes,
                            S, args.alpha_max)
    cfg = RunConfig(args.mode, privacy, master_seed=args.seed, with_replacement=args.with_replacement,
                    tau_central=args.tau_g, threads=args.threads, spool_dir=args.spool_dir)
    synthetic, report = run_pipeline(dataset, cfg)

    out_format = args.out_format or ("csv" if Path(args.out).suffix.lower() == ".csv" else "binary")
    if out_format == "csv":
        write_csv_dataset(synthetic.as_dataset(), args.out)
    else:
        write_binary_synthetic(synthetic, args.out)
    text = report.to_text() + f"mode={args.mode.value}\nl={args.l}\nS={S}\nseed={args.seed}\nc={args.c!r}\n"
    _write_text(args.report or str(report_sidecar(args.out)), text)
    if args.curve_out:
        report.write_curve_csv(args.curve_out)
    print(text, end="")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Train the probe on synthetic data and print its accuracy on real test data"""
    _require(args, "synthetic", "train", "test")
    train = _load_real(args.train, args.train_labels, args.format, args.label_column, args.num_classes)
    test = _load_real(args.test, args.test_labels, args.format, args.label_column, train.num_classes)
    synthetic = _load_synthetic(args.synthetic, train.num_classes)
    provenance = release_provenance(args.release_report or report_sidecar(args.synthetic))
    report = evaluate_synthetic(
        synthetic, train, test, args.c, baseline=args.baseline, theta=args.theta,
        epochs=args.epochs, learning_rate=args.learning_rate, batch_size=args.batch_size, seed=args.seed,
        provenance=provenance,
    )
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    """Evaluate every grid point and append the results to a CSV"""
    _require(args, "train", "out")
    train = _load_real(args.train, args.train_labels, args.format, args.label_column,
                       args.num_classes, args.limit, args.seed)
    if args.test is not None:
        test = _load_real(args.test, args.test_labels, args.format, args.label_column, train.num_classes)
    else:
        if not 0 < args.test_fraction < 1:
            raise ConfigurationError(f"--test-fraction must lie in (0, 1), got {args.test_fraction}")
        train, test = split_dataset(train, args.test_fraction, args.seed)
    grid = SweepGrid(
        modes=args.modes, ls=args.l, Ss=args.S, epsilons=args.epsilon,
        seeds=args.seeds if args.seeds is not None else [args.seed],
        c=args.c, T=args.T, delta=args.delta, alpha_max=args.alpha_max,
        epochs=args.epochs, learning_rate=args.learning_rate, batch_size=args.batch_size,
    )
    frame = sweep(train, test, grid, args.out, threads=args.threads)
    print(f"rows={len(frame)}")
    print(f"failed={int((frame['error'] != '').sum())}")
    return EXIT_OK


def cmd_make_blobs(args: argparse.Namespace) -> int:
    """Write a Gaussian-blob classification dataset as CSV"""
    _require(args, "out")
    dataset = make_blobs(args.num_classes, args.per_class, args.num_features, args.spread,
                         args.center_scale, args.seed)
    write_csv_dataset(dataset, args.out)
    print(f"rows={len(dataset)}\nfeatures={dataset.num_features}\nclasses={dataset.num_classes}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def _configure_logging(level: str):
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ConfigurationError(f"unknown log level {level!r}")
    logging.basicConfig(level=numeric, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def _report_error(category: str, detail) -> None:
    print(f"error: {category}: {' '.join(str(detail).split())}", file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigurationError("missing subcommand (calibrate, account, generate, evaluate, sweep, make-blobs)")
        if args.config:
            args = _apply_config_file(parser, args, argv)
        _configure_logging(args.log_level)
        return args.handler(args)
    except CapeSynthError as e:
        _report_error(e.category, e)
        return EXIT_USER if e.user_facing else EXIT_INTERNAL
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        _report_error("io", e)
        return EXIT_USER
    except Exception as e:
        logger.exception("❌ Unexpected failure")
        _report_error("internal", f"{type(e).__name__}: {e}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
