"""Command line entry point: ``weakseg synth | run | compare``.

Exit codes: 0 success, 1 runtime failure (e.g. a diverged fold), 2 bad
configuration or usage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError, ContractError
from .evaluation import (
    SUMMARY_HEADER,
    aggregate_report,
    align_methods,
    csv_text,
    read_confusion_counts,
    read_per_slice,
    summary_rows,
)
from .experiment import ExperimentConfig, benchmark_config, run_experiment, synthesize

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("weakseg")


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = benchmark_config() if args.benchmark else ExperimentConfig()
    if args.seed is not None:
        # one seed drives both the phantoms and the training runs
        cfg.seed = cfg.generator.seed = args.seed
    return cfg


def cmd_synth(args) -> int:
    cfg = _config(args)
    path = synthesize(cfg, args.out)
    print(f"wrote {cfg.generator.num_cases} cases to {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg.output_dir = args.out
    if args.dataset:
        cfg.dataset_dir = args.dataset
    result = run_experiment(cfg, jobs=args.jobs)
    for (method, fold), status in sorted(result.statuses.items()):
        log.info("%s fold %d: %s", method, fold, status)
    if result.failures:
        for method, fold, message in result.failures:
            print(f"FAILED {method} fold {fold}: {message.splitlines()[-1] if message else ''}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"report written to {result.output_dir}")
    return EXIT_OK


def _per_slice_file(path: Path) -> Path:
    return path / "per_slice.csv" if path.is_dir() else path


def merge_results(paths) -> tuple[dict, dict]:
    """Union of the methods found in several result directories.

    A method present in more than one input must have identical per-slice rows.
    """
    per_method, confusion = {}, {}
    for p in map(Path, paths):
        f = _per_slice_file(p)
        if not f.is_file():
            raise ConfigurationError(f"no per_slice.csv under {p}")
        rows = read_per_slice(f)
        conf = read_confusion_counts(f.parent / "confusion.csv") if (f.parent / "confusion.csv").is_file() else {}
        for method, metrics in rows.items():
            if method in per_method and per_method[method] != metrics:
                raise ContractError(f"method {method!r} appears in several inputs with different results")
            per_method[method] = metrics
            if method in conf:
                confusion[method] = conf[method]
    return per_method, confusion


def cmd_compare(args) -> int:
    per_method, confusion = merge_results(args.results)
    if args.out:
        aggregate_report(per_method, confusion, args.out)
        print(f"merged report written to {args.out}")
    else:
        align_methods(per_method)
        sys.stdout.write(csv_text(SUMMARY_HEADER, summary_rows(per_method)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--benchmark", action="store_true", help="use the desk benchmark config when --config is absent")
        p.add_argument("--seed", type=int, help="override the experiment and generator seeds")

    p = sub.add_parser("synth", help="generate the phantom dataset")
    common(p)
    p.add_argument("--out", help="dataset directory (default: dataset_dir from the config)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="cross-validate every method and write the report")
    common(p)
    p.add_argument("--out", help="results directory (default: output_dir from the config)")
    p.add_argument("--dataset", help="dataset directory (default: dataset_dir from the config)")
    p.add_argument("--jobs", type=int, default=1, help="parallel (method, fold) units")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="merge result directories into one Table-2 style report")
    p.add_argument("results", nargs="+", help="result directories (or per_slice.csv files)")
    p.add_argument("--out", help="write the merged report here instead of printing the summary")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
