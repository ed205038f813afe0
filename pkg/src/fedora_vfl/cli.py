"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 io error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import runner
from .config import load_config
from .exceptions import IngestionError, NumericError, ValidationError
from .persist import load_model, save_model
from .theory import TheoryConfig, asymptotic_bias, build_convex_instance, calibrate, run_bound_trace

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("fedora_vfl")

DATASET_FILE = "dataset.npz"
ORIGINAL_FILE = "model.npz"
UNLEARNED_FILE = "unlearned.npz"
UNLEARN_META = "unlearn.json"


def _out_dir(config, args) -> Path:
    return Path(args.out or config.output.dir)


def _require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise IngestionError(f"{path} not found; run `{producer}` first")
    return path


def cmd_gen_data(config, args):
    out = _out_dir(config, args)
    out.mkdir(parents=True, exist_ok=True)
    prep = runner.prepare(config)
    runner.save_prep(out / DATASET_FILE, prep)
    print(f"wrote {out / DATASET_FILE}: {prep['data'].n_samples} samples, "
          f"{prep['unlearn_rows'].size} to forget")


def cmd_train(config, args):
    out = _out_dir(config, args)
    prep = runner.load_prep(_require(out / DATASET_FILE, "gen-data"), config)
    model, history = runner.train_original(config, prep)
    save_model(out / ORIGINAL_FILE, model)
    print(f"wrote {out / ORIGINAL_FILE}: final loss {history[-1]:.4f}" if history else
          f"wrote {out / ORIGINAL_FILE}")


def cmd_unlearn(config, args):
    out = _out_dir(config, args)
    prep = runner.load_prep(_require(out / DATASET_FILE, "gen-data"), config)
    original = load_model(_require(out / ORIGINAL_FILE, "train"))
    model, trace, rounds, seconds = runner.unlearn_model(config, prep, original)
    save_model(out / UNLEARNED_FILE, model)
    runner.write_trace(out / "trace.csv", trace)
    (out / UNLEARN_META).write_text(json.dumps({"rounds": rounds, "total_seconds": seconds}) + "\n")
    print(f"wrote {out / UNLEARNED_FILE} after {rounds} rounds ({seconds:.2f} s)")


def cmd_audit(config, args):
    out = _out_dir(config, args)
    prep = runner.load_prep(_require(out / DATASET_FILE, "gen-data"), config)
    original = load_model(_require(out / ORIGINAL_FILE, "train"))
    unlearned = load_model(_require(out / UNLEARNED_FILE, "unlearn"))
    meta = json.loads(_require(out / UNLEARN_META, "unlearn").read_text())
    metrics = runner.audit_models(config, prep, original, unlearned)
    report = runner.build_report(config, prep, metrics, meta["rounds"], meta["total_seconds"])
    runner.export_metrics(report, out / "report.json", "json")
    _summarize(report)


def cmd_run(config, args):
    out = _out_dir(config, args)
    report = runner.run_experiment(config, out)
    if args.csv:
        runner.export_metrics(report, Path(args.csv), "csv", append=True)
    _summarize(report)


def _summarize(report):
    for key in ("test_acc", "unlearn_acc", "mia_asr", "bd_asr", "retrain_test_acc", "seconds_per_round"):
        value = getattr(report, key)
        if value is not None:
            print(f"{key:>18}: {value:.4f}")


def cmd_theory_check(args):
    if args.n < 2 or args.d < 1 or args.lam <= 0 or args.iterations < 0:
        raise ValidationError("need n >= 2, d >= 1, lam > 0 and iterations >= 0")
    instance = build_convex_instance(args.n, args.d, args.lam, seed=args.seed)
    limit = min(1.0 / (2.0 * instance.L), instance.mu / (4.0 * instance.L ** 2))
    tau = args.tau if args.tau is not None else min(0.05, limit)
    config = TheoryConfig(tau=tau, sigma=args.sigma, batch_size=args.batch_size, iterations=args.iterations,
                          seed=args.seed, full_batch=args.full_batch, zero_dual=args.zero_dual)
    start = time.perf_counter()
    instance = calibrate(instance, config)
    trace = run_bound_trace(instance, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace.to_csv(out / "bound_trace.csv")
    summary = {
        "n": args.n, "d": args.d, "lam": args.lam, "iterations": args.iterations, "tau": tau,
        "tau_limit": limit, "mu": instance.mu, "L": instance.L, "sigma_r": instance.sigma_r,
        "G": instance.G, "omega_max": instance.omega_max, "violations": trace.violations,
        "asymptotic_bias": asymptotic_bias(tau, instance.mu, instance.sigma_r, config.batch_size,
                                           instance.G, instance.omega_max),
    }
    (out / "theory.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{trace.violations} violations over {len(trace.e)} iterates "
          f"({time.perf_counter() - start:.2f} s); wrote {out / 'bound_trace.csv'}")
    return EXIT_OK if trace.violations == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedora-vfl", description="Vertical federated unlearning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, help_text, func):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", "-c", help="YAML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config key, e.g. unlearn.fedora.iterations=50")
        p.add_argument("--out", "-o", help="output directory (default: output.dir)")
        p.set_defaults(func=func, needs_config=True)
        return p

    with_config("gen-data", "generate or load data and write the split dataset", cmd_gen_data)
    with_config("train", "train the original split model", cmd_train)
    with_config("unlearn", "apply the configured unlearning method", cmd_unlearn)
    with_config("audit", "measure accuracy, MIA and backdoor metrics", cmd_audit)
    run = with_config("run", "full pipeline: data, train, unlearn, audit", cmd_run)
    run.add_argument("--csv", help="also append a summary row to this CSV file")

    th = sub.add_parser("theory-check", help="check the convex model-difference bound")
    th.add_argument("--n", type=int, default=2000)
    th.add_argument("--d", type=int, default=20)
    th.add_argument("--lam", type=float, default=1.0)
    th.add_argument("--iterations", "-K", type=int, default=500)
    th.add_argument("--tau", type=float, default=None, help="defaults to min(0.05, step limit)")
    th.add_argument("--sigma", type=float, default=0.001)
    th.add_argument("--batch-size", type=int, default=128)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--full-batch", action="store_true")
    th.add_argument("--zero-dual", action="store_true")
    th.add_argument("--out", "-o", default="results")
    th.set_defaults(func=None, needs_config=False)
    return parser


def exit_code_for(exc: BaseException) -> int:
    cause = getattr(exc, "cause", None)
    if isinstance(exc, runner.StageError) and cause is not None:
        exc = cause
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, ValidationError):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_IO
    raise exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if not args.needs_config:
            return cmd_theory_check(args)
        config = load_config(args.config, args.overrides)
        args.func(config, args)
        return EXIT_OK
    except (runner.StageError, NumericError, ValidationError, OSError) as exc:
        code = exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
