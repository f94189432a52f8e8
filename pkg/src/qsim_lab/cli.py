"""``qsim-lab`` command line: train, analyze-bias, verify, compare-delta-q.

Exit status is 0 on success, 1 when a property suite finds a violation and
2 for usage, configuration, I/O or run failures.  Progress goes to standard
error; results go to files (or standard output where noted).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import analysis
from .config import ConfigError, parse_config, with_overrides

log = logging.getLogger("qsim_lab")

EXIT_OK, EXIT_VIOLATION, EXIT_ERROR = 0, 1, 2


class CliError(Exception):
    """Failure reported to the user with exit status 2."""


def parse_int_list(text: str) -> list[int]:
    """``"1..5"`` (inclusive range), ``"2,4"`` or ``"3"``; all entries positive."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, list 'a,b' or range 'a..b', got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError(f"empty selection {text!r}")
    if min(values) < 1:
        raise argparse.ArgumentTypeError(f"values must be positive, got {text!r}")
    return values


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _non_negative_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _ensure_writable_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=path):
            pass
    except OSError as exc:
        raise CliError(f"output directory {path} is not writable: {exc.strerror or exc}") from exc


def _write_text(path: Path, text: str) -> None:
    try:
        if path.parent != Path(""):
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror or exc}") from exc


# ---------------------------------------------------------------------------
# train


def _train_one(config_dict: dict, seed: int, run_dir: str) -> tuple[int, str]:
    from .config import config_from_dict
    from .trainer import run

    cfg = config_from_dict(config_dict)
    result = run(cfg, seed, run_dir, progress=True)
    return seed, json.dumps(list(result.final_joint_action))


def cmd_train(args) -> int:
    path = Path(args.config)
    if not path.is_file():
        raise CliError(f"config file {path} not found")
    cfg = parse_config(path)
    overrides = {}
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if args.step_max is not None:
        overrides["step_max"] = args.step_max
    if overrides:
        cfg = with_overrides(cfg, **overrides)
    out = Path(cfg.output_dir)
    _ensure_writable_dir(out)
    workers = min(analysis.thread_cap(), len(cfg.seeds))
    jobs = [(cfg.to_dict(), seed, str(out / f"seed_{seed}")) for seed in cfg.seeds]
    log.info("training %s on %s for %d seed(s), %d worker(s)", cfg.variant, cfg.env.name, len(jobs), workers)
    failures = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [(job[1], pool.submit(_train_one, *job)) for job in jobs]
            for seed, fut in futures:
                try:
                    _, action = fut.result()
                    log.info("seed %d finished, greedy joint action %s", seed, action)
                except Exception as exc:  # noqa: BLE001 - report every failed seed
                    failures.append(f"seed {seed}: {exc}")
    else:
        for job in jobs:
            try:
                _, action = _train_one(*job)
                log.info("seed %d finished, greedy joint action %s", job[1], action)
            except (OSError, ArithmeticError, ValueError, RuntimeError) as exc:
                failures.append(f"seed {job[1]}: {exc}")
    if failures:
        raise CliError("run failure: " + "; ".join(failures))
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze-bias


def cmd_analyze_bias(args) -> int:
    sweep = analysis.BiasSweepConfig(
        agent_counts=tuple(args.agents), action_sizes=tuple(args.actions), sigma=args.sigma,
        trials=args.trials, seed=args.seed, cap=args.cap,
    )
    report = analysis.verify_theorem1_trend(sweep)
    _write_text(Path(args.out), analysis.bias_csv(report.rows))
    for line in report.failures:
        log.warning("%s", line)
    log.info("wrote %d rows to %s", len(report.rows), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    weight_fn = analysis.unnormalized_weights if args.inject_fault else None
    log.info("lower-bound harness: %d samples", args.samples)
    t2 = analysis.verify_theorem2(args.samples, args.seed, weight_fn)
    suites = {"theorem2": t2.to_json()}
    if not args.skip_suites:
        for name, fn, draws in (
            ("gradient_check", analysis.gradient_check_suite, args.grad_draws),
            ("qmix_monotonicity", analysis.monotonicity_suite, args.mono_draws),
            ("igm_vdn", analysis.igm_suite, args.igm_draws),
        ):
            log.info("%s: %d draws", name, draws)
            suites[name] = fn(draws, args.seed).to_json()
    total = sum(s["violations"] for s in suites.values())
    report = {"samples": t2.samples, "violations": total, "worst_margin": t2.worst_margin, "suites": suites}
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        _write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_VIOLATION if total else EXIT_OK


# ---------------------------------------------------------------------------
# compare-delta-q


def cmd_compare_delta_q(args) -> int:
    cmp = analysis.compare_delta_q(args.baseline, args.qsim)
    _write_text(Path(args.out), cmp.to_csv())
    summary = {
        "final_baseline_median": cmp.final_baseline_median,
        "final_qsim_median": cmp.final_qsim_median,
        "final_gap": cmp.final_gap,
        "qsim_lower": cmp.final_gap < 0,
    }
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsim-lab", description="Similarity-weighted value decomposition experiments.")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on standard error")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run per seed")
    t.add_argument("config", help="YAML experiment config")
    t.add_argument("--output-dir", help="override output_dir")
    t.add_argument("--seeds", type=parse_int_list, help="override seeds, e.g. 1..5")
    t.add_argument("--step-max", type=int, help="override step_max")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("analyze-bias", help="maximization-bias sweep")
    b.add_argument("--agents", type=parse_int_list, default=[1, 2, 3, 4, 5], help="agent counts, e.g. 1..5")
    b.add_argument("--actions", type=parse_int_list, default=[5], help="action-set sizes")
    b.add_argument("--sigma", type=_non_negative_float, default=1.0)
    b.add_argument("--trials", type=_positive_int, default=100_000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--cap", type=_positive_int, default=analysis.DEFAULT_CAP, help="maximum |A|^N")
    b.add_argument("--out", default="bias_sweep.csv")
    b.set_defaults(func=cmd_analyze_bias)

    v = sub.add_parser("verify", help="property suites; exit 1 on any violation")
    v.add_argument("--samples", type=_positive_int, default=10_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--grad-draws", type=_positive_int, default=100)
    v.add_argument("--mono-draws", type=_positive_int, default=1000)
    v.add_argument("--igm-draws", type=_positive_int, default=500)
    v.add_argument("--skip-suites", action="store_true", help="run only the lower-bound harness")
    v.add_argument("--out", help="JSON report path (default: standard output)")
    v.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("compare-delta-q", help="estimation-error comparison of two run sets")
    c.add_argument("--baseline", nargs="+", required=True, help="baseline run directories")
    c.add_argument("--qsim", nargs="+", required=True, help="QSIM run directories")
    c.add_argument("--out", default="delta_q_comparison.csv")
    c.set_defaults(func=cmd_compare_delta_q)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s", force=True)
    try:
        return args.func(args)
    except (CliError, ConfigError, analysis.AnalysisError) as exc:
        print(f"qsim-lab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
