"""``b3kit`` command line: verify | bench | fit-pfe | metrics | report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import bench, metrics, verify
from .config import load_config
from .errors import B3Error, ConfigError, ParseError
from .pfe import dump_params

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _run_dir(args, cfg):
    base = Path(args.out or cfg.output["dir"])
    return base / cfg.config_hash()[:12]


def _write_run_summary(run_dir, cfg, command, status, artifacts, started):
    summary = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.seed,
        "exit_status": status,
        "artifacts": artifacts,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    bench.write_text(Path(run_dir) / f"run_{command}.json", json.dumps(summary, indent=2) + "\n")


def cmd_verify(args, cfg):
    started = time.perf_counter()
    results = verify.run_all(cfg.seed, cfg.verify["cases"], fault=args.inject_fault)
    report = [r.to_dict() for r in results]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.suite}: {r.cases} cases, {len(r.failures)} failures")
    run_dir = _run_dir(args, cfg)
    path = bench.write_text(run_dir / "verify.json", json.dumps(report, indent=2) + "\n")
    status = EXIT_OK if all(r.passed for r in results) else EXIT_PROPERTY
    _write_run_summary(run_dir, cfg, "verify", status, {"report": path}, started)
    if status:
        failed = ", ".join(r.suite for r in results if not r.passed)
        print(f"failing suites: {failed} (inputs serialized in {path})", file=sys.stderr)
    return status


def cmd_fit_pfe(args, cfg):
    started = time.perf_counter()
    fit = bench.fit_default_pfe(cfg)
    run_dir = _run_dir(args, cfg)
    params_path = run_dir / "pfe_params.yaml"
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_params(fit.params, params_path)
    loss_path = bench.write_text(run_dir / "loss.csv", bench.loss_curve_csv(fit.losses))
    bins_path = bench.write_text(run_dir / "bins.csv", fit.bins.to_csv())
    pairs, rho = bench.bin_trend(fit.bins)
    print(f"loss {fit.losses[0]:.6g} -> {fit.losses[-1]:.6g}; bins monotone {pairs}/9, spearman {rho:.4f}")
    artifacts = {"params": str(params_path), "loss": loss_path, "bins": bins_path}
    _write_run_summary(run_dir, cfg, "fit-pfe", EXIT_OK, artifacts, started)
    return EXIT_OK


def cmd_bench(args, cfg):
    started = time.perf_counter()
    result = bench.run_bench(cfg, jobs=args.jobs)
    run_dir = _run_dir(args, cfg)
    summary, paths = bench.write_bench(result, run_dir, cfg)
    for name, row in summary["strategies"].items():
        print(f"{name}: mean latent MSE {row['mean_latent_mse']:.6g}, delta_mtl {row['delta_mtl']:.2f}")
    print(f"outputs in {run_dir}")
    _write_run_summary(run_dir, cfg, "bench", EXIT_OK, paths, started)
    return EXIT_OK


def cmd_metrics(args):
    if not args.input:
        raise ConfigError("metrics needs an input CSV path")
    try:
        text = Path(args.input).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {args.input}: {exc}") from exc
    report = metrics.transfer_table(metrics.parse_transfer_csv(text))
    sys.stdout.write(metrics.format_transfer(report))
    return EXIT_OK


def render_report(run_dir):
    run_dir = Path(run_dir)
    summary = json.loads((run_dir / "summary.json").read_text())
    lines = [f"# b3kit bench report ({summary['config_hash'][:12]})", ""]
    lines += ["| strategy | mean latent MSE | delta_mtl (%) |", "|---|---|---|"]
    for name, row in summary["strategies"].items():
        lines.append(f"| {name} | {row['mean_latent_mse']:.6g} | {row['delta_mtl']:.2f} |")
    bins = summary["bins"]
    c = summary["contraction"]
    lines += [
        "",
        f"Precision bins: {bins['monotone_pairs']}/9 monotone pairs, Spearman {bins['spearman']:.4f}",
        f"Contraction ratio: mean {c['mean']:.4f}, max {c['max']:.4f}",
        f"Histogram (20 bins over [0, 1]): {c['bins']}",
        "",
    ]
    return "\n".join(lines)


def cmd_report(args, cfg):
    run_dir = Path(args.run_dir) if args.run_dir else _run_dir(args, cfg)
    if not (run_dir / "summary.json").exists():
        raise ConfigError(f"no bench summary in {run_dir}; run `b3kit bench` first")
    text = render_report(run_dir)
    bench.write_text(run_dir / "report.md", text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="b3kit", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--jobs", type=int, default=1, help="parallel trials")
    common.add_argument("--out", help="output root (run directories are keyed by config hash)")
    common.add_argument("--seed", type=int, help="master seed, overrides config and $B3KIT_SEED")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("verify", parents=[common], help="run the operator property suites")
    p.add_argument("--inject-fault", choices=["cdo_sign"], help=argparse.SUPPRESS)
    sub.add_parser("bench", parents=[common], help="run the synthetic fusion benchmark")
    sub.add_parser("fit-pfe", parents=[common], help="fit the precision estimator")
    p = sub.add_parser("metrics", parents=[common], help="transfer gains from task,direction,st_value,mt_value CSV")
    p.add_argument("input", nargs="?", help="CSV path")
    p = sub.add_parser("report", parents=[common], help="summarize a bench run directory")
    p.add_argument("run_dir", nargs="?", help="bench output directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        if args.command == "metrics":
            return cmd_metrics(args)
        cfg = load_config(args.config, seed=args.seed)
        handler = {"verify": cmd_verify, "bench": cmd_bench, "fit-pfe": cmd_fit_pfe, "report": cmd_report}
        return handler[args.command](args, cfg)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (B3Error, ZeroDivisionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
