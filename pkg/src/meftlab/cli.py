"""Command-line entry point: run, sweep, report, gradcheck, memcheck.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .backbone import ModelConfig
from .engine import Engine
from .harness.config import ConfigError, RunConfig, load_config
from .harness.cost import cost_model
from .harness.features import FeatureFileError
from .harness.report import ReportError, csv_row, parse_csv, render_report, write_csv
from .harness.train import TrainingError, train
from .methods import MethodError, MethodSpec
from .model import FineTuneModel

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
MEMCHECK_METHODS = ("vanilla", "head", "bitfit", "lora:8", "adalora:8", "adapter:8", "lst:2", "lst:4", "lst:8",
                    "unipt:2", "unipt:8", "sherl:2", "sherl:8")

log = logging.getLogger("meftlab")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    p.add_argument("--deterministic", action="store_true", help="serial, reproducible run; step time not reported")
    p.add_argument("--precision", choices=("f32", "f64"), help="engine precision (overrides train.precision)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meftlab", description="Memory-efficient fine-tuning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one method and write report.csv / report.json")
    _common(p)

    p = sub.add_parser("sweep", help="train every method in the config's 'methods' list")
    _common(p)
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs (one process each)")

    p = sub.add_parser("report", help="markdown table and ordering verdicts from result CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", help="also write the markdown here")

    p = sub.add_parser("gradcheck", help="finite-difference suite at f64")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("memcheck", help="cost-model vs measured retained bytes per method")
    p.add_argument("--config", help="JSON config whose model section is used (default: toy model)")
    p.add_argument("--methods", help="comma-separated methods, e.g. lst:8,lora:8")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    return parser


def _load(args, allow_many: bool) -> RunConfig:
    cfg = load_config(args.config, allow_many=allow_many)
    return cfg.with_overrides(out=args.out, seed=args.seed, deterministic=args.deterministic,
                              precision=args.precision)


def _train_one(cfg: RunConfig, method: MethodSpec):
    return train(cfg.model, method, cfg.task.load(cfg.model), cfg.train)


def cmd_run(args) -> int:
    cfg = _load(args, allow_many=False)
    report = _train_one(cfg, cfg.method)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "report.csv", [csv_row(report)])
    (out / "report.json").write_text(json.dumps({"config": cfg.to_dict(), "report": report.to_dict()}, indent=2) + "\n")
    print(f"{report.method}: accuracy {report.best_eval_accuracy:.2f}% at lr={report.lr_selected:g}, "
          f"peak retained {report.peak_retained_bytes} B -> {out / 'report.csv'}")
    return EXIT_OK


def _sweep_job(cfg: RunConfig, method: MethodSpec) -> tuple[dict, dict | None]:
    try:
        report = _train_one(cfg, method)
    except (TrainingError, ArithmeticError, ValueError, RuntimeError) as exc:
        return {"method": method.label, "status": f"failed: {exc}".replace("\n", " ")}, None
    row = csv_row(report)
    row["status"] = "ok"
    return row, report.to_dict()


def cmd_sweep(args) -> int:
    cfg = _load(args, allow_many=True)
    if args.jobs < 1:
        raise ConfigError("--jobs: must be at least 1")
    # Materialise the data once up front so a bad data source is reported before any training.
    cfg.task.load(cfg.model)
    if args.jobs == 1:
        results = [_sweep_job(cfg, m) for m in cfg.methods]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_sweep_job, cfg, m) for m in cfg.methods]
            results = [f.result() for f in futures]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for r, _ in results]
    write_csv(out / "sweep.csv", rows, with_status=True)
    (out / "sweep.json").write_text(json.dumps({"config": cfg.to_dict(), "reports": [r for _, r in results]},
                                               indent=2) + "\n")
    failed = [r for r in rows if r["status"] != "ok"]
    for r in rows:
        print(f"{r['method']}: {r['status']}")
    print(f"{len(rows) - len(failed)}/{len(rows)} runs ok -> {out / 'sweep.csv'}")
    return EXIT_RUNTIME if len(failed) == len(rows) else EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.csv:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ReportError(f"{path}: cannot read: {exc.strerror}") from None
        rows.extend(parse_csv(text, path))
    if not rows:
        raise ReportError("no result rows in the given CSV files")
    text = render_report(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    reports = run_suite(tol=args.tol, eps=args.eps, seed=args.seed)
    for r in reports:
        print(r.line())
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def measure_retained(cfg: ModelConfig, method, batch: int, precision: str = "f64", seed: int = 0) -> int:
    """Peak retained bytes of one training forward pass on random inputs."""
    eng = Engine(precision)
    model = FineTuneModel(cfg, method, seed=seed, dtype=eng.dtype)
    if model.method.kind == "adalora":
        model.attach_adalora(total_steps=1)
    rng = np.random.default_rng(seed)
    x = eng.const(rng.normal(size=(batch, cfg.seq_len, cfg.d_input)))
    model.loss(eng, x, rng.integers(0, cfg.n_classes, size=batch))
    eng.clear_tape()
    return eng.peak_retained_bytes()


def cmd_memcheck(args) -> int:
    model = load_config(args.config).model if args.config else ModelConfig()
    if args.batch < 1:
        raise ConfigError("--batch: must be at least 1")
    try:
        methods = [MethodSpec.parse(m) for m in (args.methods.split(",") if args.methods else MEMCHECK_METHODS)]
    except MethodError as exc:
        raise ConfigError(f"--methods: {exc}") from None
    itemsize = 4 if args.precision == "f32" else 8
    print(f"{'method':<16} {'estimated':>12} {'measured':>12} {'diff %':>8}")
    worst = 0.0
    for m in methods:
        est = cost_model(model, m, args.batch, itemsize).retained_activation_bytes_est
        got = measure_retained(model, m, args.batch, args.precision)
        diff = 100.0 * (got - est) / est if est else (0.0 if got == 0 else float("inf"))
        worst = max(worst, abs(diff))
        print(f"{m.label:<16} {est:>12} {got:>12} {diff:>8.2f}")
    return EXIT_OK if worst <= 10.0 else EXIT_RUNTIME


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "report": cmd_report, "gradcheck": cmd_gradcheck,
            "memcheck": cmd_memcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, MethodError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReportError, FeatureFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (TrainingError, RuntimeError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
