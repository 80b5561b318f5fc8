"""Command-line entry point.

    dpge [--config PATH] [--output-dir PATH] [--seed N] {plan,account,pretrain,finetune,bench}

Exit codes: 0 ok, 2 configuration error, 3 numeric abort, 4 privacy budget
exhausted, 5 I/O error. ``DPGE_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from threadpoolctl import threadpool_limits

from .accountant import (AccountingError, CalibrationError, CalibrationInfeasible,
                         RdpCurve, account, calibrate_sigma, rdp_subsampled_gaussian,
                         rdp_to_eps)
from .config import (MANIFEST_KEY, ConfigError, RunConfig, Seeds, _loads,
                     config_from_dict)
from .data import DataConfigError
from .model import BatchError
from .optim import NumericError, ProtocolError, warmup_steps
from .params import CheckpointError
from .train import (EXIT_BUDGET, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK,
                    BudgetExhausted, run_finetuning, run_pretraining, write_manifest)

PLAN_HEADER = ("sigma", "epsilon", "best_order", "warmup_steps", "rdp_per_step")


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="JSON run configuration")
    p.add_argument("--output-dir", metavar="PATH", default=d, help="artifact directory")
    p.add_argument("--seed", type=int, metavar="N", default=d,
                   help="base seed; sets init/data/noise/dropout seeds to N..N+3")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpge", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        _add_globals(p, suppress=True)
        return p

    p = cmd("plan", "calibrate the noise multiplier for a target epsilon")
    p.add_argument("--target-epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--sampling-rate", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--sigma", type=float, action="append", dest="plan_sigmas",
                   help="extra sigma rows to tabulate (repeatable)")
    p.add_argument("--csv", action="store_true", help="print CSV instead of a table")

    p = cmd("account", "epsilon spent by a given sigma, q and step count")
    p.add_argument("--sigma", "--noise-multiplier", type=float, dest="noise_multiplier")
    p.add_argument("--delta", type=float)
    p.add_argument("--sampling-rate", type=float)
    p.add_argument("--steps", type=int)

    p = cmd("pretrain", "DP pretraining (MLM + NSP)")
    p.add_argument("--steps", type=int)
    p.add_argument("--sigma", "--noise-multiplier", type=float, dest="noise_multiplier")
    p.add_argument("--target-epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--corpus", dest="corpus_path")
    p.add_argument("--budget-mode", choices=("fixed-steps", "stop-at-epsilon"))
    p.add_argument("--init-checkpoint", metavar="PATH")

    p = cmd("finetune", "non-private fine-tuning on the synthetic classification task")
    p.add_argument("--checkpoint", metavar="PATH",
                   help="pretrained model; omit for a random-init baseline")
    p.add_argument("--from-scratch", action="store_true",
                   help="take vocabulary and shape from --checkpoint but re-initialise weights")
    p.add_argument("--epochs", type=int)
    p.add_argument("--corpus", dest="corpus_path")

    p = cmd("bench", "runtime of per-sample gradient strategies")
    p.add_argument("--modes", nargs="+")
    p.add_argument("--batch-sizes", nargs="+", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dataset-size", type=int)
    p.add_argument("--measure-memory", action="store_true", default=None)
    return parser


_TOP_OVERRIDES = ("target_epsilon", "delta", "sampling_rate", "steps", "noise_multiplier",
                  "corpus_path", "budget_mode", "init_checkpoint")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (if any) + subcommand + command-line overrides, validated."""
    data, text, source = {}, "", "<command line>"
    if args.config:
        source = args.config
        try:
            text = Path(args.config).read_bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"not valid UTF-8: {exc}", source) from None
        data = _loads(text, source)
        if MANIFEST_KEY in data:
            data, text = dict(data.get("resolved_config") or {}), ""
    data["mode"] = args.command
    for key in _TOP_OVERRIDES:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if getattr(args, "plan_sigmas", None):
        data["plan_sigmas"] = args.plan_sigmas
    if getattr(args, "csv", False):
        data["plan_format"] = "csv"
    if args.output_dir is not None:
        data["output_dir"] = args.output_dir
    if args.seed is not None:
        data["seeds"] = vars(Seeds.from_base(args.seed))
    if args.command == "finetune" and args.epochs is not None:
        data.setdefault("finetune", {})["epochs"] = args.epochs
    if args.command == "bench":
        bench = data.setdefault("bench", {})
        for key in ("modes", "batch_sizes", "epochs", "dataset_size", "measure_memory"):
            value = getattr(args, key, None)
            if value is not None:
                bench[key] = value
    return config_from_dict(data, source, text)


# -- subcommands ----------------------------------------------------------------------

def _emit_table(rows: List[Sequence], fmt: str, out) -> None:
    cells = [[("" if v is None else (format(v, ".9g") if isinstance(v, float) else str(v)))
              for v in row] for row in rows]
    if fmt == "csv":
        for row in [PLAN_HEADER] + cells:
            out.write(",".join(row) + "\n")
        return
    widths = [max(len(h), *(len(r[i]) for r in cells)) for i, h in enumerate(PLAN_HEADER)]
    out.write("  ".join(h.rjust(w) for h, w in zip(PLAN_HEADER, widths)) + "\n")
    for row in cells:
        out.write("  ".join(c.rjust(w) for c, w in zip(row, widths)) + "\n")


def _plan_row(q, sigma, steps, delta):
    eps, order = account(q, sigma, steps, delta)
    return [sigma, eps, order, warmup_steps(steps) if steps else 0,
            rdp_subsampled_gaussian(q, sigma, order)]


def run_plan(cfg: RunConfig, out=None) -> int:
    """Calibrate sigma* for the target and print (sigma, eps, alpha, warmup, rdp/step)."""
    out = out or sys.stdout
    q, steps, delta, target = cfg.sampling_rate, cfg.steps, cfg.delta, cfg.target_epsilon
    rows = []
    if q == 0 or steps == 0:
        # nothing is ever released: eps is that of the all-zero RDP curve
        eps, order = rdp_to_eps(RdpCurve.zeros(), delta)
        if eps > target:
            raise CalibrationInfeasible(
                f"even a zero RDP curve gives eps={eps:.6g} > target {target:g} "
                f"at delta={delta:g}")
        rows.append([None, eps, order, warmup_steps(steps) if steps else 0, 0.0])
    else:
        sigma = calibrate_sigma(target, delta, q, steps)
        rows.append(_plan_row(q, sigma, steps, delta))
    for s in cfg.plan_sigmas:
        rows.append(_plan_row(q, s, steps, delta))
    _emit_table(rows, cfg.plan_format, out)
    return EXIT_OK


def run_account(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    eps, order = account(cfg.sampling_rate, cfg.noise_multiplier, cfg.steps, cfg.delta)
    out.write(f"epsilon={eps:.9g} best_order={order} delta={cfg.delta:g} "
              f"sigma={cfg.noise_multiplier:.9g} q={cfg.sampling_rate:.9g} "
              f"steps={cfg.steps}\n")
    return EXIT_OK


def run_pretrain(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    outdir = Path(cfg.output_dir)

    def log(msg):
        out.write(msg + "\n")
        out.flush()

    result = run_pretraining(cfg, outdir, log)
    write_manifest(outdir, cfg, "pretrain", result.status, {
        "final_epsilon": result.epsilon,
        "best_order": result.best_order,
        "delta": result.delta,
        "noise_multiplier": result.noise_multiplier,
        "sampling_rate": result.sampling_rate,
        "dataset_size": result.dataset_size,
        "steps_completed": result.steps_completed,
        "artifacts": ["metrics.csv", "snr.csv", "model.dpge"],
    })
    log(f"epsilon={result.epsilon:.9g} best_order={result.best_order} "
        f"delta={result.delta:g}")
    return result.status


def run_finetune(cfg: RunConfig, checkpoint: Optional[str] = None, out=None,
                 from_scratch: bool = False) -> int:
    out = out or sys.stdout
    outdir = Path(cfg.output_dir)

    def log(msg):
        out.write(msg + "\n")

    result = run_finetuning(cfg, checkpoint, log, from_scratch)
    summary = {"macro_f1": result.macro_f1, "accuracy": result.accuracy,
               "epochs_run": result.epochs_run, "best_epoch": result.best_epoch,
               "validation_losses": result.validation_losses,
               "checkpoint": checkpoint, "from_scratch": from_scratch}
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "finetune_metrics.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(outdir, cfg, "finetune", EXIT_OK,
                   {"finetune_result": summary, "final_epsilon": None})
    log(f"macro_f1={result.macro_f1:.6f} accuracy={result.accuracy:.6f} "
        f"epochs={result.epochs_run} best_epoch={result.best_epoch}")
    return EXIT_OK


def run_bench_cmd(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    from .bench import emit_bench_csv, run_sweep
    b = cfg.bench
    results = run_sweep(b.modes, b.batch_sizes, epochs=b.epochs, model_config=cfg.model,
                        dataset_size=b.dataset_size, seed=cfg.seeds.init,
                        measure_memory=b.measure_memory)
    buf = io.StringIO()
    emit_bench_csv(results, buf)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "bench.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")
    write_manifest(outdir, cfg, "bench", EXIT_OK, {
        "failed_cells": [[r.mode, r.batch_size, r.error] for r in results if r.failed],
        "blas_threads": next((r.blas_threads for r in results if r.blas_threads), None),
    })
    out.write(buf.getvalue())
    return EXIT_OK


def _threads() -> Optional[int]:
    raw = os.environ.get("DPGE_THREADS")
    if raw in (None, ""):
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DPGE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DPGE_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    err = sys.stderr
    try:
        threads = _threads()
        cfg = resolve_config(args)
        with threadpool_limits(limits=threads):
            if args.command == "plan":
                return run_plan(cfg)
            if args.command == "account":
                return run_account(cfg)
            if args.command == "pretrain":
                return run_pretrain(cfg)
            if args.command == "finetune":
                return run_finetune(cfg, args.checkpoint, from_scratch=args.from_scratch)
            return run_bench_cmd(cfg)
    except BudgetExhausted as exc:
        err.write(f"dpge: privacy budget exhausted: {exc}\n")
        return EXIT_BUDGET
    except CalibrationInfeasible as exc:
        err.write(f"dpge: calibration infeasible: {exc}\n")
        return EXIT_CONFIG
    except (NumericError, CalibrationError, FloatingPointError, ProtocolError) as exc:
        err.write(f"dpge: numeric abort: {exc}\n")
        return EXIT_NUMERIC
    except (ConfigError, AccountingError, DataConfigError, CheckpointError, BatchError,
            ValueError) as exc:
        err.write(f"dpge: configuration error: {exc}\n")
        return EXIT_CONFIG
    except OSError as exc:
        err.write(f"dpge: I/O error: {exc}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
