"""``distlion`` command line: run, sweep, check, bandwidth and config."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import tomli

from . import aggregation as agg
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, config_to_dict, defaults_toml, load_config
from .dist_sim import Simulation
from .errors import ConfigError, DistLionError, DivergenceError, InvalidParameterError

EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
OUTPUT_ENV = "DISTLION_OUTPUT_DIR"
CSV_NAME, SUMMARY_NAME = "rounds.csv", "summary.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip() if "." in key else f"run.{key.strip()}"] = _parse_value(value.strip())
    for flag in ("workers", "rounds", "method", "seed", "threads"):
        value = getattr(args, flag, None)
        if value is not None:
            out[f"run.{flag}"] = value
    return out


def _load(args) -> tuple[RunConfig, dict]:
    if args.config:
        cfg, output = load_config(args.config)
    else:
        cfg, output = RunConfig(), {}
    return apply_overrides(cfg, _overrides(args)), output


def _output_dir(args, output: dict) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return Path(output.get("dir", "runs"))


def _json_default(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _write_outputs(out: Path, sim: Simulation, status: str) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    log = sim.run_log()
    (out / CSV_NAME).write_text(log.to_csv())
    summary = {"status": status, "config": config_to_dict(sim.cfg)}
    if log.rounds:
        summary.update(log.summary)
    summary["bandwidth_formula_up_bits"] = int(sum(sim.ledger.up_formula))
    summary["bandwidth_formula_down_bits"] = int(sum(sim.ledger.down_formula))
    summary["stopped_early"] = log.stopped_early
    (out / SUMMARY_NAME).write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    return summary


def _execute(cfg: RunConfig, out: Path, output: dict, resume=None) -> tuple[int, dict]:
    sim = load_checkpoint(resume) if resume else Simulation(cfg)
    every = int(output.get("checkpoint_every", 0) or 0)
    ckpt = Path(output.get("checkpoint_path") or out / "checkpoint.dlck")
    status, code = "ok", EXIT_OK
    try:
        if every > 0:
            while sim.t < sim.cfg.rounds and not sim.stopped_early:
                sim.run(until=min(sim.cfg.rounds, (sim.t // every + 1) * every))
                save_checkpoint(sim, ckpt)
        else:
            sim.run()
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        status, code = "diverged", EXIT_DIVERGED
    return code, _write_outputs(out, sim, status)


def cmd_run(args) -> int:
    cfg, output = _load(args)
    if args.checkpoint_every is not None:
        output["checkpoint_every"] = args.checkpoint_every
    out = _output_dir(args, output)
    code, summary = _execute(cfg, out, output, args.resume)
    print(json.dumps({k: summary.get(k) for k in ("status", "rounds", "final_loss", "final_kkt_score")}))
    return code


_AXES = {"workers": ("run.workers", int), "method": ("run.method", str), "batch": ("run.batch_size", int)}


def cmd_sweep(args) -> int:
    cfg, output = _load(args)
    key, cast = _AXES[args.axis]
    values = [v for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values must not be empty")
    root = _output_dir(args, output)
    rows, worst = [], EXIT_OK
    for raw in values:
        value = cast(raw.strip())
        point = apply_overrides(cfg, {key: value})
        code, summary = _execute(point, root / f"{args.axis}={value}", {})
        worst = max(worst, code)
        rows.append((value, summary))
        print(f"{args.axis}={value}: {summary['status']}", file=sys.stderr)
    columns = ["status", "rounds", "final_loss", "best_loss", "final_kkt_score", "kkt_noise_floor",
               "final_dist_f", "total_up_bits", "total_down_bits", "final_accuracy"]
    lines = [",".join([args.axis] + columns)]
    for value, summary in rows:
        cells = [str(value)] + ["" if summary.get(c) is None else repr(summary[c]) if isinstance(summary.get(c), float)
                                else str(summary[c]) for c in columns]
        lines.append(",".join(cells))
    root.mkdir(parents=True, exist_ok=True)
    (root / "comparison.csv").write_text("\n".join(lines) + "\n")
    return worst


def cmd_check(args) -> int:
    from .checks import QUICK, SUITES, run_suites

    names = []
    for name in args.suites or ["all"]:
        if name == "all":
            names.extend(QUICK)
        elif name in SUITES:
            names.append(name)
        else:
            raise ConfigError(f"unknown suite {name!r}; choose from {', '.join(SUITES)} or all")
    results = run_suites(names)
    report = {"passed": all(r.passed for r in results), "suites": [r.to_dict() for r in results]}
    text = json.dumps(report, indent=2, default=_json_default)
    if args.json:
        Path(args.json).write_text(text + "\n")
    print(text)
    for r in results:
        if not r.passed:
            print(f"FAILED {r.name}: witness {json.dumps(r.witness, default=_json_default)}", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_PROPERTY


BANDWIDTH_COLUMNS = ("method", "formula_up", "formula_down", "min_up", "min_down", "codec_up", "codec_down")


def bandwidth_rows(d: int, n: int, methods, keep_fraction: float = 0.04, codec: str = "one_bit") -> list:
    rows = []
    for m in methods:
        rows.append((m, *agg.formula_bandwidth(m, d, n, keep_fraction), *agg.bandwidth_of(m, d, n, keep_fraction),
                     *agg.codec_bandwidth(m, d, n, keep_fraction, codec)))
    return rows


def cmd_bandwidth(args) -> int:
    if args.d < 1 or args.workers < 1:
        raise ConfigError("d and workers must be >= 1")
    methods = args.methods or ["g_adamw", "g_lion", "terngrad", "dgc", "d_lion_avg", "d_lion_mavo"]
    try:
        rows = bandwidth_rows(args.d, args.workers, methods, args.keep_fraction, args.codec)
    except InvalidParameterError as exc:
        raise ConfigError(str(exc)) from None
    widths = [max(len(c), *(len(str(r[i])) for r in rows)) for i, c in enumerate(BANDWIDTH_COLUMNS)]
    print(f"bits per round per worker, d={args.d}, N={args.workers}")
    print("  ".join(c.ljust(w) for c, w in zip(BANDWIDTH_COLUMNS, widths)))
    for r in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))
    if args.csv:
        lines = [",".join(BANDWIDTH_COLUMNS)] + [",".join(str(v) for v in r) for r in rows]
        Path(args.csv).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(defaults_toml())
    return EXIT_OK


def _add_run_flags(p):
    p.add_argument("config", nargs="?", help="TOML config file (defaults when omitted)")
    p.add_argument("--workers", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--method")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. problem.sigma=0.5 or lr=1e-3")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="distlion", description="Distributed Lion training simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="train once and write rounds.csv + summary.json")
    _add_run_flags(run)
    run.add_argument("--checkpoint-every", type=int)
    run.add_argument("--resume", help="continue from a checkpoint file")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="one run per axis value plus comparison.csv")
    _add_run_flags(sweep)
    sweep.add_argument("--axis", choices=sorted(_AXES), required=True)
    sweep.add_argument("--values", required=True, help="comma separated")
    sweep.set_defaults(func=cmd_sweep)

    check = sub.add_parser("check", help="run invariant suites; exit 1 on any failure")
    check.add_argument("suites", nargs="*", help="suite names or 'all'")
    check.add_argument("--json", help="also write the report here")
    check.set_defaults(func=cmd_check)

    bw = sub.add_parser("bandwidth", help="bits per round for each method")
    bw.add_argument("--d", type=int, required=True)
    bw.add_argument("--workers", type=int, required=True)
    bw.add_argument("--methods", nargs="+")
    bw.add_argument("--keep-fraction", type=float, default=0.04)
    bw.add_argument("--codec", choices=("one_bit", "ternary"), default="one_bit")
    bw.add_argument("--csv")
    bw.set_defaults(func=cmd_bandwidth)

    config = sub.add_parser("config", help="configuration helpers")
    config_sub = config.add_subparsers(dest="action", required=True, parser_class=_Parser)
    config_sub.add_parser("print-defaults").set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DistLionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
