"""Command-line entry point.

Exit codes: 0 success, 1 pipeline error, 2 configuration / I/O error.
Every command is deterministic for a fixed config and seed. The
``HANDLE_ENGINE_THREADS`` environment variable caps benchmark worker
processes.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .config import apply_overrides, load_config
from .errors import ConfigError, EngineError, FormatError


def _add_config_args(parser):
    parser.add_argument("--config", required=True, help="path to the JSON edit config")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set schedule.mu=1.0")
    parser.add_argument("--output-dir", default=None,
                        help="override paths.output_dir from the config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")


def _load(args, *, check_files: bool = True):
    cfg = load_config(args.config, check_files=check_files)
    overrides = list(args.overrides)
    if args.output_dir is not None:
        overrides.append(f"paths.output_dir={args.output_dir}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if overrides:
        cfg = apply_overrides(cfg, overrides, check_files=check_files)
    if cfg.paths.get("output_dir") is None:
        raise ConfigError("paths.output_dir is required (config or --output-dir)")
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="handle-engine",
        description="3D-aware image editing with depth lifting and guided sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("lift", "flow", "edit-depth"):
        p = sub.add_parser(name)
        _add_config_args(p)

    p = sub.add_parser("warp", help="apply a stored flow field to a signal")
    _add_config_args(p)
    p.add_argument("--flow-dir", required=True, help="directory with flow.u/.v.pfm + valid")
    p.add_argument("--signal", required=True, help="PNG or PFM signal to warp")

    p = sub.add_parser("invert", help="invert the input image, record activations")
    _add_config_args(p)
    p.add_argument("--report-reconstruction", action="store_true",
                   help="also report the round-trip reconstruction error")

    p = sub.add_parser("edit", help="run the full edit pipeline")
    _add_config_args(p)
    p.add_argument("--dump-trajectory", action="store_true",
                   help="write per-step sample snapshots")

    p = sub.add_parser("bench", help="synthetic benchmark")
    bench_sub = p.add_subparsers(dest="bench_command", required=True)
    g = bench_sub.add_parser("generate")
    g.add_argument("--out", required=True)
    g.add_argument("-n", type=int, default=50)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--delta", type=float, default=0.3)
    g.add_argument("--resolution", type=int, default=128)
    g.add_argument("--fov", type=float, default=55.0)
    r = bench_sub.add_parser("run")
    r.add_argument("--bench", required=True, help="directory from `bench generate`")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE")

    p = sub.add_parser("eval", help="evaluate a benchmark run against ground truth")
    p.add_argument("--run", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", default=None)
    return parser


def _parse_section_overrides(items) -> dict:
    overrides: dict = {}
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides.setdefault(section, {})[key] = value
    return overrides


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "lift":
            out = pipeline.run_lift(_load(args))
        elif args.command == "flow":
            out = pipeline.run_flow(_load(args))
        elif args.command == "warp":
            out = pipeline.run_warp(_load(args), args.flow_dir, args.signal)
        elif args.command == "edit-depth":
            out = pipeline.run_edit_depth(_load(args))
        elif args.command == "invert":
            out = pipeline.run_invert(_load(args),
                                      report_reconstruction=args.report_reconstruction)
        elif args.command == "edit":
            out = pipeline.run_edit(_load(args), dump_trajectory=args.dump_trajectory)
        elif args.command == "bench" and args.bench_command == "generate":
            ids = pipeline.run_bench_generate(args.out, args.n, args.seed, args.delta,
                                              resolution=args.resolution,
                                              fov_deg=args.fov)
            out = {"samples": len(ids), "out": args.out}
        elif args.command == "bench" and args.bench_command == "run":
            results = pipeline.run_bench_run(args.bench, args.out, args.seed,
                                             _parse_section_overrides(args.overrides))
            failures = [r for r in results if r["status"] != "ok"]
            out = {"samples": len(results), "failures": len(failures)}
        elif args.command == "eval":
            report = pipeline.run_eval(args.run, args.gt, args.out)
            out = {"mean_s_edit": report.mean_s_edit,
                   "mean_e_id_l1": report.mean_e_id_l1,
                   "count": report.count}
        else:  # pragma: no cover - argparse enforces the command set
            raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(out, sort_keys=True))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
