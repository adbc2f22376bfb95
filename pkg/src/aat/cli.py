"""Command line entry point: ``aat <command> --out DIR [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact,
4 verification failure, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import torch

from . import pipeline
from .config import load_config
from .errors import AATError, ConfigError, DependencyError, DomainError, TrainingFailure
from .verify import SUITES, run_suites

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_VERIFY = 0, 1, 2, 3, 4

_STAGE_COMMANDS = {
    "train-policy": ("train-policy",),
    "collect": ("collect",),
    "train-values": ("train-values", "annotate"),
    "train-predictor": ("train-predictor",),
    "train-generator": ("train-generator",),
    "attack": ("attack",),
    "run": pipeline.ORDER,
}


def profile_path(name: str) -> Path:
    """Bundled profiles (``desk``) resolve by name; anything else is a file path."""
    ref = resources.files("aat").joinpath("profiles", f"{name}.cfg")
    return Path(str(ref)) if ref.is_file() else Path(name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aat", description="Advantage-conditioned adversarial attacks on toy RL agents.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="runs/default", help="artifact root (default: runs/default)")
    common.add_argument("--config", default=None, help="flat key = value file, or a bundled profile name (desk)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "run" else "run every stage")
    p = sub.add_parser("verify", parents=[common], help="run numerical verification suites")
    p.add_argument("--suite", default="all", choices=[*SUITES, "all"])
    p = sub.add_parser("ablate", parents=[common], help="sweep one axis and tabulate attack results")
    p.add_argument("--axis", required=True, choices=sorted(pipeline.ABLATION_AXES))
    p.add_argument("--values", default=None, help="comma-separated subset of the axis values")
    sub.add_parser("show-config", parents=[common], help="print the effective config and its hash")
    return parser


def _config(args):
    path = profile_path(args.config) if args.config else None
    return load_config(path, args.overrides)


def cmd_stages(args, stages) -> int:
    ws = pipeline.Workspace(args.out, _config(args))
    out = pipeline.run_pipeline(ws, stages, log=lambda m: print(m, flush=True))
    last = out["last"]
    if hasattr(last, "attacked_mean"):
        print(json.dumps({"attacked_mean": last.attacked_mean, "clean_mean": last.clean_mean,
                          "reduction": last.reduction, "config_hash": ws.hash,
                          "total_s": round(out["total_s"], 1)}))
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _config(args)
    report = run_suites(args.suite, seed=cfg.seed)
    report["config_hash"] = cfg.hash()
    path = Path(args.out, "reports", f"verify_{args.suite}.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, default=float))
    for name, r in report["suites"].items():
        print(f"{name:10s} {'PASS' if r['passed'] else 'FAIL'}  ({r['runtime_s']:.1f}s)")
    print(f"report: {path}")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_ablate(args) -> int:
    ws = pipeline.Workspace(args.out, _config(args))
    values = args.values.split(",") if args.values else None
    pipeline.ablate(ws, args.axis, values, log=lambda m: print(m, flush=True))
    print(f"table: {ws.path('reports', f'ablation_{args.axis}.md')}")
    return EXIT_OK


def cmd_show_config(args) -> int:
    cfg = _config(args)
    print(f"# config_hash: {cfg.hash()}")
    print(cfg.dumps(), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        if args.command == "show-config":
            return cmd_show_config(args)
        return cmd_stages(args, _STAGE_COMMANDS[args.command])
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except TrainingFailure as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except AATError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
