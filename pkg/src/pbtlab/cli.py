"""Command line interface.

Verbs:
    launch    spawn a population of agent processes against a workspace
    baseline  same budget and seeds with population decisions disabled
    report    aggregate a workspace into columnar series files
    gc        remove payload blobs no live agent can still need
    agent     run a single agent process (internal; launch spawns these)

The workspace path comes from --workspace or the PBTLAB_WORKSPACE
environment variable. Exit codes: 0 success, 2 bad usage or config,
3 workspace problem, 4 run finished with fewer than half the agents.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigError, WorkspaceError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_WORKSPACE = 3
EXIT_RUN_FAILED = 4


def _workspace_arg(args) -> Path:
    ws = args.workspace or os.environ.get("PBTLAB_WORKSPACE")
    if not ws:
        raise ConfigError("no workspace given (use --workspace or PBTLAB_WORKSPACE)")
    return Path(ws)


def _load_config(args):
    from .experiment import ExperimentConfig

    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.seeds = None
    if getattr(args, "step_scale", None) is not None:
        cfg.step_scale = args.step_scale
        cfg.__post_init__()  # rescale the derived pbt constants
    return cfg


def _check_fresh(root: Path, force: bool) -> None:
    if root.exists() and any(root.iterdir()) and not force:
        raise WorkspaceError(
            f"workspace {root} is not empty; pass --force to reuse it"
        )


def _run_launch(args, baseline: bool) -> int:
    from .experiment import launch_processes, report

    cfg = _load_config(args)
    root = _workspace_arg(args)
    _check_fresh(root, args.force)
    result = launch_processes(cfg, root, args.config, baseline=baseline)
    rep = report(root)
    outdir = args.out or (root / "report")
    rep.write(outdir)
    print(rep.summary_text(), end="")
    print(f"finished {result.finished}/{result.total} agents; report in {outdir}")
    return EXIT_OK if result.ok else EXIT_RUN_FAILED


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pbtlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    for verb in ("launch", "baseline"):
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True)
        p.add_argument("--workspace")
        p.add_argument("--out", help="report output dir (default <workspace>/report)")
        p.add_argument("--seed", type=int)
        p.add_argument("--step-scale", type=float, dest="step_scale")
        p.add_argument("--force", action="store_true", help="reuse a non-empty workspace")

    p = sub.add_parser("report")
    p.add_argument("--workspace")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gc")
    p.add_argument("--workspace")
    p.add_argument("--keep", type=int, default=3, help="records whose blobs always survive")
    p.add_argument("--period", type=int, help="ranking period in steps, for stale detection")

    p = sub.add_parser("agent")
    p.add_argument("--config", required=True)
    p.add_argument("--workspace")
    p.add_argument("--agent-id", type=int, required=True, dest="agent_id")
    p.add_argument("--baseline", action="store_true")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    try:
        if args.verb in ("launch", "baseline"):
            return _run_launch(args, baseline=args.verb == "baseline")
        if args.verb == "report":
            from .experiment import report

            rep = report(_workspace_arg(args))
            rep.write(args.out)
            print(rep.summary_text(), end="")
            return EXIT_OK
        if args.verb == "gc":
            from .workspace import gc_workspace

            removed = gc_workspace(_workspace_arg(args), args.keep, args.period)
            print(f"removed {removed} files")
            return EXIT_OK
        if args.verb == "agent":
            from .experiment import ExperimentConfig, run_agent_process

            cfg = ExperimentConfig.load(args.config)
            return run_agent_process(cfg, _workspace_arg(args), args.agent_id, args.baseline)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except WorkspaceError as exc:
        print(f"workspace error: {exc}", file=sys.stderr)
        return EXIT_WORKSPACE
    raise AssertionError(f"unhandled verb {args.verb}")


if __name__ == "__main__":
    sys.exit(main())
