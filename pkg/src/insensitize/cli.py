"""Command-line front end.

Exit codes: 0 success, 2 invalid configuration, 3 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import experiments
from .config import ConfigError, ExperimentConfig, default_config, parse_config

log = logging.getLogger("insensitize")


def _floats(text: str) -> list[float]:
    return [float(p) for p in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(p) for p in text.replace(",", " ").split()]


def _available_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def thread_limit(requested: int) -> int:
    """Clamp a thread request to the usable cores.

    OpenBLAS sizes its buffers for the cores it sees at load time and can
    crash when asked for more threads than that.
    """
    limit = min(requested, _available_cpus())
    if limit < requested:
        log.info("--threads %d reduced to %d available core(s)", requested, limit)
    return limit


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="insensitize",
        description="Insensitizing controls for a stochastic heat equation with dynamic boundary conditions.",
    )
    p.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", type=Path, help="INI configuration file (defaults if omitted)")
        sp.add_argument("--out", type=Path, help="output directory (overrides [output] directory)")
        sp.add_argument("--threads", type=int, default=1, help="cap on BLAS/worker threads")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument(
            "--allow-disjoint-regions",
            action="store_true",
            help="permit an empty G0 ∩ O (exploration only)",
        )

    common(sub.add_parser("simulate", help="solve the cascade with zero controls"))
    common(sub.add_parser("synthesize", help="compute insensitizing controls by penalized HUM"))
    conv = sub.add_parser("convergence", help="manufactured-solution refinement study")
    common(conv)
    conv.add_argument("--levels", type=_ints, help="cell counts, e.g. '8,16,32,64'")
    carl = sub.add_parser("carleman", help="Carleman and observability diagnostics")
    common(carl)
    carl.add_argument("--lambdas", type=_floats, help="lambda grid, e.g. '1,2,5,10'")
    carl.add_argument("--rescale", type=float, default=1.0, help="multiply every sampled datum by this factor")
    sub.add_parser("show-config", help="print the normalized configuration").add_argument(
        "--config", type=Path
    )
    return p


def _load(args) -> ExperimentConfig:
    if args.config is None:
        cfg = default_config()
    else:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration: {exc.strerror}", None, str(args.config))
        cfg = parse_config(text, str(args.config))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(run__seed=args.seed)
    if getattr(args, "allow_disjoint_regions", False):
        cfg = cfg.replace(run__allow_disjoint_regions=True)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        if args.command == "show-config":
            sys.stdout.write(cfg.to_ini())
            return experiments.EXIT_OK
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = args.out or Path(cfg.get("output", "directory"))
        with threadpool_limits(limits=thread_limit(args.threads)):
            exp = experiments.build_experiment(cfg)
            if args.command == "simulate":
                return experiments.run_simulate(exp, out)
            if args.command == "synthesize":
                return experiments.run_synthesize(exp, out)
            if args.command == "convergence":
                return experiments.run_convergence(exp, out, args.levels)
            return experiments.run_carleman(exp, out, args.lambdas, args.rescale)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return experiments.EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
