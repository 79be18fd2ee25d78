"""Command-line entry point ``spatial-iml``.

Every stage subcommand runs the cached pipeline up to that stage, so
``spatial-iml mgwr`` reuses whatever ``knockoff``/``train`` already produced.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import PipelineConfig, bundled_config_path
from .errors import ConfigError, SpatialImlError

THREADS_ENV = "SPATIAL_IML_THREADS"

# subcommand -> last pipeline stage it runs
STAGE_COMMANDS = {
    "ingest": "ingest",
    "knockoff": "knockoff",
    "train": "rashomon",
    "importance": "prune",
    "gam-global": "global-gam",
    "mgwr": "mgwr",
    "gam-local": "local-gam",
    "report": "report",
    "pipeline": "report",
}

log = logging.getLogger("spatial_iml")


def _set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    os.environ[THREADS_ENV] = str(n)
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _overrides(args) -> dict:
    over: dict = {}
    if args.out:
        over["output_dir"] = str(Path(args.out).resolve())
    if args.data:
        over["data"] = {"csv": str(Path(args.data).resolve()), "synth": None}
    if args.outcomes:
        over["outcomes"] = args.outcomes
    if args.q is not None:
        over.setdefault("knockoff", {})["q"] = args.q
    if args.force_include:
        over["force_include"] = args.force_include
    if args.seed is not None:
        over["seed"] = args.seed
    return over


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (default: bundled mini-MEDSAT)")
    p.add_argument("--out", help="output directory, overrides output_dir")
    p.add_argument("--data", help="CSV path, overrides data.csv")
    p.add_argument("--outcome", "--outcomes", dest="outcomes", action="append",
                   help="outcome column; repeatable")
    p.add_argument("--q", type=float, help="knockoff target FDR")
    p.add_argument("--seed", type=int)
    p.add_argument("--force-include", action="append", default=[],
                   help="feature kept regardless of knockoff selection; repeatable")
    p.add_argument("--force", action="store_true", help="ignore the stage cache")
    p.add_argument("--quiet", action="store_true", help="no per-stage status lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatial-iml",
        description="Knockoff screening, Rashomon importance and spatial GAM/MGWR models.")
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker cap (default: ${THREADS_ENV} or all cores)")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, stage in STAGE_COMMANDS.items():
        p = sub.add_parser(name, help=f"run the pipeline through the {stage} stage")
        _add_common(p)
        # accept the worker cap after the subcommand as well
        p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    p = sub.add_parser("compare", help="coefficient deltas and sign flips between two bundles")
    p.add_argument("bundle_a")
    p.add_argument("bundle_b")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--boundaries", help="GeoJSON with district polygons")
    p = sub.add_parser("synth", help="write a synthetic MEDSAT-shaped CSV and its ground truth")
    p.add_argument("--config", help="config whose data.synth block is used")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="CSV path; truth goes next to it")
    return parser


def _write_error(path: Path, exc: BaseException, stage: str | None = None) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"stage": stage, "scope": None,
                                    "error": type(exc).__name__, "message": str(exc),
                                    "exit_code": getattr(exc, "exit_code", 1)},
                                   indent=2, sort_keys=True) + "\n")
    except OSError:
        pass


def _cmd_compare(args) -> int:
    from .report import compare_periods, load_boundaries

    if not 0 < args.threshold:
        raise ConfigError(f"--threshold must be positive, got {args.threshold}")
    boundaries = load_boundaries(args.boundaries) if args.boundaries else None
    df = compare_periods(args.bundle_a, args.bundle_b, args.out, args.threshold, boundaries)
    n_flip = int(df["flip"].astype(bool).sum()) if len(df) else 0
    print(f"{len(df)} coefficient deltas, {n_flip} sign flips -> {args.out}")
    return 0


def _cmd_synth(args) -> int:
    from .datastore import synth_medsat, write_csv

    cfg = PipelineConfig.load(args.config or bundled_config_path())
    data = cfg.section("data")
    if not data.get("synth"):
        raise ConfigError("invalid config field data.synth: required by the synth command")
    seed = args.seed if args.seed is not None else int(data.get("synth_seed", 0))
    d, truth = synth_medsat(data["synth"], seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(d, out)
    out.with_suffix(".truth.json").write_text(truth.to_json())
    print(f"wrote {d.n} rows, {d.p} features, {d.m} outcomes -> {out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    err_path = Path.cwd() / "error.json"
    try:
        _set_threads(args.threads)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.out:
            err_path = Path(args.out) / "error.json"
        cfg = PipelineConfig.load(args.config or bundled_config_path(), _overrides(args))
        err_path = cfg.output_dir / "error.json"
        from .pipeline import StageError, run_pipeline

        try:
            run_pipeline(cfg, force=args.force, until=STAGE_COMMANDS[args.command],
                         echo=not args.quiet)
        except StageError as exc:
            print(f"error in stage {exc.stage} [{exc.scope}]: "
                  f"{type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
            return exc.exit_code
        print(f"bundle written to {cfg.output_dir}", file=sys.stderr)
        return 0
    except SpatialImlError as exc:
        if args.command not in ("compare", "synth"):
            _write_error(err_path, exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
