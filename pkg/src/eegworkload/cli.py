"""Command-line entry point.

Every command works inside one workspace directory (``--out``) and writes
only to its own sub-directory::

    OUT/synth/        manifest, recordings, events, puzzles
    OUT/preprocess/   cleaned recordings, masks, calibration, inclusion.csv
    OUT/features/     features.csv, stats_table.csv, behavioral.csv
    OUT/cv/<mode>/    summary.json, metrics.csv, iterations.csv, participants.csv
    OUT/staircase/    trajectories.csv, convergence.csv
    OUT/report/       metric tables and SVG figures

Exit codes: 0 success, 2 invalid configuration or arguments, 3 data or
calibration error, 4 missing upstream stage output.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .artifact import CalibrationError
from .config import ConfigError, RunConfig, load_config, override
from .dataset import DataError
from .forest import ForestParams
from .pipeline import StageDependencyError
from .signal_core import SignalError
from .spectral import TASKS

logger = logging.getLogger("eegworkload")

EXIT_OK, EXIT_VALIDATION, EXIT_DATA, EXIT_DEPENDENCY = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration JSON")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, help="workspace directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    parser = _Parser(prog="eegworkload", description="Frontal-EEG workload analysis toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate a synthetic study")
    p = sub.add_parser("preprocess", parents=[common], help="filter, calibrate, clean and gate")
    p.add_argument("--manifest", type=Path, help="manifest JSON (default: OUT/synth/manifest.json)")
    sub.add_parser("features", parents=[common], help="band-power features from preprocess output")
    p = sub.add_parser("cv", parents=[common], help="Monte Carlo cross-validation")
    p.add_argument("--mode", help="within, within:<task> or cross")
    p.add_argument("--iterations", type=int)
    p.add_argument("--features", type=Path, help="features CSV (default: OUT/features/features.csv)")
    p.add_argument("--jobs", type=int, help="worker processes")
    p = sub.add_parser("staircase", parents=[common], help="simulate staircase sessions")
    p.add_argument("--puzzles", type=Path, help="puzzle CSV (default: seeded synthetic bank)")
    sub.add_parser("report", parents=[common], help="render tables and figures")
    return parser


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return override(cfg, seed=args.seed, out=args.out, mode=getattr(args, "mode", None),
                    iterations=getattr(args, "iterations", None))


def cmd_synth(cfg: RunConfig, args) -> int:
    from .synth import synth_dataset
    seed = cfg.require_seed("synth")
    manifest = synth_dataset(replace(cfg.synth, seed=seed), Path(cfg.out) / "synth")
    print(manifest)
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig, args) -> int:
    from .pipeline import preprocess
    manifest = args.manifest or (Path(cfg.inputs.manifest) if cfg.inputs.manifest
                                 else Path(cfg.out) / "synth" / "manifest.json")
    if not Path(manifest).exists():
        raise FileNotFoundError(f"manifest {manifest} not found; run the synth stage or pass --manifest")
    table = preprocess(manifest, Path(cfg.out) / "preprocess", cfg)
    print(table.to_string(index=False))
    if not (table["status"] == "ok").any():
        logger.error("no participant could be preprocessed")
        return EXIT_DATA
    return EXIT_OK


def cmd_features(cfg: RunConfig, args) -> int:
    from .pipeline import features
    table = features(Path(cfg.out) / "preprocess", Path(cfg.out) / "features", cfg)
    print(f"{len(table)} feature rows -> {Path(cfg.out) / 'features' / 'features.csv'}")
    return EXIT_OK


def cmd_cv(cfg: RunConfig, args) -> int:
    from .mccv import build_dataset, run_mccv
    from .spectral import read_features_csv
    seed = cfg.require_seed("cv")
    path = args.features or (Path(cfg.inputs.features) if cfg.inputs.features
                             else Path(cfg.out) / "features" / "features.csv")
    if not Path(path).exists():
        raise FileNotFoundError(f"features {path} not found; run the features stage")
    df = read_features_csv(path)
    modes = [f"within:{t}" for t in TASKS if t in set(df["task"])] if cfg.cv.mode == "within" \
        else [cfg.cv.mode]
    params = ForestParams(**{**cfg.forest.__dict__, "seed": 0})
    n_jobs = args.jobs or cfg.cv.n_jobs
    for mode in modes:
        ds = build_dataset(df, mode, cfg.bands.names)
        result = run_mccv(ds, cfg.cv.iterations, seed, params, cfg.cv.test_fraction,
                          cfg.cv.balance, n_jobs)
        out = Path(cfg.out) / "cv" / mode.replace(":", "_")
        result.write(out)
        ci = result.ci_half_width
        print(f"{mode}: mean macro F1 {result.mean_macro_f1:.4f} "
              f"(95% CI {'undefined' if ci is None else f'+/- {ci:.4f}'}) -> {out}")
    return EXIT_OK


def cmd_staircase(cfg: RunConfig, args) -> int:
    from .staircase import (PuzzleBank, check_invariants, convergence_summary, load_bank,
                            simulate_sessions, synthetic_bank)
    seed = cfg.require_seed("staircase")
    sc = cfg.staircase
    puzzles = args.puzzles or (Path(cfg.inputs.puzzles) if cfg.inputs.puzzles else None)
    if puzzles is not None:
        if not Path(puzzles).exists():
            raise FileNotFoundError(f"puzzle bank {puzzles} not found")
        bank = load_bank(puzzles)
    else:
        df = synthetic_bank(sc.bank_per_bin, seed)
        bank = PuzzleBank.from_records(df["PuzzleId"], df["Rating"])
    traj = simulate_sessions(bank, sc.skills, sc.sessions, seed, sc.rounds, sc.per_round)
    problems = sum(len(check_invariants(g, bank)) for _, g in traj.groupby(["skill", "session"]))
    out = Path(cfg.out) / "staircase"
    out.mkdir(parents=True, exist_ok=True)
    traj.to_csv(out / "trajectories.csv", index=False)
    summary = convergence_summary(traj)
    summary["invariant_violations"] = problems
    summary.to_csv(out / "convergence.csv", index=False, float_format="%.17g")
    print(summary.to_string(index=False))
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    from .report import render
    ws = Path(cfg.out)
    if not any((ws / d).exists() for d in ("cv", "features", "staircase")):
        raise FileNotFoundError(f"no cv, features or staircase output under {ws}")
    for p in render(ws, ws / "report"):
        print(p)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "features": cmd_features,
            "cv": cmd_cv, "staircase": cmd_staircase, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command in ("synth", "cv", "staircase"):
            cfg.require_seed(args.command)
        stage_dir = Path(cfg.out) / args.command
        code = COMMANDS[args.command](cfg, args)
        stage_dir.mkdir(parents=True, exist_ok=True)
        (stage_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return code
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ModuleNotFoundError as exc:
        print(f"missing dependency: {exc.name}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (DataError, SignalError, CalibrationError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except StageDependencyError as exc:
        print(f"missing stage output: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
