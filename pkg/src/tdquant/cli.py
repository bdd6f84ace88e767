"""Command line entry points.

Subcommands mirror the pipeline stages; each one reuses artifacts already
present in the output directory and writes the ones it produces.

Exit codes: 0 success, 2 configuration or validation error, 3 numerical
failure, 4 infeasible bit budget.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import (
    ConfigError,
    InfeasibleBudgetError,
    MissingTimestepsError,
    NumericalError,
    ParameterError,
    ShapeError,
)
from .pipeline import (
    ARTIFACTS,
    Manifest,
    PipelineConfig,
    compare_policies,
    default_config,
    load_calibrated,
    load_config,
    load_fisher,
    run_pipeline,
    stage_calibrate,
    stage_fisher,
    stage_search,
    uniform_baseline_bits,
    uniform_schedule,
    write_compare_csv,
)
from .search import BitSchedule
from .toy_dit import init_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INFEASIBLE = 4


def _resolve_config(args) -> PipelineConfig:
    if args.config is not None:
        config = load_config(args.config)
    else:
        config = default_config()
    if getattr(args, "output_dir", None):
        config = PipelineConfig.from_dict({**config.to_dict(), "output_dir": str(args.output_dir)})
    return config


def _out_dir(config: PipelineConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ensure_fisher(config, out, model, manifest):
    fmap = load_fisher(out)
    if fmap is None:
        manifest.mark("fisher", "running")
        fmap = stage_fisher(config, out, model)
        manifest.mark("fisher", "complete")
        manifest.add_artifact(ARTIFACTS["fisher_map"])
        manifest.add_artifact(ARTIFACTS["fisher_csv"])
    return fmap


def _ensure_calibrated(config, out, model, fmap, manifest):
    calibrated = load_calibrated(out)
    if calibrated is None:
        manifest.mark("calibrate", "running")
        calibrated, _report = stage_calibrate(config, out, model, fmap)
        manifest.mark("calibrate", "complete")
        manifest.add_artifact(ARTIFACTS["calibrated_model"])
        manifest.add_artifact(ARTIFACTS["calib_report"])
    return calibrated


def cmd_fisher(args) -> int:
    config = _resolve_config(args)
    out = _out_dir(config)
    manifest = Manifest(out, config)
    model = init_model(config.model_spec())
    manifest.mark("fisher", "running")
    try:
        stage_fisher(config, out, model)
    except Exception:
        manifest.mark("fisher", "failed")
        raise
    manifest.mark("fisher", "complete")
    manifest.add_artifact(ARTIFACTS["fisher_map"])
    manifest.add_artifact(ARTIFACTS["fisher_csv"])
    print(f"wrote {out / ARTIFACTS['fisher_csv']}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    config = _resolve_config(args)
    out = _out_dir(config)
    manifest = Manifest(out, config)
    model = init_model(config.model_spec())
    fmap = _ensure_fisher(config, out, model, manifest)
    manifest.mark("calibrate", "running")
    try:
        stage_calibrate(config, out, model, fmap)
    except Exception:
        manifest.mark("calibrate", "failed")
        raise
    manifest.mark("calibrate", "complete")
    manifest.add_artifact(ARTIFACTS["calibrated_model"])
    manifest.add_artifact(ARTIFACTS["calib_report"])
    print(f"wrote {out / ARTIFACTS['calib_report']}")
    return EXIT_OK


def cmd_search(args) -> int:
    config = _resolve_config(args)
    out = _out_dir(config)
    manifest = Manifest(out, config)
    model = init_model(config.model_spec())
    fmap = _ensure_fisher(config, out, model, manifest)
    calibrated = _ensure_calibrated(config, out, model, fmap, manifest)
    manifest.mark("search", "running")
    try:
        schedule, _frontier, _evaluator = stage_search(config, out, model, calibrated, fmap)
    except Exception:
        manifest.mark("search", "failed")
        raise
    manifest.mark("search", "complete")
    manifest.add_artifact(ARTIFACTS["schedule"])
    print(f"wrote {out / ARTIFACTS['schedule']} (avg bits {schedule.avg_bits:.3f})")
    return EXIT_OK


def cmd_run(args) -> int:
    config = _resolve_config(args)
    report = run_pipeline(config, render_figures=not args.no_figures)
    out = Path(config.output_dir)
    print(f"wrote {out / ARTIFACTS['report']}")
    print(f"avg bits: {report['schedule']['avg_bits']}")
    print(f"flops reduction: {report['reductions']['flops_reduction_3sig']}x")
    print(f"size reduction: {report['reductions']['size_reduction_3sig']}x")
    return EXIT_OK


def cmd_compare(args) -> int:
    config = _resolve_config(args)
    out = _out_dir(config)
    model = init_model(config.model_spec())

    if args.schedule is not None:
        searched = BitSchedule.load(args.schedule)
    else:
        path = out / ARTIFACTS["schedule"]
        if not path.exists():
            raise ConfigError(
                f"no schedule at {path}; run the search stage first or pass --schedule"
            )
        searched = BitSchedule.load(path)

    if args.baseline is not None:
        baseline = BitSchedule.load(args.baseline)
        baseline_name = Path(args.baseline).stem
    else:
        bits = uniform_baseline_bits(config)
        baseline = uniform_schedule(config, bits)
        baseline_name = f"uniform{bits}"

    fmap = load_fisher(out)
    rows = compare_policies(config, {"searched": searched, baseline_name: baseline}, model=model, fmap=fmap)
    write_compare_csv(rows, out / ARTIFACTS["compare"])
    for name, mode, err in rows:
        print(f"{name:>12s}  {mode:>13s}  {err:.6e}")
    print(f"wrote {out / ARTIFACTS['compare']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdquant",
        description="Timestep-aware post-training quantization for a toy diffusion transformer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON configuration file (defaults built in)")
        p.add_argument("--output-dir", type=Path, default=None, help="override the configured output directory")

    p_fisher = sub.add_parser("fisher", help="estimate the sensitivity map and write fisher.csv")
    add_common(p_fisher)
    p_fisher.set_defaults(func=cmd_fisher)

    p_calib = sub.add_parser("calibrate", help="calibrate weights and write calib_report.csv")
    add_common(p_calib)
    p_calib.set_defaults(func=cmd_calibrate)

    p_search = sub.add_parser("search", help="search a bit schedule and write schedule.json")
    add_common(p_search)
    p_search.set_defaults(func=cmd_search)

    p_run = sub.add_parser("run", help="run every stage and write report.json plus figures")
    add_common(p_run)
    p_run.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="compare schedules under three weight treatments")
    add_common(p_cmp)
    p_cmp.add_argument("--schedule", type=Path, default=None, help="schedule.json to evaluate (default: from output dir)")
    p_cmp.add_argument("--baseline", type=Path, default=None, help="baseline schedule.json (default: uniform at budget)")
    p_cmp.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError, ShapeError, MissingTimestepsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
