"""End-to-end orchestration: profile, calibrate, search, report.

The pipeline wires the library modules together behind a single strict
JSON configuration document and persists every stage's artifact so stages
can be re-run individually.  All numeric report fields are serialized as
decimal strings (17 significant digits) to make byte-level reproducibility
checks meaningful; wall-clock timings live under their own key so the
rest of the report is deterministic.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calib import CalibReport, calibrate_model, mean_error_top_timesteps
from .errors import ConfigError, ShapeError
from .fisher import FisherMap, estimate_fisher, temporal_weights, uniform_weights, write_heatmap_csv
from .quant import ALLOWED_BITS, QuantSpec, quantize_layer_weights
from .search import (
    BitSchedule,
    SearchConfig,
    StepLossEvaluator,
    beam_search,
    end_to_end_error,
    final_select,
    param_weighted_average,
)
from .toy_dit import (
    LayerWeights,
    Model,
    ModelSpec,
    TraceStore,
    init_model,
    load_model,
    model_fingerprint,
    sample_trajectory,
    save_model,
)

FULL_PRECISION_BITS = 16.0

ARTIFACTS = {
    "fisher_map": "fisher.json",
    "fisher_csv": "fisher.csv",
    "calibrated_model": "calibrated_model.json",
    "calib_report": "calib_report.csv",
    "schedule": "schedule.json",
    "report": "report.json",
    "manifest": "MANIFEST.json",
    "compare": "compare.csv",
}

_STAGES = ("fisher", "calibrate", "search", "report")

_DEFAULT_CONFIG = {
    "model": {"num_layers": 8, "hidden_dim": 8, "num_timesteps": 10, "token_count": 2, "seed": 0},
    "quant": {"palette": [3, 4, 8], "weight_bits": 3},
    "tau": 1.0,
    "search": {"beam_width": 8, "num_candidates": 8, "bit_target": 4.0},
    "seeds": {"fisher": 101, "calib": 202, "select": 303},
    "samples": {"fisher": 8, "step_loss": 4, "selection": 4},
    "output_dir": "tdquant_out",
}


def format_float(x: float) -> str:
    """Decimal string with 17 significant digits (round-trips exactly)."""
    return f"{float(x):.17g}"


def format_sig(x: float, digits: int = 3) -> str:
    """Decimal string at the given significant figures, e.g. 5.16129 -> 5.16."""
    return f"{float(x):.{digits}g}"


def _require_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"config section '{path}' must be an object")
    return value


def _check_unknown(value: dict, allowed, path: str) -> None:
    unknown = set(value) - set(allowed)
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} at {where}")


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"config key '{path}' must be an integer, got {value!r}")
    return value


def _as_float(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config key '{path}' must be a number, got {value!r}")
    return float(value)


@dataclass(frozen=True)
class PipelineConfig:
    """Validated pipeline settings; see default_config() for the schema."""

    model: dict
    quant: dict
    tau: float
    search: dict
    seeds: dict
    samples: dict
    output_dir: str

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = _require_mapping(doc, "")
        _check_unknown(doc, _DEFAULT_CONFIG, "")
        merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in _DEFAULT_CONFIG.items()}
        for key, value in doc.items():
            if isinstance(_DEFAULT_CONFIG[key], dict):
                section = _require_mapping(value, key)
                _check_unknown(section, _DEFAULT_CONFIG[key], key)
                merged[key].update(section)
            else:
                merged[key] = value

        model = {k: _as_int(v, f"model.{k}") for k, v in merged["model"].items()}
        quant = dict(merged["quant"])
        if not isinstance(quant["palette"], (list, tuple)) or not quant["palette"]:
            raise ConfigError("config key 'quant.palette' must be a non-empty list")
        quant["palette"] = [_as_int(b, "quant.palette[]") for b in quant["palette"]]
        quant["weight_bits"] = _as_int(quant["weight_bits"], "quant.weight_bits")
        if quant["weight_bits"] not in ALLOWED_BITS:
            raise ConfigError(f"config key 'quant.weight_bits' must be one of {ALLOWED_BITS}")
        tau = _as_float(merged["tau"], "tau")
        if tau <= 0.0:
            raise ConfigError(f"config key 'tau' must be positive, got {tau}")
        search = {
            "beam_width": _as_int(merged["search"]["beam_width"], "search.beam_width"),
            "num_candidates": _as_int(merged["search"]["num_candidates"], "search.num_candidates"),
            "bit_target": _as_float(merged["search"]["bit_target"], "search.bit_target"),
        }
        seeds = {k: _as_int(v, f"seeds.{k}") for k, v in merged["seeds"].items()}
        samples = {k: _as_int(v, f"samples.{k}") for k, v in merged["samples"].items()}
        for k, v in samples.items():
            if v < 1:
                raise ConfigError(f"config key 'samples.{k}' must be >= 1, got {v}")
        if not isinstance(merged["output_dir"], str) or not merged["output_dir"]:
            raise ConfigError("config key 'output_dir' must be a non-empty string")

        cfg = cls(model=model, quant=quant, tau=tau, search=search, seeds=seeds, samples=samples, output_dir=merged["output_dir"])
        # surface invalid dimension/search values now, as ConfigError
        try:
            cfg.model_spec()
            cfg.search_config()
        except Exception as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        return cfg

    def model_spec(self) -> ModelSpec:
        return ModelSpec(**self.model)

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            num_candidates=self.search["num_candidates"],
            bit_target=self.search["bit_target"],
            beam_width=self.search["beam_width"],
            palette=tuple(self.quant["palette"]),
        )

    def weight_spec(self) -> QuantSpec:
        return QuantSpec(bits=self.quant["weight_bits"], symmetric=True, granularity="per_channel")

    def fisher_seeds(self) -> list:
        return [self.seeds["fisher"] + i for i in range(self.samples["fisher"])]

    def calib_seeds(self) -> list:
        return [self.seeds["calib"] + i for i in range(self.samples["step_loss"])]

    def select_seeds(self) -> list:
        return [self.seeds["select"] + i for i in range(self.samples["selection"])]

    def to_dict(self) -> dict:
        return {
            "model": dict(self.model),
            "quant": {"palette": list(self.quant["palette"]), "weight_bits": self.quant["weight_bits"]},
            "tau": self.tau,
            "search": dict(self.search),
            "seeds": dict(self.seeds),
            "samples": dict(self.samples),
            "output_dir": self.output_dir,
        }

    def fingerprint(self) -> str:
        """Hash of the computational settings; file locations excluded."""
        doc = self.to_dict()
        doc.pop("output_dir")
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def default_config(**overrides) -> PipelineConfig:
    """The built-in seeded configuration, optionally with top-level overrides."""
    return PipelineConfig.from_dict(overrides)


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return PipelineConfig.from_dict(doc)


class Manifest:
    """Stage-completion ledger persisted after every stage transition."""

    def __init__(self, out_dir: Path, config: PipelineConfig):
        self.path = out_dir / ARTIFACTS["manifest"]
        self.doc = {
            "config_fingerprint": config.fingerprint(),
            "stages": {stage: "pending" for stage in _STAGES},
            "artifacts": [],
        }

    def mark(self, stage: str, state: str) -> None:
        self.doc["stages"][stage] = state
        self._write()

    def add_artifact(self, name: str) -> None:
        if name not in self.doc["artifacts"]:
            self.doc["artifacts"].append(name)
        self._write()

    def _write(self) -> None:
        with open(self.path, "w") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _out_dir(config: PipelineConfig, output_dir=None) -> Path:
    out = Path(output_dir) if output_dir is not None else Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def stage_fisher(config: PipelineConfig, out: Path, model: Model) -> FisherMap:
    fmap = estimate_fisher(model, calib_seeds=config.fisher_seeds(), batch=1)
    with open(out / ARTIFACTS["fisher_map"], "w") as fh:
        json.dump(fmap.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_heatmap_csv(out / ARTIFACTS["fisher_csv"], model, fmap)
    return fmap


def load_fisher(out: Path) -> FisherMap | None:
    path = out / ARTIFACTS["fisher_map"]
    if not path.exists():
        return None
    with open(path) as fh:
        return FisherMap.from_dict(json.load(fh))


def collect_calibration_traces(config: PipelineConfig, model: Model):
    """Teacher latents + traces used for both the Hessians and step losses."""
    evaluator = StepLossEvaluator(
        model,
        model,
        seeds=config.calib_seeds(),
        batch=1,
        palette=tuple(config.quant["palette"]),
    )
    return evaluator


def stage_calibrate(config: PipelineConfig, out: Path, model: Model, fmap: FisherMap) -> tuple[Model, CalibReport]:
    store = TraceStore()
    for i, seed in enumerate(config.calib_seeds()):
        store.batch_id = i
        sample_trajectory(model, seed=seed, trace=store)
    weights = temporal_weights(fmap, tau=config.tau)
    calibrated, report = calibrate_model(model, store, weights, config.weight_spec())
    save_model(calibrated, out / ARTIFACTS["calibrated_model"])
    report.write_csv(out / ARTIFACTS["calib_report"])
    return calibrated, report


def load_calibrated(out: Path) -> Model | None:
    path = out / ARTIFACTS["calibrated_model"]
    if not path.exists():
        return None
    return load_model(path)


def stage_search(config: PipelineConfig, out: Path, model: Model, calibrated: Model, fmap: FisherMap):
    cfg = config.search_config()
    evaluator = StepLossEvaluator(model, calibrated, seeds=config.calib_seeds(), batch=1, palette=cfg.palette)
    frontier = beam_search(model, calibrated, fmap, cfg, seeds=config.calib_seeds(), evaluator=evaluator)
    schedule = final_select(frontier, cfg, model, calibrated, seeds=config.select_seeds(), evaluator=evaluator)
    schedule.save(out / ARTIFACTS["schedule"])
    return schedule, frontier, evaluator


def _uniform_grid(config: PipelineConfig, bits: int) -> np.ndarray:
    spec = config.model_spec()
    return np.full((spec.num_timesteps, spec.num_layers), bits, dtype=np.int64)


def uniform_baseline_bits(config: PipelineConfig) -> int:
    """Largest palette entry not exceeding the budget (the uniform baseline)."""
    palette = sorted(config.quant["palette"])
    feasible = [b for b in palette if b <= config.search["bit_target"] + 1e-12]
    return feasible[-1] if feasible else palette[0]


def build_report(
    config: PipelineConfig,
    model: Model,
    fmap: FisherMap,
    calib_report: CalibReport,
    schedule: BitSchedule,
    calibrated: Model,
    evaluator: StepLossEvaluator,
    timings: dict,
) -> dict:
    weight_bits = config.quant["weight_bits"]
    flops_reduction = FULL_PRECISION_BITS / schedule.param_weighted_avg_bits
    size_reduction = FULL_PRECISION_BITS / weight_bits

    select_seeds = config.select_seeds()
    base_bits = uniform_baseline_bits(config)
    err_selected = schedule.end_to_end_error
    if err_selected is None:
        err_selected = end_to_end_error(model, calibrated, schedule.grid, evaluator.table, select_seeds)
    err_uniform = end_to_end_error(model, calibrated, _uniform_grid(config, base_bits), evaluator.table, select_seeds)

    weights = temporal_weights(fmap, tau=config.tau)
    top_error = mean_error_top_timesteps(calib_report, weights, fraction=0.2)
    errors = [row[3] for row in calib_report.rows]

    report = {
        "config_fingerprint": config.fingerprint(),
        "model": {
            "num_timesteps": model.spec.num_timesteps,
            "num_layers": model.spec.num_layers,
            "hidden_dim": model.spec.hidden_dim,
            "token_count": model.spec.token_count,
            "seed": model.spec.seed,
            "fingerprint": model_fingerprint(model),
        },
        "fisher": {
            "samples_per_cell": fmap.samples_per_cell,
            "score_min": format_float(float(np.min(fmap.scores))),
            "score_max": format_float(float(np.max(fmap.scores))),
            "peak_timestep_per_layer": [int(t) + 1 for t in np.argmax(fmap.scores, axis=0)],
        },
        "calibration": {
            "weight_bits": weight_bits,
            "tau": format_float(config.tau),
            "mean_error": format_float(float(np.mean(errors))),
            "max_error": format_float(float(np.max(errors))),
            "top_timestep_mean_error": format_float(top_error),
        },
        "schedule": {
            "avg_bits": format_float(schedule.avg_bits),
            "param_weighted_avg_bits": format_float(schedule.param_weighted_avg_bits),
            "bit_target": format_float(config.search["bit_target"]),
            "per_step_loss": [format_float(v) for v in schedule.per_step_loss],
            "objective": format_float(schedule.objective if schedule.objective is not None else float("nan")),
        },
        "reductions": {
            "flops_reduction": format_float(flops_reduction),
            "flops_reduction_3sig": format_sig(flops_reduction),
            "size_reduction": format_float(size_reduction),
            "size_reduction_3sig": format_sig(size_reduction),
        },
        "end_to_end": {
            "selected_schedule_error": format_float(err_selected),
            "uniform_baseline_bits": base_bits,
            "uniform_baseline_error": format_float(err_uniform),
        },
        "timings": {stage: format_float(v) for stage, v in timings.items()},
    }
    return report


def run_pipeline(config: PipelineConfig, output_dir=None, render_figures: bool = True) -> dict:
    """Execute every stage in order; returns the report document."""
    out = _out_dir(config, output_dir)
    manifest = Manifest(out, config)
    model = init_model(config.model_spec())
    timings: dict[str, float] = {}

    def timed(stage, fn):
        manifest.mark(stage, "running")
        start = time.perf_counter()
        try:
            result = fn()
        except Exception:
            manifest.mark(stage, "failed")
            raise
        timings[stage] = time.perf_counter() - start
        manifest.mark(stage, "complete")
        return result

    fmap = timed("fisher", lambda: stage_fisher(config, out, model))
    manifest.add_artifact(ARTIFACTS["fisher_map"])
    manifest.add_artifact(ARTIFACTS["fisher_csv"])

    calibrated, calib_report = timed("calibrate", lambda: stage_calibrate(config, out, model, fmap))
    manifest.add_artifact(ARTIFACTS["calibrated_model"])
    manifest.add_artifact(ARTIFACTS["calib_report"])

    schedule, frontier, evaluator = timed("search", lambda: stage_search(config, out, model, calibrated, fmap))
    manifest.add_artifact(ARTIFACTS["schedule"])

    def report_stage():
        report = build_report(config, model, fmap, calib_report, schedule, calibrated, evaluator, timings)
        if render_figures:
            from . import figures

            fig_dir = out / "figures"
            fig_dir.mkdir(exist_ok=True)
            figures.save_heatmap_figure(model, fmap, fig_dir / "fisher_heatmap.png")
            figures.save_calib_errors_figure(calib_report, model, fig_dir / "calib_errors.png")
            figures.save_frontier_figure(frontier, fig_dir / "frontier.png")
            figures.save_schedule_figure(schedule, model, fig_dir / "schedule.png")
            report["figures"] = sorted(p.name for p in fig_dir.glob("*.png"))
        return report

    report = timed("report", report_stage)
    report["timings"] = {stage: format_float(v) for stage, v in timings.items()}
    with open(out / ARTIFACTS["report"], "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add_artifact(ARTIFACTS["report"])
    return report


WEIGHT_MODES = ("minmax", "uniform_calib", "fisher_calib")


def _weight_variants(config: PipelineConfig, model: Model, fmap: FisherMap):
    """The three weight treatments the ablation grid compares."""
    spec = config.weight_spec()
    store = TraceStore()
    for i, seed in enumerate(config.calib_seeds()):
        store.batch_id = i
        sample_trajectory(model, seed=seed, trace=store)

    rtn_layers = []
    for layer in model.layers:
        w_hat, _ = quantize_layer_weights(layer.w, spec)
        rtn_layers.append(LayerWeights(index=layer.index, kind=layer.kind, w=w_hat, bias=layer.bias.copy()))
    minmax_model = Model(spec=model.spec, layers=rtn_layers, shifts=model.shifts.copy(), mixing=model.mixing.copy())

    num_t, num_l = model.spec.num_timesteps, model.spec.num_layers
    uniform_model, _ = calibrate_model(model, store, uniform_weights(num_t, num_l), spec)
    fisher_model, _ = calibrate_model(model, store, temporal_weights(fmap, tau=config.tau), spec)
    return {"minmax": minmax_model, "uniform_calib": uniform_model, "fisher_calib": fisher_model}


def compare_policies(config: PipelineConfig, schedules: dict, model: Model | None = None, fmap: FisherMap | None = None) -> list:
    """End-to-end error for every (schedule, weight mode) pair.

    schedules maps a label to a BitSchedule; the result rows are
    (schedule_label, weight_mode, error), one per combination.
    """
    if model is None:
        model = init_model(config.model_spec())
    if fmap is None:
        fmap = estimate_fisher(model, calib_seeds=config.fisher_seeds(), batch=1)

    spec = config.model_spec()
    for name, schedule in schedules.items():
        if schedule.grid.shape != (spec.num_timesteps, spec.num_layers):
            raise ShapeError(
                f"schedule '{name}' grid shape {schedule.grid.shape} does not match model "
                f"({spec.num_timesteps}, {spec.num_layers})"
            )

    variants = _weight_variants(config, model, fmap)
    evaluator = collect_calibration_traces(config, model)
    select_seeds = config.select_seeds()
    rows = []
    for name, schedule in schedules.items():
        for mode in WEIGHT_MODES:
            err = end_to_end_error(model, variants[mode], schedule.grid, evaluator.table, select_seeds)
            rows.append((name, mode, err))
    return rows


def write_compare_csv(rows, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["schedule", "weights", "error"])
        for name, mode, err in rows:
            writer.writerow([name, mode, format_float(err)])


def uniform_schedule(config: PipelineConfig, bits: int | None = None) -> BitSchedule:
    """A flat baseline schedule at the given (or budget-derived) bit width."""
    if bits is None:
        bits = uniform_baseline_bits(config)
    grid = _uniform_grid(config, bits)
    model = init_model(config.model_spec())
    return BitSchedule(
        grid=grid,
        avg_bits=float(grid.mean()),
        param_weighted_avg_bits=param_weighted_average(grid, model),
        per_step_loss=[],
        search_config=config.search_config().to_dict(),
        seeds=config.select_seeds(),
    )
