"""Timestep-dynamic activation bit allocation via Pareto beam search.

Each denoising step gets its own per-layer activation bit vector.  The
search space is kept tractable three ways: candidate vectors per step come
from a sensitivity-ranked quantile sweep instead of the full lattice, the
beam only retains Pareto-efficient (cumulative bits, cumulative loss)
paths, and per-step losses are measured on teacher-forced reference
latents so they are path-independent and cacheable.  The cache makes an
exhaustive enumeration oracle exact, which the tests lean on heavily.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleBudgetError, ParameterError, ShapeError
from .fisher import FisherMap
from .quant import ALLOWED_BITS, ActivationTable, fake_quant, make_schedule_plugin
from .toy_dit import DenoiseState, Model, TraceStore, forward, sample_trajectory

_BUDGET_TOL = 1e-12


@dataclass(frozen=True)
class SearchConfig:
    """Knobs for candidate generation, beam pruning, and selection.

    beam_width is the number of retained paths M; num_candidates is the
    per-step candidate count M_c (beam_width defaults to it when omitted).
    bit_target is the average-bits budget over the whole T x L grid.
    """

    num_candidates: int
    bit_target: float
    beam_width: int | None = None
    palette: tuple = (3, 4, 8)
    calib_batch: int = 1
    select_batch: int = 1

    def __post_init__(self):
        if self.beam_width is None:
            object.__setattr__(self, "beam_width", self.num_candidates)
        palette = tuple(int(b) for b in self.palette)
        if len(palette) == 0 or any(b not in ALLOWED_BITS or b >= 16 for b in palette):
            raise ParameterError(f"palette must be non-empty with entries from {{3, 4, 8}}, got {self.palette}")
        if list(palette) != sorted(set(palette)):
            raise ParameterError(f"palette must be strictly increasing, got {self.palette}")
        object.__setattr__(self, "palette", palette)
        if self.beam_width < 1:
            raise ParameterError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.num_candidates < 1:
            raise ParameterError(f"num_candidates must be >= 1, got {self.num_candidates}")
        if not palette[0] <= self.bit_target <= palette[-1]:
            raise ParameterError(
                f"bit_target {self.bit_target} outside palette range [{palette[0]}, {palette[-1]}]"
            )
        if self.calib_batch < 1 or self.select_batch < 1:
            raise ParameterError("batch sizes must be >= 1")

    def to_dict(self) -> dict:
        return {
            "beam_width": self.beam_width,
            "num_candidates": self.num_candidates,
            "bit_target": self.bit_target,
            "palette": list(self.palette),
            "calib_batch": self.calib_batch,
            "select_batch": self.select_batch,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SearchConfig":
        return cls(
            num_candidates=int(payload["num_candidates"]),
            bit_target=float(payload["bit_target"]),
            beam_width=int(payload["beam_width"]),
            palette=tuple(payload.get("palette", (3, 4, 8))),
            calib_batch=int(payload.get("calib_batch", 1)),
            select_batch=int(payload.get("select_batch", 1)),
        )


@dataclass
class CandidateConfig:
    """One per-layer bit vector proposed for a single timestep."""

    t: int
    bits: tuple
    loss: float | None = None

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if len(bits) == 0:
            raise ParameterError("candidate bit vector must be non-empty")
        if any(b not in ALLOWED_BITS for b in bits):
            raise ParameterError(f"candidate bits must come from {ALLOWED_BITS}, got {bits}")
        if self.t < 1:
            raise ParameterError(f"timestep must be >= 1, got {self.t}")
        self.bits = bits

    @property
    def avg_bits(self) -> float:
        return sum(self.bits) / len(self.bits)


@dataclass(frozen=True)
class SearchPath:
    """A partial schedule: chosen configs plus running loss and bits totals."""

    configs: tuple = ()
    loss: float = 0.0
    bits: float = 0.0

    def extend(self, config: CandidateConfig, step_loss: float) -> "SearchPath":
        return SearchPath(
            configs=self.configs + (config,),
            loss=self.loss + step_loss,
            bits=self.bits + config.avg_bits,
        )

    @property
    def avg_bits(self) -> float:
        if not self.configs:
            return 0.0
        return self.bits / len(self.configs)


@dataclass
class BitSchedule:
    """A complete T x L activation bit grid with its measured costs."""

    grid: np.ndarray
    avg_bits: float
    param_weighted_avg_bits: float
    per_step_loss: list
    search_config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    objective: float | None = None
    end_to_end_error: float | None = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.int64)
        if grid.ndim != 2 or grid.size == 0:
            raise ShapeError(f"schedule grid must be a nonempty T x L matrix, got shape {grid.shape}")
        self.grid = grid

    @property
    def num_timesteps(self) -> int:
        return self.grid.shape[0]

    @property
    def num_layers(self) -> int:
        return self.grid.shape[1]

    def to_dict(self) -> dict:
        return {
            "T": self.num_timesteps,
            "L": self.num_layers,
            "grid": self.grid.tolist(),
            "avg_bits": self.avg_bits,
            "param_weighted_avg_bits": self.param_weighted_avg_bits,
            "per_step_loss": list(self.per_step_loss),
            "search_config": dict(self.search_config),
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BitSchedule":
        sched = cls(
            grid=np.array(payload["grid"], dtype=np.int64),
            avg_bits=float(payload["avg_bits"]),
            param_weighted_avg_bits=float(payload["param_weighted_avg_bits"]),
            per_step_loss=list(payload["per_step_loss"]),
            search_config=dict(payload.get("search_config", {})),
            seeds=list(payload.get("seeds", [])),
        )
        if sched.num_timesteps != int(payload["T"]) or sched.num_layers != int(payload["L"]):
            raise ParameterError("schedule dimensions do not match its grid")
        return sched

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "BitSchedule":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def param_weighted_average(grid: np.ndarray, model: Model) -> float:
    """Average bits weighted by each layer's weight parameter count."""
    counts = np.array([layer.w.size for layer in model.layers], dtype=np.float64)
    if grid.shape[1] != counts.size:
        raise ShapeError(f"grid has {grid.shape[1]} layers but model has {counts.size}")
    per_layer_mean = grid.mean(axis=0)
    return float(np.sum(per_layer_mean * counts) / np.sum(counts))


class StepLossEvaluator:
    """Teacher-forced per-step loss with a (t, bits) cache.

    Reference latents come from full-precision trajectories for the given
    seeds; the activation quantization table is calibrated on those same
    full-precision traces.  Because the latents never depend on earlier
    quantization choices, a step's loss is a pure function of (t, bits) and
    is cached, which is what makes the brute-force oracle bit-exact.
    """

    def __init__(self, model: Model, calibrated: Model, seeds, batch: int = 1, palette=(3, 4, 8)):
        if len(seeds) == 0:
            raise ParameterError("at least one seed is required for step-loss latents")
        self.model = model
        self.calibrated = calibrated
        self.seeds = list(seeds)
        self.batch = batch
        store = TraceStore()
        per_t: dict[int, list] = {}
        for i, seed in enumerate(self.seeds):
            store.batch_id = i
            states, _ = sample_trajectory(model, seed=seed, batch=batch, trace=store)
            for state in states:
                per_t.setdefault(state.t, []).append(state.z)
        self.latents = {t: np.concatenate(zs, axis=1) for t, zs in per_t.items()}
        table_palette = tuple(sorted(set(int(b) for b in palette) | {16}))
        self.table = ActivationTable.from_traces(store, table_palette)
        self._cache: dict[tuple, float] = {}

    def step_loss_on_latents(self, t: int, bits, z: np.ndarray) -> float:
        """Loss for one step on explicit latents: per-sample mean squared
        output error, averaged over samples."""
        bits = tuple(int(b) for b in bits)
        n = self.model.spec.token_count
        if z.shape[1] % n != 0:
            raise ShapeError(f"latent column count {z.shape[1]} is not a multiple of token count {n}")
        ref = forward(self.model, DenoiseState(z=z, t=t))

        def plug(tt, layer, w, x):
            return w, fake_quant(x, self.table.get(tt, layer, bits[layer]))

        quant = forward(self.calibrated, DenoiseState(z=z, t=t), plugin=plug)
        sq = (ref - quant) ** 2
        num_samples = z.shape[1] // n
        # per-sample means first, then an exactly rounded mean across
        # samples: duplicating the batch leaves the value bit-identical
        per_sample = [float(np.mean(sq[:, k * n : (k + 1) * n])) for k in range(num_samples)]
        return math.fsum(per_sample) / num_samples

    def step_loss(self, t: int, bits) -> float:
        bits = tuple(int(b) for b in bits)
        key = (t, bits)
        if key not in self._cache:
            if t not in self.latents:
                raise ParameterError(f"no reference latents for timestep {t}")
            self._cache[key] = self.step_loss_on_latents(t, bits, self.latents[t])
        return self._cache[key]


def step_loss(model: Model, calibrated: Model, config: CandidateConfig, latents: np.ndarray, table: ActivationTable) -> float:
    """One-shot form of StepLossEvaluator.step_loss_on_latents."""
    evaluator = object.__new__(StepLossEvaluator)
    evaluator.model = model
    evaluator.calibrated = calibrated
    evaluator.table = table
    return StepLossEvaluator.step_loss_on_latents(evaluator, config.t, config.bits, latents)


def generate_candidates(fisher: FisherMap, t: int, cfg: SearchConfig) -> list:
    """Quantile sweep over sensitivity-ranked layers.

    Layers are ranked by their score at timestep t (descending, ties by
    index).  Candidate k upgrades the top round(q_k * L) layers to the
    palette's second bit width and leaves the rest at the base; the final
    quantile q = 1 instead jumps every layer to the top palette entry so
    the sweep always spans all-base to all-top.  Duplicates collapse.
    """
    if not 1 <= t <= fisher.num_timesteps:
        raise ParameterError(f"timestep {t} outside 1..{fisher.num_timesteps}")
    num_layers = fisher.num_layers
    palette = cfg.palette
    base, top = palette[0], palette[-1]
    upgrade = palette[1] if len(palette) > 1 else palette[0]
    order = np.argsort(-fisher.scores[t - 1], kind="stable")

    seen = set()
    out = []
    for k in range(cfg.num_candidates):
        q = 0.0 if cfg.num_candidates == 1 else k / (cfg.num_candidates - 1)
        bits = [base] * num_layers
        if q >= 1.0:
            bits = [top] * num_layers
        else:
            count = int(round(q * num_layers))
            for idx in order[:count]:
                bits[int(idx)] = upgrade
        key = tuple(bits)
        if key not in seen:
            seen.add(key)
            out.append(CandidateConfig(t=t, bits=key))
    return out


def pareto_prune(paths: list, max_paths: int) -> list:
    """Drop dominated paths, then cap survivors by origin distance.

    Path j dominates k when both the bits and loss totals are no larger
    and at least one is strictly smaller; exact (bits, loss) duplicates
    keep only the earliest.  If more than max_paths survive, the
    max_paths with smallest sqrt((B/Bmax)^2 + (E/Emax)^2) are kept,
    normalizing by the survivor maxima.  Result is sorted by bits.
    """
    if len(paths) == 0:
        raise ParameterError("pareto_prune requires at least one path")
    if max_paths < 1:
        raise ParameterError(f"max_paths must be >= 1, got {max_paths}")

    indexed = sorted(range(len(paths)), key=lambda i: (paths[i].bits, paths[i].loss, i))
    survivors = []
    best_loss = np.inf
    for i in indexed:
        p = paths[i]
        if p.loss < best_loss:
            survivors.append(p)
            best_loss = p.loss

    if len(survivors) > max_paths:
        b_max = max(p.bits for p in survivors)
        e_max = max(p.loss for p in survivors)

        def distance(p):
            b_term = p.bits / b_max if b_max > 0.0 else 0.0
            e_term = p.loss / e_max if e_max > 0.0 else 0.0
            return float(np.sqrt(b_term * b_term + e_term * e_term))

        survivors = sorted(survivors, key=lambda p: (distance(p), p.bits, p.loss))[:max_paths]
    return sorted(survivors, key=lambda p: (p.bits, p.loss))


def beam_search(model: Model, calibrated: Model, fisher: FisherMap, cfg: SearchConfig, seeds, evaluator: StepLossEvaluator | None = None) -> list:
    """Beam over timesteps in sampler order (T down to 1).

    Each retained path is extended by every candidate at the current step,
    the cumulative (bits, loss) totals are updated, and the frontier is
    Pareto-pruned back to the beam width.  Returns the final frontier.
    """
    if evaluator is None:
        evaluator = StepLossEvaluator(model, calibrated, seeds, batch=cfg.calib_batch, palette=cfg.palette)
    num_t = fisher.num_timesteps
    frontier = [SearchPath()]
    for t in range(num_t, 0, -1):
        candidates = generate_candidates(fisher, t, cfg)
        expanded = []
        for path in frontier:
            for cand in candidates:
                expanded.append(path.extend(cand, evaluator.step_loss(t, cand.bits)))
        frontier = pareto_prune(expanded, cfg.beam_width)
        if len(frontier) == 0:
            raise ParameterError("internal invariant violation: empty beam frontier")
    return frontier


def path_to_grid(path: SearchPath, num_timesteps: int, num_layers: int) -> np.ndarray:
    """Lay a path's per-step configs into a (T, L) bit grid."""
    if len(path.configs) != num_timesteps:
        raise ParameterError(f"path covers {len(path.configs)} steps, expected {num_timesteps}")
    grid = np.zeros((num_timesteps, num_layers), dtype=np.int64)
    seen = set()
    for cand in path.configs:
        if cand.t in seen:
            raise ParameterError(f"path assigns timestep {cand.t} twice")
        seen.add(cand.t)
        grid[cand.t - 1] = cand.bits
    return grid


def end_to_end_error(model: Model, calibrated: Model, grid: np.ndarray, table: ActivationTable, seeds, batch: int = 1) -> float:
    """Final-latent MSE between full-precision and quantized trajectories.

    Per-sample mean squared error at the final latent, averaged across all
    samples from all seeds.
    """
    plugin = make_schedule_plugin(grid, table)
    n = model.spec.token_count
    per_sample = []
    for seed in seeds:
        _, ref = sample_trajectory(model, seed=seed, batch=batch)
        _, quant = sample_trajectory(calibrated, plugin=plugin, seed=seed, batch=batch)
        sq = (ref - quant) ** 2
        for k in range(sq.shape[1] // n):
            per_sample.append(float(np.mean(sq[:, k * n : (k + 1) * n])))
    return math.fsum(per_sample) / len(per_sample)


def _schedule_from_path(path: SearchPath, model: Model, cfg: SearchConfig, seeds, evaluator: StepLossEvaluator) -> BitSchedule:
    num_t = model.spec.num_timesteps
    num_l = model.spec.num_layers
    grid = path_to_grid(path, num_t, num_l)
    per_step = [evaluator.step_loss(t, tuple(grid[t - 1])) for t in range(1, num_t + 1)]
    return BitSchedule(
        grid=grid,
        avg_bits=float(grid.mean()),
        param_weighted_avg_bits=param_weighted_average(grid, model),
        per_step_loss=per_step,
        search_config=cfg.to_dict(),
        seeds=list(seeds),
        objective=path.loss,
    )


def final_select(frontier: list, cfg: SearchConfig, model: Model, calibrated: Model, seeds, evaluator: StepLossEvaluator) -> BitSchedule:
    """Pick the budget-feasible path with the lowest end-to-end error.

    Every frontier path with average bits within the budget is replayed as
    a full quantized trajectory against the full-precision reference; the
    schedule with the smallest final-latent MSE wins, ties going to fewer
    bits and then to the lexicographically smaller grid.
    """
    if len(frontier) == 0:
        raise ParameterError("final_select requires a nonempty frontier")
    feasible = [p for p in frontier if p.avg_bits <= cfg.bit_target + _BUDGET_TOL]
    if not feasible:
        closest = min(p.avg_bits for p in frontier)
        raise InfeasibleBudgetError(cfg.bit_target, closest)

    scored = []
    for p in feasible:
        grid = path_to_grid(p, model.spec.num_timesteps, model.spec.num_layers)
        err = end_to_end_error(model, calibrated, grid, evaluator.table, seeds, batch=cfg.select_batch)
        scored.append((err, p.avg_bits, grid.tolist(), p))
    scored.sort(key=lambda item: (item[0], item[1], item[2]))
    err, _, _, best = scored[0]
    schedule = _schedule_from_path(best, model, cfg, seeds, evaluator)
    schedule.end_to_end_error = err
    return schedule


def brute_force_optimum(model: Model, calibrated: Model, fisher: FisherMap, cfg: SearchConfig, seeds, evaluator: StepLossEvaluator | None = None) -> BitSchedule:
    """Exhaustive reference: enumerate every candidate sequence.

    Guarded to 10^4 sequences.  Uses the same candidate lists, the same
    step-loss cache, and the same left-fold accumulation order as the beam
    so objective values compare bit-for-bit.
    """
    if evaluator is None:
        evaluator = StepLossEvaluator(model, calibrated, seeds, batch=cfg.calib_batch, palette=cfg.palette)
    num_t = fisher.num_timesteps
    step_candidates = [generate_candidates(fisher, t, cfg) for t in range(num_t, 0, -1)]
    total_sequences = 1
    for cands in step_candidates:
        total_sequences *= len(cands)
    if total_sequences > 10_000:
        raise ParameterError(f"brute force would enumerate {total_sequences} sequences (limit 10000)")

    best = None
    best_key = None
    closest = None
    for seq in itertools.product(*step_candidates):
        path = SearchPath()
        for cand in seq:
            path = path.extend(cand, evaluator.step_loss(cand.t, cand.bits))
        avg = path.avg_bits
        closest = avg if closest is None else min(closest, avg)
        if avg > cfg.bit_target + _BUDGET_TOL:
            continue
        grid_key = [list(c.bits) for c in seq]
        key = (path.loss, avg, grid_key)
        if best_key is None or key < best_key:
            best_key = key
            best = path
    if best is None:
        raise InfeasibleBudgetError(cfg.bit_target, closest if closest is not None else float("nan"))
    return _schedule_from_path(best, model, cfg, seeds, evaluator)
