"""Per-layer, per-timestep sensitivity profiling for the toy denoiser.

Sensitivity of a weight matrix at a given denoising step is scored by the
mean squared gradient of the step reconstruction loss, averaged over Monte
Carlo samples of the sampler's own latent distribution at that step.  The
scores feed two consumers: a normalized heatmap for inspection, and
per-layer temporal importance weights obtained with a temperature softmax
over timesteps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .numerics import Rng, softmax_with_temperature
from .toy_dit import DenoiseState, Model, backward_weight_grads, forward, model_fingerprint, sample_trajectory

# Stream key for the synthetic regression targets drawn per calibration
# seed.  Keeping it fixed (and public) makes the sampling protocol
# reproducible from outside: targets for seed s at steps t = T..1 are
# consecutive normal draws from Rng(s).split(TARGET_STREAM_KEY).
TARGET_STREAM_KEY = 0x7A67

_COLUMN_SUM_TOL = 1e-10


@dataclass(frozen=True)
class FisherMap:
    """T x L grid of non-negative sensitivity scores.

    scores[t-1, l] is the mean squared gradient entry of layer l's weight
    under the step loss at timestep t.  samples_per_cell records how many
    latent samples each cell was averaged over; fingerprint ties the map
    to the model it was measured on.
    """

    scores: np.ndarray
    samples_per_cell: int
    fingerprint: str = ""

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 2 or scores.size == 0:
            raise ParameterError(f"sensitivity grid must be a nonempty 2-d array, got shape {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise ParameterError("sensitivity grid contains non-finite entries")
        if np.any(scores < 0.0):
            raise ParameterError("sensitivity scores must be non-negative")
        if self.samples_per_cell < 1:
            raise ParameterError(f"samples_per_cell must be >= 1, got {self.samples_per_cell}")
        object.__setattr__(self, "scores", scores)

    @property
    def num_timesteps(self) -> int:
        return self.scores.shape[0]

    @property
    def num_layers(self) -> int:
        return self.scores.shape[1]

    def to_dict(self) -> dict:
        return {
            "scores": self.scores.tolist(),
            "samples_per_cell": self.samples_per_cell,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "FisherMap":
        return cls(
            scores=np.array(payload["scores"], dtype=np.float64),
            samples_per_cell=int(payload["samples_per_cell"]),
            fingerprint=str(payload.get("fingerprint", "")),
        )


@dataclass(frozen=True)
class TemporalWeights:
    """Per-layer importance weights over timesteps.

    alpha has shape (T, L); each layer's column sums to 1.
    """

    alpha: np.ndarray
    tau: float = 1.0

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if alpha.ndim != 2 or alpha.size == 0:
            raise ParameterError(f"alpha must be a nonempty 2-d array, got shape {alpha.shape}")
        if not (self.tau > 0.0):
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        if np.any(alpha <= 0.0) or np.any(alpha > 1.0):
            raise ParameterError("temporal weights must lie in (0, 1]")
        sums = alpha.sum(axis=0)
        if np.max(np.abs(sums - 1.0)) > _COLUMN_SUM_TOL:
            raise ParameterError(f"each layer's weights must sum to 1, worst deviation {np.max(np.abs(sums - 1.0)):.3e}")
        object.__setattr__(self, "alpha", alpha)

    @property
    def num_timesteps(self) -> int:
        return self.alpha.shape[0]

    @property
    def num_layers(self) -> int:
        return self.alpha.shape[1]


def _sample_columns(z: np.ndarray, token_count: int, batch: int):
    """Split a batched latent into per-sample column blocks."""
    for k in range(batch):
        yield z[:, k * token_count : (k + 1) * token_count]


def estimate_fisher(model: Model, calib_seeds: list, batch: int = 1, target: str = "noise") -> FisherMap:
    """Monte Carlo sensitivity estimate over sampler-state latents.

    For every calibration seed a full-precision trajectory supplies the
    latents at each timestep; the step loss is the squared residual against
    a fresh standard-normal target (``target="noise"``, the default) or the
    model's own output (``target="self"``, which makes every gradient zero
    and is only useful as a sanity probe).  Each grid cell accumulates the
    mean squared gradient entry per sample, then averages across samples.
    """
    if len(calib_seeds) == 0:
        raise ParameterError("at least one calibration seed is required")
    if batch < 1:
        raise ParameterError(f"batch must be >= 1, got {batch}")
    if target not in ("noise", "self"):
        raise ParameterError(f"unknown target mode {target!r}, expected 'noise' or 'self'")

    spec = model.spec
    acc = np.zeros((spec.num_timesteps, spec.num_layers), dtype=np.float64)
    for seed in calib_seeds:
        states, _ = sample_trajectory(model, seed=seed, batch=batch)
        target_rng = Rng(seed).split(TARGET_STREAM_KEY)
        for state in states:
            if target == "noise":
                tgt_full = target_rng.normal(state.z.shape)
            else:
                tgt_full = forward(model, state)
            for z_cols, tgt_cols in zip(
                _sample_columns(state.z, spec.token_count, batch),
                _sample_columns(tgt_full, spec.token_count, batch),
            ):
                grads = backward_weight_grads(model, DenoiseState(z=z_cols, t=state.t), tgt_cols)
                for l, g in enumerate(grads):
                    acc[state.t - 1, l] += float(np.mean(g * g))

    samples = len(calib_seeds) * batch
    return FisherMap(scores=acc / samples, samples_per_cell=samples, fingerprint=model_fingerprint(model))


def normalize_heatmap(fisher_map: FisherMap) -> np.ndarray:
    """Min-max normalize each layer column across timesteps into [0, 1].

    Constant columns (including any single-timestep grid) map to zeros.
    """
    scores = fisher_map.scores
    lo = scores.min(axis=0, keepdims=True)
    hi = scores.max(axis=0, keepdims=True)
    span = hi - lo
    out = np.zeros_like(scores)
    np.divide(scores - lo, span, out=out, where=span > 0.0)
    return out


def temporal_weights(fisher_map: FisherMap, tau: float = 1.0) -> TemporalWeights:
    """Per-layer softmax over timesteps with temperature tau."""
    scores = fisher_map.scores
    alpha = np.empty_like(scores)
    for l in range(scores.shape[1]):
        alpha[:, l] = softmax_with_temperature(scores[:, l], tau=tau)
    return TemporalWeights(alpha=alpha, tau=tau)


def uniform_weights(num_timesteps: int, num_layers: int) -> TemporalWeights:
    """Flat 1/T weights for every layer (the no-information baseline)."""
    if num_timesteps < 1 or num_layers < 1:
        raise ParameterError("grid dimensions must be positive")
    alpha = np.full((num_timesteps, num_layers), 1.0 / num_timesteps)
    return TemporalWeights(alpha=alpha, tau=math.inf)


def write_heatmap_csv(path, model: Model, fisher_map: FisherMap) -> None:
    """Write the normalized heatmap: header of layer names, one row per timestep."""
    grid = normalize_heatmap(fisher_map)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([layer.name for layer in model.layers])
        for row in grid:
            writer.writerow([f"{v:.17g}" for v in row])
