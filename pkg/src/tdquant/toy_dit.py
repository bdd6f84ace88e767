"""A small deterministic diffusion-transformer denoiser and its sampler.

The denoiser eps(z_t, t) stacks L layers of y = tanh(W_l (x + c_{t,l}) + b_l),
where c_{t,l} is a per-timestep, per-layer input shift standing in for
adaLN-style conditioning. Even-indexed layers additionally mix tokens with a
fixed column-stochastic matrix (the attention proxy). The shifts are drawn
with a magnitude envelope that varies over (t, l), so activation statistics
drift across the trajectory and layers peak at different phases; that drift
is the whole point of the testbed.

Sampling is plain deterministic Euler: z_{t-1} = z_t - (1/T) eps(z_t, t),
from a seeded standard-normal z_T down to t = 1. A layer plugin hook lets
callers reroute every (weights, input) pair through fake quantization
without touching the model.

All math is float64 and bit-reproducible from (spec, seed).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, PluginShapeError, ShapeError
from .numerics import Rng

ATTENTION_PROXY = "attention_proxy"
MLP = "mlp"

# envelope of the conditioning-shift magnitude over (t, l); layers peak at
# staggered phases of the trajectory
SHIFT_BASE = 0.3
SHIFT_AMP = 2.2


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    hidden_dim: int
    num_timesteps: int
    token_count: int
    seed: int

    def __post_init__(self):
        if self.num_layers < 2:
            raise ParameterError(f"num_layers must be >= 2, got {self.num_layers}")
        if self.hidden_dim < 4:
            raise ParameterError(f"hidden_dim must be >= 4, got {self.hidden_dim}")
        if self.num_timesteps < 1:
            raise ParameterError(f"num_timesteps must be >= 1, got {self.num_timesteps}")
        if self.token_count < 1:
            raise ParameterError(f"token_count must be >= 1, got {self.token_count}")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "num_timesteps": self.num_timesteps,
            "token_count": self.token_count,
            "seed": self.seed,
        }


@dataclass
class LayerWeights:
    index: int
    kind: str
    w: np.ndarray
    bias: np.ndarray

    @property
    def name(self) -> str:
        """Stable column label used by CSV artifacts, e.g. ``layer3_mlp``."""
        return f"layer{self.index}_{self.kind}"


@dataclass
class Model:
    spec: ModelSpec
    layers: list[LayerWeights]
    shifts: np.ndarray  # (T, L, d), shifts[t-1, l] is c_{t,l}
    mixing: np.ndarray  # (n, n), column-stochastic token mixer


@dataclass
class DenoiseState:
    z: np.ndarray
    t: int


@dataclass
class ActivationTrace:
    t: int
    layer: int
    x: np.ndarray  # (d, n * batch) layer input
    batch_id: int = 0


class TraceStore:
    """Collects ActivationTrace records from traced forward passes."""

    def __init__(self):
        self._records: list[ActivationTrace] = []
        self.batch_id = 0

    def add(self, trace: ActivationTrace) -> None:
        self._records.append(trace)

    def __len__(self) -> int:
        return len(self._records)

    def records(self, layer: int | None = None) -> list[ActivationTrace]:
        if layer is None:
            return list(self._records)
        return [r for r in self._records if r.layer == layer]

    def cells(self) -> list[tuple[int, int]]:
        return sorted({(r.t, r.layer) for r in self._records})

    def concat(self, t: int, layer: int) -> np.ndarray:
        xs = [r.x for r in self._records if r.t == t and r.layer == layer]
        if not xs:
            raise ParameterError(f"no traces recorded for timestep {t}, layer {layer}")
        return np.concatenate(xs, axis=1)

    def timesteps(self, layer: int) -> set[int]:
        return {r.t for r in self._records if r.layer == layer}


def _shift_gain(t: int, layer: int, spec: ModelSpec) -> float:
    u = (t - 1) / max(spec.num_timesteps - 1, 1)
    phase = layer / spec.num_layers
    return SHIFT_BASE + SHIFT_AMP * math.sin(math.pi * (u + phase)) ** 2


def init_model(spec: ModelSpec) -> Model:
    """Build a model entirely from the seed; same spec gives identical bits."""
    d, L, T, n = spec.hidden_dim, spec.num_layers, spec.num_timesteps, spec.token_count
    rng = Rng(spec.seed)
    inv_sqrt_d = 1.0 / math.sqrt(d)
    layers = []
    for l in range(L):
        w = rng.normal((d, d)) * inv_sqrt_d
        bias = rng.normal((d,)) * inv_sqrt_d
        kind = ATTENTION_PROXY if l % 2 == 0 else MLP
        layers.append(LayerWeights(index=l, kind=kind, w=w, bias=bias))
    shifts = np.zeros((T, L, d))
    for t in range(1, T + 1):
        for l in range(L):
            shifts[t - 1, l] = _shift_gain(t, l, spec) * rng.normal((d,))
    logits = rng.normal((n, n))
    e = np.exp(logits - np.max(logits, axis=0, keepdims=True))
    mixing = e / np.sum(e, axis=0, keepdims=True)
    return Model(spec=spec, layers=layers, shifts=shifts, mixing=mixing)


def model_fingerprint(model: Model) -> str:
    """Stable content hash of spec and all parameter arrays."""
    h = hashlib.sha256()
    h.update(json.dumps(model.spec.to_dict(), sort_keys=True).encode())
    for layer in model.layers:
        h.update(layer.kind.encode())
        h.update(layer.w.tobytes())
        h.update(layer.bias.tobytes())
    h.update(model.shifts.tobytes())
    h.update(model.mixing.tobytes())
    return h.hexdigest()


def _mix_tokens(y: np.ndarray, mixing: np.ndarray, n: int) -> np.ndarray:
    d, cols = y.shape
    batch = cols // n
    return (y.reshape(d, batch, n) @ mixing).reshape(d, cols)


def _check_state(model: Model, state: DenoiseState) -> np.ndarray:
    z = np.asarray(state.z, dtype=np.float64)
    d, n = model.spec.hidden_dim, model.spec.token_count
    if z.ndim != 2 or z.shape[0] != d or z.shape[1] % n != 0 or z.shape[1] == 0:
        raise ShapeError(
            f"latent shape {z.shape} incompatible with hidden_dim={d}, token_count={n}"
        )
    if not 1 <= state.t <= model.spec.num_timesteps:
        raise ParameterError(
            f"timestep {state.t} outside [1, {model.spec.num_timesteps}]"
        )
    return z


def forward(model: Model, state: DenoiseState, trace: TraceStore | None = None, plugin=None) -> np.ndarray:
    """Predicted noise for ``state``; optionally records layer inputs.

    ``plugin(t, layer_index, w, x) -> (w, x)`` reroutes each layer's weights
    and input, which is how fake-quantized execution is implemented. The
    trace sink receives the pre-plugin inputs (full-precision statistics).
    """
    z = _check_state(model, state)
    n = model.spec.token_count
    h = z
    for l, layer in enumerate(model.layers):
        x = h + model.shifts[state.t - 1, l][:, None]
        if trace is not None:
            trace.add(ActivationTrace(t=state.t, layer=l, x=x.copy(), batch_id=trace.batch_id))
        if plugin is not None:
            w_used, x_used = plugin(state.t, l, layer.w, x)
            w_used = np.asarray(w_used, dtype=np.float64)
            x_used = np.asarray(x_used, dtype=np.float64)
            if w_used.shape != layer.w.shape:
                raise PluginShapeError(state.t, l, f"weights {w_used.shape} != {layer.w.shape}")
            if x_used.shape != x.shape:
                raise PluginShapeError(state.t, l, f"input {x_used.shape} != {x.shape}")
        else:
            w_used, x_used = layer.w, x
        y = np.tanh(w_used @ x_used + layer.bias[:, None])
        h = _mix_tokens(y, model.mixing, n) if layer.kind == ATTENTION_PROXY else y
    return h


def backward_weight_grads(model: Model, state: DenoiseState, target) -> list[np.ndarray]:
    """Exact gradients of sum((forward - target)^2) w.r.t. every W_l."""
    z = _check_state(model, state)
    tgt = np.asarray(target, dtype=np.float64)
    n = model.spec.token_count
    xs, ys = [], []
    h = z
    for l, layer in enumerate(model.layers):
        x = h + model.shifts[state.t - 1, l][:, None]
        y = np.tanh(layer.w @ x + layer.bias[:, None])
        xs.append(x)
        ys.append(y)
        h = _mix_tokens(y, model.mixing, n) if layer.kind == ATTENTION_PROXY else y
    if tgt.shape != h.shape:
        raise ShapeError(f"target shape {tgt.shape} != output shape {h.shape}")
    g = 2.0 * (h - tgt)
    grads: list[np.ndarray | None] = [None] * len(model.layers)
    for l in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[l]
        if layer.kind == ATTENTION_PROXY:
            g = _mix_tokens(g, model.mixing.T, n)
        ga = g * (1.0 - ys[l] ** 2)
        grads[l] = ga @ xs[l].T
        g = layer.w.T @ ga
    return grads  # type: ignore[return-value]


def sample_trajectory(
    model: Model,
    plugin=None,
    seed: int = 0,
    batch: int = 1,
    trace: TraceStore | None = None,
) -> tuple[list[DenoiseState], np.ndarray]:
    """Euler-denoise a seeded z_T down to t=1; returns states and final latent."""
    if batch < 1:
        raise ParameterError(f"batch must be >= 1, got {batch}")
    spec = model.spec
    rng = Rng(seed)
    z = rng.normal((spec.hidden_dim, spec.token_count * batch))
    states = []
    for t in range(spec.num_timesteps, 0, -1):
        state = DenoiseState(z=z, t=t)
        states.append(state)
        eps = forward(model, state, trace=trace, plugin=plugin)
        z = z - eps / spec.num_timesteps
    return states, z


def save_model(model: Model, path) -> None:
    doc = {
        "spec": model.spec.to_dict(),
        "layers": [
            {"index": l.index, "kind": l.kind, "w": l.w.tolist(), "bias": l.bias.tolist()}
            for l in model.layers
        ],
        "shifts": model.shifts.tolist(),
        "mixing": model.mixing.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> Model:
    with open(path) as fh:
        doc = json.load(fh)
    spec = ModelSpec(**doc["spec"])
    d = spec.hidden_dim
    layers = []
    for ldoc in doc["layers"]:
        w = np.asarray(ldoc["w"], dtype=np.float64)
        bias = np.asarray(ldoc["bias"], dtype=np.float64)
        if w.shape != (d, d) or bias.shape != (d,):
            raise ShapeError(f"layer {ldoc['index']} arrays have wrong shape {w.shape}, {bias.shape}")
        layers.append(LayerWeights(index=int(ldoc["index"]), kind=str(ldoc["kind"]), w=w, bias=bias))
    shifts = np.asarray(doc["shifts"], dtype=np.float64)
    mixing = np.asarray(doc["mixing"], dtype=np.float64)
    if shifts.shape != (spec.num_timesteps, spec.num_layers, d):
        raise ShapeError(f"shifts have wrong shape {shifts.shape}")
    if mixing.shape != (spec.token_count, spec.token_count):
        raise ShapeError(f"mixing matrix has wrong shape {mixing.shape}")
    return Model(spec=spec, layers=layers, shifts=shifts, mixing=mixing)
