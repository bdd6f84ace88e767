"""Uniform affine fake quantization with min-max calibration.

Quantize-dequantize runs entirely in float64: values are mapped onto an
integer grid, clamped, and mapped back, which simulates low-bit execution
while keeping the arithmetic exact enough to reason about. 16-bit specs are
an exact pass-through so reference runs can share the same code path.

Conventions follow common PTQ practice: weights use symmetric per-channel
grids (one scale per output row), activations use asymmetric per-tensor
grids recalibrated per timestep from traced calibration inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

ALLOWED_BITS = (3, 4, 8, 16)
SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class QuantSpec:
    """What kind of grid to build: bit-width, symmetry, and granularity."""

    bits: int
    symmetric: bool = True
    granularity: str = "per_tensor"
    axis: int = 0

    def __post_init__(self):
        if self.bits not in ALLOWED_BITS:
            raise ParameterError(f"bits must be one of {ALLOWED_BITS}, got {self.bits}")
        if self.granularity not in ("per_tensor", "per_channel"):
            raise ParameterError(f"unknown granularity {self.granularity!r}")
        if self.axis not in (0, 1):
            raise ParameterError(f"per-channel axis must be 0 or 1, got {self.axis}")


@dataclass(eq=False)
class QuantParams:
    """A concrete grid: scales, zero points, and integer clamp range.

    ``scale`` and ``zero_point`` broadcast against the quantized array:
    shape (1, 1) for per-tensor grids, (d, 1) or (1, d) for per-channel.
    """

    bits: int
    scale: np.ndarray
    zero_point: np.ndarray
    qmin: int
    qmax: int

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.zero_point = np.asarray(self.zero_point, dtype=np.float64)
        if not np.all(self.scale > 0.0):
            raise ParameterError("every scale must be positive")
        if self.qmax - self.qmin != 2**self.bits - 1:
            raise ParameterError(
                f"qmax - qmin must equal 2^bits - 1, got {self.qmax - self.qmin} for {self.bits} bits"
            )
        if np.any(self.zero_point < self.qmin) or np.any(self.zero_point > self.qmax):
            raise ParameterError("zero_point must lie within [qmin, qmax]")

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "scale": self.scale.tolist(),
            "zero_point": self.zero_point.tolist(),
            "qmin": self.qmin,
            "qmax": self.qmax,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "QuantParams":
        return cls(
            bits=int(doc["bits"]),
            scale=np.asarray(doc["scale"], dtype=np.float64),
            zero_point=np.asarray(doc["zero_point"], dtype=np.float64),
            qmin=int(doc["qmin"]),
            qmax=int(doc["qmax"]),
        )


def _reduce_minmax(x: np.ndarray, spec: QuantSpec):
    if spec.granularity == "per_tensor":
        return np.min(x, keepdims=True).reshape(1, 1), np.max(x, keepdims=True).reshape(1, 1)
    other = 1 - spec.axis
    lo = np.min(x, axis=other, keepdims=True)
    hi = np.max(x, axis=other, keepdims=True)
    return lo, hi


def calibrate_minmax(x, spec: QuantSpec) -> QuantParams:
    """Fit grid parameters to the observed range of ``x``.

    Symmetric grids use scale = max|x| / qmax with zero_point 0. Asymmetric
    grids use scale = (max - min) / (qmax - qmin) over a range widened to
    include 0, so that real zero always lands exactly on a grid point.
    Degenerate (all-equal) inputs get a 1e-12 scale floor instead of an error.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        raise ParameterError("cannot calibrate an empty array")
    if not np.all(np.isfinite(a)):
        raise ParameterError("cannot calibrate non-finite values")
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"calibration input must be 1-D or 2-D, got ndim={a.ndim}")

    if spec.bits == 16:
        qmin, qmax = -(2**15), 2**15 - 1
        return QuantParams(16, np.ones((1, 1)), np.zeros((1, 1)), qmin, qmax)

    lo, hi = _reduce_minmax(a, spec)
    if spec.symmetric:
        qmax = 2 ** (spec.bits - 1) - 1
        qmin = -(2 ** (spec.bits - 1))
        scale = np.maximum(np.abs(lo), np.abs(hi)) / qmax
        scale = np.maximum(scale, SCALE_FLOOR)
        zp = np.zeros_like(scale)
    else:
        qmin, qmax = 0, 2**spec.bits - 1
        lo = np.minimum(lo, 0.0)
        hi = np.maximum(hi, 0.0)
        scale = np.maximum((hi - lo) / (qmax - qmin), SCALE_FLOOR)
        zp = np.clip(np.round(-lo / scale), qmin, qmax)
    return QuantParams(spec.bits, scale, zp, qmin, qmax)


def fake_quant(x, params: QuantParams) -> np.ndarray:
    """Quantize-dequantize ``x`` on the grid; 16-bit params pass through.

    Rounding is round-half-to-even (numpy's default), chosen for platform
    determinism.
    """
    a = np.asarray(x, dtype=np.float64)
    if params.bits == 16:
        return a
    q = np.clip(np.round(a / params.scale + params.zero_point), params.qmin, params.qmax)
    return (q - params.zero_point) * params.scale


def quantize_layer_weights(w, spec: QuantSpec) -> tuple[np.ndarray, QuantParams]:
    """Round-to-nearest weight quantization (the min-max baseline).

    ``w`` is the weight matrix with output channels as rows; per-channel
    granularity therefore means one (scale, zero_point) per row.
    """
    a = np.asarray(w, dtype=np.float64)
    params = calibrate_minmax(a, spec)
    if spec.bits == 16:
        return a.copy(), params
    return fake_quant(a, params), params


class ActivationTable:
    """Per-(timestep, layer, bits) activation grids from calibration traces.

    Built once from a trace store; lookups during schedule evaluation are
    plain dict reads, so quantized forwards stay cheap and deterministic.
    """

    def __init__(self, params: dict[tuple[int, int, int], QuantParams]):
        self._params = params

    @classmethod
    def from_traces(cls, store, palette) -> "ActivationTable":
        bits = sorted(set(int(b) for b in palette))
        for b in bits:
            if b not in ALLOWED_BITS:
                raise ParameterError(f"palette entry {b} not in {ALLOWED_BITS}")
        params: dict[tuple[int, int, int], QuantParams] = {}
        for t, layer in store.cells():
            x = store.concat(t, layer)
            for b in bits:
                spec = QuantSpec(bits=b, symmetric=False, granularity="per_tensor")
                params[(t, layer, b)] = calibrate_minmax(x, spec)
        return cls(params)

    def get(self, t: int, layer: int, bits: int) -> QuantParams:
        key = (int(t), int(layer), int(bits))
        if key not in self._params:
            raise ParameterError(f"no activation params for timestep {key[0]}, layer {key[1]}, bits {key[2]}")
        return self._params[key]

    def to_dict(self) -> dict:
        return {f"{t},{l},{b}": p.to_dict() for (t, l, b), p in sorted(self._params.items())}

    @classmethod
    def from_dict(cls, doc: dict) -> "ActivationTable":
        params = {}
        for key, pdoc in doc.items():
            t, l, b = (int(v) for v in key.split(","))
            params[(t, l, b)] = QuantParams.from_dict(pdoc)
        return cls(params)


def make_schedule_plugin(grid, table: ActivationTable):
    """Layer hook quantizing activations per a (T, L) bit grid.

    Weights pass through untouched; weight quantization is baked into the
    calibrated model the hook runs against.
    """
    g = np.asarray(grid, dtype=np.int64)

    def plugin(t, layer, w, x):
        return w, fake_quant(x, table.get(t, layer, int(g[t - 1, layer])))

    return plugin
