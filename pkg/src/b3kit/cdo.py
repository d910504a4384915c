"""Gated, bounded dispatch of the bridge back into each task state."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError
from .field import FieldTensor, RngStream, ScalarField, check_same_shape, check_spatial

NUM_BINS = 20


def sigmoid(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


@dataclass(frozen=True, eq=False)
class CdoParams:
    """Gate convolution ``weights`` of shape ``(k, k, 2C + 1)``, a bias and the step logit."""

    weights: np.ndarray
    bias: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ParameterError(f"gate weights must be (k, k, 2C+1) with odd k, got {w.shape}")
        if (w.shape[2] - 1) % 2 or w.shape[2] < 3:
            raise ParameterError(f"gate input width must be 2C+1, got {w.shape[2]}")
        if not (np.all(np.isfinite(w)) and np.isfinite(self.bias) and np.isfinite(self.theta)):
            raise ParameterError("gate parameters must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "theta", float(self.theta))

    @property
    def kernel(self):
        return self.weights.shape[0]

    @property
    def channels(self):
        return (self.weights.shape[2] - 1) // 2

    @classmethod
    def zeros(cls, channels, kernel=1, bias=0.0, theta=0.0):
        return cls(np.zeros((kernel, kernel, 2 * channels + 1)), bias, theta)

    @classmethod
    def seeded(cls, channels, kernel=1, seed=0, theta=0.0, std=0.1):
        gen = RngStream(seed, 0xCD0).generator()
        return cls(gen.normal(0.0, std, size=(kernel, kernel, 2 * channels + 1)), 0.0, theta)


def dispatch_gate(task_state, bridge, precision, params):
    """``sigmoid(conv([X, B, alpha]))`` with replicate padding."""
    check_same_shape(task_state, bridge)
    check_spatial(task_state.spatial_shape, precision)
    if task_state.channels != params.channels:
        raise ShapeError(f"gate expects {params.channels} channels, got {task_state.channels}")
    stacked = np.concatenate([task_state.data, bridge.data, precision.data[..., None]], axis=2)
    k = params.kernel
    r = k // 2
    h, w = task_state.spatial_shape
    padded = np.pad(stacked, ((r, r), (r, r), (0, 0)), mode="edge") if r else stacked
    pre = np.full((h, w), params.bias)
    for dy in range(k):
        for dx in range(k):
            pre += padded[dy : dy + h, dx : dx + w] @ params.weights[dy, dx]
    return ScalarField(sigmoid(pre))


def effective_coefficient(gate, theta):
    return ScalarField(sigmoid(theta) * gate.data)


def cdo_update(task_state, bridge, beta):
    """``X + beta (B - X)`` per location, with ``beta`` in the open unit interval."""
    check_same_shape(task_state, bridge)
    check_spatial(task_state.spatial_shape, beta)
    b = beta.data
    if not (np.all(b > 0) and np.all(b < 1)):
        raise ParameterError("dispatch coefficients must lie strictly inside (0, 1)")
    x = task_state.data
    return FieldTensor(x + b[..., None] * (bridge.data - x))


def contraction_ratio(before, after, bridge):
    check_same_shape(before, after, bridge)
    den = np.linalg.norm(before.data - bridge.data)
    if den == 0:
        raise DegenerateInputError("before equals bridge; contraction ratio undefined")
    return float(np.linalg.norm(after.data - bridge.data) / den)


def local_contraction_ratios(before, after, bridge):
    """Per-location ratios; locations with zero initial deviation report 0."""
    num = np.linalg.norm(after.data - bridge.data, axis=2)
    den = np.linalg.norm(before.data - bridge.data, axis=2)
    return ScalarField(np.divide(num, den, out=np.zeros_like(num), where=den > 0))


def cdo_param_count(params):
    return params.weights.size + 2


@dataclass(frozen=True)
class ContractionReport:
    per_batch_ratio: tuple
    mean: float
    max: float
    histogram: tuple

    @classmethod
    def from_ratios(cls, ratios):
        r = np.asarray(ratios, dtype=np.float64)
        if r.size and (np.any(r < 0) or np.any(r > 1)):
            raise ParameterError("contraction ratios must lie in [0, 1]")
        hist, _ = np.histogram(r, bins=NUM_BINS, range=(0.0, 1.0))
        return cls(
            per_batch_ratio=tuple(float(v) for v in r),
            mean=float(r.mean()) if r.size else 0.0,
            max=float(r.max()) if r.size else 0.0,
            histogram=tuple(int(v) for v in hist),
        )

    def to_csv(self, path=None):
        lines = ["batch,ratio"] + [f"{i},{v!r}" for i, v in enumerate(self.per_batch_ratio)]
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, newline="\n")
        return text

    def summary(self):
        return {"mean": self.mean, "max": self.max, "bins": list(self.histogram)}

    def to_json(self, path=None):
        text = json.dumps(self.summary(), indent=2) + "\n"
        if path is not None:
            Path(path).write_text(text, newline="\n")
        return text
