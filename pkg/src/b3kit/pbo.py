"""Posterior bridge fusion of task evidence around a shared reference.

The bridge is the minimizer of the precision-weighted quadratic

    L(B) = w0 * ||B - G||^2 + sum_t alpha_t * ||B - E_t||^2

whose closed form is the per-location weighted mean of the reference and
the evidences.  Per-location precisions are broadcast over channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArityError, ParameterError, ShapeError
from .field import FieldTensor, RngStream, check_same_shape, check_spatial


@dataclass(frozen=True)
class PboConfig:
    w0: float = 1.0
    eta_b: float = 0.5
    correction_enabled: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.w0) and self.w0 > 0):
            raise ParameterError(f"w0 must be > 0, got {self.w0}")
        if not 0 < self.eta_b < 1:
            raise ParameterError(f"eta_b must lie in (0, 1), got {self.eta_b}")


@dataclass(frozen=True, eq=False)
class ExtractorParams:
    """Evidence extractor settings.

    In ``attention`` mode the four projections are ``C x C`` matrices applied
    to row-vector tokens: the reference supplies queries, the task state
    supplies keys and values.
    """

    mode: str = "identity"
    query: np.ndarray | None = None
    key: np.ndarray | None = None
    value: np.ndarray | None = None
    output: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("identity", "attention"):
            raise ParameterError(f"unknown extractor mode {self.mode!r}")
        if self.mode == "attention":
            mats = [self.query, self.key, self.value, self.output]
            if any(m is None for m in mats):
                raise ParameterError("attention mode needs query/key/value/output projections")
            mats = [np.array(m, dtype=np.float64) for m in mats]
            c = mats[0].shape[0]
            for m in mats:
                if m.shape != (c, c):
                    raise ParameterError(f"projection must be square {c}x{c}, got {m.shape}")
                if not np.all(np.isfinite(m)):
                    raise ParameterError("projection matrices must be finite")
                m.flags.writeable = False
            for name, m in zip(("query", "key", "value", "output"), mats):
                object.__setattr__(self, name, m)

    @property
    def channels(self):
        return None if self.query is None else self.query.shape[0]

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def attention_identity(cls, channels):
        eye = np.eye(channels)
        return cls("attention", eye, eye, eye, eye)

    @classmethod
    def seeded_attention(cls, channels, seed):
        gen = RngStream(seed, 0xE7).generator()
        mats = gen.normal(0.0, 1.0 / np.sqrt(channels), size=(4, channels, channels))
        return cls("attention", *mats)


def attention_weights(task_state, reference, params):
    """Row-stochastic attention matrix, shape ``(H*W, H*W)``."""
    c = reference.channels
    q = reference.data.reshape(-1, c) @ params.query
    k = task_state.data.reshape(-1, c) @ params.key
    logits = q @ k.T / np.sqrt(c)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def extract_evidence(task_state, reference, params):
    check_spatial(task_state.spatial_shape, reference)
    if params.mode == "identity":
        return task_state
    c = task_state.channels
    if reference.channels != c or params.channels != c:
        raise ShapeError(f"attention extractor expects {params.channels} channels, got {c}")
    attn = attention_weights(task_state, reference, params)
    v = task_state.data.reshape(-1, c) @ params.value
    out = (attn @ v) @ params.output
    return FieldTensor(out.reshape(task_state.shape))


def _validate_inputs(reference, evidences, precisions, config):
    if len(evidences) == 0:
        raise ArityError("at least one evidence field is required")
    if len(evidences) != len(precisions):
        raise ArityError(f"{len(evidences)} evidences but {len(precisions)} precision fields")
    if not config.w0 > 0:
        raise ParameterError(f"w0 must be > 0, got {config.w0}")
    check_same_shape(reference, *evidences)
    check_spatial(reference.spatial_shape, *precisions)
    for p in precisions:
        if not np.all(p.data > 0):
            raise ParameterError("precision values must be strictly positive")


def _ordered_sum(stack):
    # Sorting along the task axis makes the reduction independent of task
    # order, so permuted inputs give bit-identical results.
    return np.sort(stack, axis=0).sum(axis=0)


def posterior_bridge(reference, evidences, precisions, config):
    """Closed-form minimizer ``(w0 G + sum alpha_t E_t) / (w0 + sum alpha_t)``."""
    _validate_inputs(reference, evidences, precisions, config)
    alphas = np.stack([p.data for p in precisions])[..., None]  # (T, H, W, 1)
    evid = np.stack([e.data for e in evidences])  # (T, H, W, C)
    num = config.w0 * reference.data + _ordered_sum(alphas * evid)
    den = config.w0 + _ordered_sum(alphas)
    return FieldTensor(num / den)


def nlp_oracle(candidate, reference, evidences, precisions, config):
    """Negative log-posterior of ``candidate`` (constants and 1/2 dropped)."""
    _validate_inputs(reference, evidences, precisions, config)
    check_same_shape(candidate, reference)
    b = candidate.data
    total = config.w0 * np.sum((b - reference.data) ** 2)
    for e, p in zip(evidences, precisions):
        total += np.sum(p.data[..., None] * (b - e.data) ** 2)
    return float(total)


def nlp_gradient(candidate, reference, evidences, precisions, config):
    """Gradient of :func:`nlp_oracle` with respect to the candidate."""
    b = candidate.data
    grad = 2.0 * config.w0 * (b - reference.data)
    for e, p in zip(evidences, precisions):
        grad = grad + 2.0 * p.data[..., None] * (b - e.data)
    return grad


def posterior_correction(reference, bridge, config):
    """Pull the bridge back toward the reference: ``G + eta_b (B - G)``."""
    check_same_shape(reference, bridge)
    if not 0 < config.eta_b < 1:
        raise ParameterError(f"eta_b must lie in (0, 1), got {config.eta_b}")
    if not config.correction_enabled:
        return bridge
    g, b = reference.data, bridge.data
    return FieldTensor((1.0 - config.eta_b) * g + config.eta_b * b)


def pbo_param_count(params=None, config=None):
    """Trainable parameters of the fusion + correction path, plus the extractor's.

    Returns ``(fusion, extractor)``; the fusion path is always 0.
    """
    extractor = 0
    if params is not None and params.mode == "attention":
        extractor = 4 * params.channels**2
    return 0, extractor
