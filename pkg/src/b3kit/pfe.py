"""Fuzzy-rule precision field estimation.

Each location is described by a 2-vector of features: the cosine
similarity between task evidence and the shared reference, and the local
total variation of the evidence.  Gaussian rule memberships over that
feature plane blend per-rule linear log-precision predictors, and a
softplus maps the blended value to a strictly positive precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .errors import ParameterError, ShapeError
from .field import PrecisionField, ScalarField, check_same_shape

DEFAULT_EPSILON = 1e-6
PARAM_KEYS = ("centers", "scales", "a_sim", "a_tv", "bias")


def softplus(v):
    """``ln(1 + exp(v))`` without overflow."""
    v = np.asarray(v, dtype=np.float64)
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


@dataclass(frozen=True, eq=False)
class PfeParams:
    centers: np.ndarray  # (R, 2): (sim, tv) rule centers
    scales: np.ndarray  # (R, 2), strictly positive
    a_sim: np.ndarray  # (R,)
    a_tv: np.ndarray  # (R,)
    bias: np.ndarray  # (R,)
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        centers = np.array(self.centers, dtype=np.float64).reshape(-1, 2)
        r = centers.shape[0]
        if r < 1:
            raise ParameterError("at least one rule is required")
        scales = np.array(self.scales, dtype=np.float64).reshape(-1, 2)
        vecs = [np.array(getattr(self, k), dtype=np.float64).reshape(-1) for k in ("a_sim", "a_tv", "bias")]
        if scales.shape[0] != r or any(v.shape[0] != r for v in vecs):
            raise ParameterError("rule arrays disagree on the rule count")
        if not np.all(scales > 0):
            raise ParameterError("rule scales must be strictly positive")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        for name, arr in zip(PARAM_KEYS, [centers, scales, *vecs]):
            if not np.all(np.isfinite(arr)):
                raise ParameterError(f"non-finite values in {name}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def num_rules(self):
        return self.centers.shape[0]

    @property
    def num_parameters(self):
        return 7 * self.num_rules

    def to_vector(self):
        return np.concatenate([getattr(self, k).reshape(-1) for k in PARAM_KEYS])

    @classmethod
    def from_vector(cls, vector, num_rules, epsilon=DEFAULT_EPSILON):
        r = num_rules
        v = np.asarray(vector, dtype=np.float64)
        return cls(
            centers=v[: 2 * r].reshape(r, 2),
            scales=v[2 * r : 4 * r].reshape(r, 2),
            a_sim=v[4 * r : 5 * r],
            a_tv=v[5 * r : 6 * r],
            bias=v[6 * r : 7 * r],
            epsilon=epsilon,
        )

    def to_dict(self):
        rules = [
            {
                "center": [float(v) for v in self.centers[i]],
                "scale": [float(v) for v in self.scales[i]],
                "a_sim": float(self.a_sim[i]),
                "a_tv": float(self.a_tv[i]),
                "bias": float(self.bias[i]),
            }
            for i in range(self.num_rules)
        ]
        return {"rules": rules, "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, doc):
        try:
            rules = doc["rules"]
            return cls(
                centers=[r["center"] for r in rules],
                scales=[r["scale"] for r in rules],
                a_sim=[r["a_sim"] for r in rules],
                a_tv=[r["a_tv"] for r in rules],
                bias=[r["bias"] for r in rules],
                epsilon=doc.get("epsilon", DEFAULT_EPSILON),
            )
        except (KeyError, TypeError) as exc:
            raise ParameterError(f"malformed PFE parameter document: {exc}") from exc


def dump_params(params, path):
    Path(path).write_text(yaml.safe_dump(params.to_dict(), sort_keys=False), newline="\n")


def load_params(path):
    return PfeParams.from_dict(yaml.safe_load(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class PfeFeatures:
    sim: ScalarField
    tv: ScalarField

    def __post_init__(self):
        if self.sim.shape != self.tv.shape:
            raise ShapeError(f"feature shape mismatch {self.sim.shape} vs {self.tv.shape}")
        object.__setattr__(self, "sim", ScalarField(np.clip(self.sim.data, -1.0, 1.0)))
        object.__setattr__(self, "tv", ScalarField(np.maximum(self.tv.data, 0.0)))

    @classmethod
    def stack(cls, features):
        """Concatenate several feature maps row-wise (all computations are per-pixel)."""
        sim = np.concatenate([f.sim.data.reshape(1, -1) for f in features], axis=1)
        tv = np.concatenate([f.tv.data.reshape(1, -1) for f in features], axis=1)
        return cls(ScalarField(sim), ScalarField(tv))


def similarity_map(evidence, reference):
    """Per-location cosine similarity over channels; 0 where either vector is zero."""
    check_same_shape(evidence, reference)
    e, g = evidence.data, reference.data
    dot = np.einsum("ijc,ijc->ij", e, g)
    norms = np.linalg.norm(e, axis=2) * np.linalg.norm(g, axis=2)
    sim = np.divide(dot, norms, out=np.zeros_like(dot), where=norms > 0)
    return ScalarField(np.clip(sim, -1.0, 1.0))


def total_variation_map(evidence):
    """Channel-mean of absolute forward differences along x and y.

    The last column/row is replicate-padded, so its forward difference is 0.
    """
    e = evidence.data
    dx = np.zeros_like(e)
    dy = np.zeros_like(e)
    dx[:, :-1] = np.abs(e[:, 1:] - e[:, :-1])
    dy[:-1, :] = np.abs(e[1:, :] - e[:-1, :])
    return ScalarField((dx + dy).mean(axis=2))


def extract_features(evidence, reference):
    return PfeFeatures(similarity_map(evidence, reference), total_variation_map(evidence))


def _forward(sim, tv, params):
    z = np.stack([sim, tv], axis=-1)[..., None, :]  # (..., 1, 2)
    d = (z - params.centers) / params.scales  # (..., R, 2)
    mu = np.exp(-0.5 * np.sum(d * d, axis=-1))  # (..., R)
    total = mu.sum(axis=-1, keepdims=True) + params.epsilon
    mu_bar = mu / total
    rule_logs = params.a_sim * sim[..., None] + params.a_tv * tv[..., None] + params.bias
    log_alpha = np.sum(mu_bar * rule_logs, axis=-1)
    return {"d": d, "mu": mu, "total": total, "mu_bar": mu_bar, "rule_logs": rule_logs, "log_alpha": log_alpha}


def rule_activations(features, params):
    """Normalized rule memberships, one ScalarField per rule."""
    fw = _forward(features.sim.data, features.tv.data, params)
    return [ScalarField(fw["mu_bar"][..., r]) for r in range(params.num_rules)]


def log_precision(features, params):
    """Blended log-precision before the softplus, as a plain array."""
    return _forward(features.sim.data, features.tv.data, params)["log_alpha"]


def precision_field(features, params):
    alpha = softplus(log_precision(features, params))
    # softplus underflows to 0 only below about -745; keep the field valid
    return PrecisionField(np.maximum(alpha, np.finfo(np.float64).tiny))


def pfe_fit_gradient(features, params, targets):
    """Mean squared log-precision loss and its analytic gradient.

    Returns ``(loss, grads)`` where ``grads`` maps each of ``centers``,
    ``scales``, ``a_sim``, ``a_tv`` and ``bias`` to an array shaped like the
    matching parameter.
    """
    sim, tv = features.sim.data, features.tv.data
    target = targets.data if isinstance(targets, ScalarField) else np.asarray(targets, dtype=np.float64)
    if target.shape != sim.shape:
        raise ShapeError(f"target shape {target.shape} does not match features {sim.shape}")
    fw = _forward(sim, tv, params)
    resid = fw["log_alpha"] - target
    n = resid.size
    loss = float(np.mean(resid * resid))

    g = (2.0 / n) * resid[..., None]  # dloss/dlog_alpha, broadcast over rules
    mu_bar = fw["mu_bar"]
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731

    grad_a_sim = flat(g * mu_bar * sim[..., None]).sum(axis=0)
    grad_a_tv = flat(g * mu_bar * tv[..., None]).sum(axis=0)
    grad_bias = flat(g * mu_bar).sum(axis=0)

    # d log_alpha / d mu_r = (l_r - log_alpha) / total
    dmu = g * (fw["rule_logs"] - fw["log_alpha"][..., None]) / fw["total"]
    d = fw["d"]
    weight = (dmu * fw["mu"])[..., None]  # (..., R, 1)
    grad_centers = (weight * d / params.scales).reshape(-1, params.num_rules, 2).sum(axis=0)
    grad_scales = (weight * d * d / params.scales).reshape(-1, params.num_rules, 2).sum(axis=0)

    grads = {
        "centers": grad_centers,
        "scales": grad_scales,
        "a_sim": grad_a_sim,
        "a_tv": grad_a_tv,
        "bias": grad_bias,
    }
    return loss, grads


def gradient_vector(grads):
    return np.concatenate([np.asarray(grads[k]).reshape(-1) for k in PARAM_KEYS])


def default_params(features, num_rules=4, epsilon=DEFAULT_EPSILON):
    """Rules on a grid over the empirical feature range, zero linear terms.

    Centers sit at the cell midpoints of an ``n_sim x n_tv`` grid spanning
    the observed (sim, tv) box; scales are half the grid spacing.
    """
    if num_rules < 1:
        raise ParameterError("num_rules must be >= 1")
    sim, tv = features.sim.data.ravel(), features.tv.data.ravel()
    n_sim = max(1, int(np.floor(np.sqrt(num_rules))))
    n_tv = int(np.ceil(num_rules / n_sim))
    spans = []
    for values, n in ((sim, n_sim), (tv, n_tv)):
        lo, hi = float(values.min()), float(values.max())
        if hi - lo < 1e-6:
            lo, hi = lo - 0.5, hi + 0.5
        step = (hi - lo) / n
        spans.append((lo + step * (np.arange(n) + 0.5), step))
    (sim_c, sim_step), (tv_c, tv_step) = spans
    centers = np.array([(s, t) for s in sim_c for t in tv_c])[:num_rules]
    scales = np.tile([sim_step / 2.0, tv_step / 2.0], (num_rules, 1))
    zeros = np.zeros(num_rules)
    return PfeParams(centers, scales, zeros, zeros, zeros, epsilon)
