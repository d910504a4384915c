"""Seeded synthetic multi-task scenes with heteroscedastic evidence.

A scene is a Voronoi partition carrying four dense tasks (semantic labels,
planar depth, surface normals, label edges).  The stacked, normalized task
maps are linearly encoded into a ``C``-channel latent field ``B*``; every
task observes ``B*`` through Gaussian noise whose variance is constant per
region and drawn independently per task.  That makes the Gaussian evidence
model exact, so precision-weighted fusion can be checked against known
optimal answers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, pbo, pfe
from .errors import ParameterError, ShapeError, StateError, TrainingError
from .field import FieldTensor, PrecisionField, ScalarField

TASK_NAMES = ("semseg", "depth", "normal", "edge")
STRATEGIES = ("posterior_oracle", "posterior_pfe", "mean_bridge")
NON_TASK_CHANNELS = 5  # depth + 3 normal components + edge


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    regions: np.ndarray  # (H, W) region index
    semantic: np.ndarray  # (H, W) class labels
    depth: np.ndarray  # (H, W) > 0
    normal: np.ndarray  # (H, W, 3) unit vectors
    edge: np.ndarray  # (H, W) bool
    latent_truth: FieldTensor
    encode: np.ndarray  # (D, C), orthonormal rows
    decode: np.ndarray  # (C, D), pseudo-inverse of encode
    num_classes: int
    depth_offset: float
    depth_scale: float

    @property
    def height(self):
        return self.regions.shape[0]

    @property
    def width(self):
        return self.regions.shape[1]

    @property
    def channels(self):
        return self.latent_truth.channels

    @property
    def num_regions(self):
        return int(self.regions.max()) + 1


@dataclass(frozen=True, eq=False)
class NoiseModel:
    task_variances: np.ndarray  # (T, H, W)
    ref_variance: float
    region_variances: np.ndarray  # (T, num_regions)

    @property
    def tasks(self):
        return self.task_variances.shape[0]


@dataclass(frozen=True, eq=False)
class TaskMaps:
    semantic: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    edge_prob: np.ndarray


@dataclass(frozen=True)
class BenchEntry:
    trial: int
    strategy: str
    latent_mse: float
    semseg_miou: float
    depth_rmse: float
    normal_merr: float
    edge_f: float
    delta_mtl: float
    deltas: dict = field(default_factory=dict)

    CSV_HEADER = "trial,strategy,latent_mse,semseg_miou,depth_rmse,normal_merr,edge_f,delta_mtl"

    def csv_row(self):
        vals = [self.latent_mse, self.semseg_miou, self.depth_rmse, self.normal_merr, self.edge_f, self.delta_mtl]
        return f"{self.trial},{self.strategy}," + ",".join(repr(float(v)) for v in vals)


@dataclass(frozen=True)
class BinTable:
    mean_precision: tuple
    mean_sq_error: tuple
    counts: tuple

    def to_csv(self, path=None):
        lines = ["bin,mean_precision,mean_sq_error,count"]
        for i, (p, e, c) in enumerate(zip(self.mean_precision, self.mean_sq_error, self.counts)):
            lines.append(f"{i},{p!r},{e!r},{c}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, newline="\n")
        return text


# --------------------------------------------------------------------------
# Scene construction
# --------------------------------------------------------------------------


def label_edges(labels):
    """True where any 4-neighbour carries a different label."""
    edge = np.zeros(labels.shape, dtype=bool)
    dx = labels[:, 1:] != labels[:, :-1]
    dy = labels[1:, :] != labels[:-1, :]
    edge[:, 1:] |= dx
    edge[:, :-1] |= dx
    edge[1:, :] |= dy
    edge[:-1, :] |= dy
    return edge


def _voronoi(gen, height, width, num_regions, max_attempts=1000):
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(max_attempts):
        seeds = gen.uniform([0, 0], [height, width], size=(num_regions, 2))
        d2 = (yy[..., None] - seeds[:, 0]) ** 2 + (xx[..., None] - seeds[:, 1]) ** 2
        regions = np.argmin(d2, axis=-1)
        if np.unique(regions).size == num_regions:
            return regions
    raise ParameterError(f"could not place {num_regions} non-empty regions on {height}x{width}")


def task_stack(scene_maps, num_classes, depth_offset, depth_scale):
    semantic, depth, normal, edge = scene_maps
    onehot = np.eye(num_classes)[semantic]
    depth_n = ((depth - depth_offset) / depth_scale)[..., None]
    return np.concatenate([onehot, depth_n, normal, edge[..., None].astype(np.float64)], axis=-1)


def generate_scene(height, width, num_regions, channels, rng):
    if num_regions < 2:
        raise ParameterError("num_regions must be >= 2")
    if channels < NON_TASK_CHANNELS + 2:
        raise ParameterError(f"channels must be >= {NON_TASK_CHANNELS + 2} to hold every task map losslessly")
    gen = rng.generator()
    regions = _voronoi(gen, height, width, num_regions)
    num_classes = min(num_regions, channels - NON_TASK_CHANNELS)
    semantic = regions % num_classes

    offset = gen.uniform(2.5, 4.0, size=num_regions)
    slopes = gen.uniform(-1.0, 1.0, size=(num_regions, 2))
    v = np.linspace(0.0, 1.0, height)[:, None]
    u = np.linspace(0.0, 1.0, width)[None, :]
    depth = offset[regions] + slopes[regions, 0] * u + slopes[regions, 1] * v
    raw_normals = np.column_stack([-slopes[:, 0], -slopes[:, 1], np.ones(num_regions)])
    raw_normals /= np.linalg.norm(raw_normals, axis=1, keepdims=True)
    normal = raw_normals[regions]
    edge = label_edges(semantic)

    depth_offset = float(depth.mean())
    depth_scale = float(depth.std()) or 1.0
    maps = task_stack((semantic, depth, normal, edge), num_classes, depth_offset, depth_scale)
    dim = maps.shape[-1]
    q, _ = np.linalg.qr(gen.normal(size=(channels, dim)))
    encode = q.T  # (D, C), rows orthonormal
    decode = np.linalg.pinv(encode)
    latent = maps @ encode
    return SyntheticScene(
        regions=regions,
        semantic=semantic,
        depth=depth,
        normal=normal,
        edge=edge,
        latent_truth=FieldTensor(latent),
        encode=encode,
        decode=decode,
        num_classes=num_classes,
        depth_offset=depth_offset,
        depth_scale=depth_scale,
    )


def make_noise(scene, tasks, var_min, var_max, ref_var, rng, min_ratio=None, max_attempts=1000):
    """Per-region log-uniform variances for each task.

    With ``min_ratio`` set, each region's variances are redrawn until the
    largest is at least ``min_ratio`` times the smallest (needs ``tasks >= 2``).
    """
    if not 0 < var_min <= var_max:
        raise ParameterError(f"need 0 < var_min <= var_max, got {var_min}, {var_max}")
    if not ref_var > 0:
        raise ParameterError("ref_var must be > 0")
    if min_ratio is not None and (tasks < 2 or var_max / var_min < min_ratio):
        raise ParameterError("min_ratio unreachable with these tasks/variance bounds")
    gen = rng.generator()
    lo, hi = np.log(var_min), np.log(var_max)
    region_vars = np.empty((tasks, scene.num_regions))
    for r in range(scene.num_regions):
        for _ in range(max_attempts):
            v = np.exp(gen.uniform(lo, hi, size=tasks))
            if min_ratio is None or v.max() >= min_ratio * v.min():
                break
        else:
            raise ParameterError("could not satisfy min_ratio")
        region_vars[:, r] = v
    return NoiseModel(region_vars[:, scene.regions], float(ref_var), region_vars)


def constant_noise(scene, variances, ref_var):
    """Spatially constant variance per task."""
    variances = np.asarray(variances, dtype=np.float64)
    field_vars = np.broadcast_to(variances[:, None, None], (len(variances), scene.height, scene.width)).copy()
    region_vars = np.repeat(variances[:, None], scene.num_regions, axis=1)
    return NoiseModel(field_vars, float(ref_var), region_vars)


def emit_evidence(scene, noise, rng):
    """Noisy reference, per-task evidence and oracle precisions ``1 / sigma^2``."""
    if noise.task_variances.shape[1:] != scene.regions.shape:
        raise ShapeError("noise model does not match the scene")
    truth = scene.latent_truth.data
    shape = truth.shape
    gen = rng.generator()
    reference = FieldTensor(truth + np.sqrt(noise.ref_variance) * gen.standard_normal(shape))
    evidences, oracle = [], []
    for var in noise.task_variances:
        sd = np.sqrt(var)[..., None]
        evidences.append(FieldTensor(truth + sd * gen.standard_normal(shape)))
        oracle.append(PrecisionField(1.0 / var))
    return reference, evidences, oracle


# --------------------------------------------------------------------------
# Readout and task metrics
# --------------------------------------------------------------------------


def decode_tasks(latent, scene):
    if latent.channels != scene.decode.shape[0]:
        raise ShapeError(f"latent has {latent.channels} channels, scene decodes {scene.decode.shape[0]}")
    if latent.spatial_shape != scene.regions.shape:
        raise ShapeError("latent spatial shape does not match the scene")
    maps = latent.data @ scene.decode
    k = scene.num_classes
    semantic = np.argmax(maps[..., :k], axis=-1)
    depth = maps[..., k] * scene.depth_scale + scene.depth_offset
    normal = maps[..., k + 1 : k + 4]
    norm = np.linalg.norm(normal, axis=-1, keepdims=True)
    normal = np.where(norm > 0, normal / np.where(norm > 0, norm, 1.0), np.array([0.0, 0.0, 1.0]))
    edge_prob = np.clip(maps[..., k + 4], 0.0, 1.0)
    return TaskMaps(semantic, depth, normal, edge_prob)


def task_metrics(maps, scene):
    return {
        "semseg": metrics.miou(maps.semantic, scene.semantic, scene.num_classes),
        "depth": metrics.rmse(maps.depth, scene.depth),
        "normal": metrics.mean_angular_error(maps.normal, scene.normal),
        "edge": metrics.edge_f_best(maps.edge_prob, scene.edge, 1)[0],
    }


TASK_METRIC = {"semseg": "miou", "depth": "rmse", "normal": "merr", "edge": "edge_f"}


def baseline_metrics(scene, evidences):
    """No-fusion baseline: task ``t`` is read from its own raw evidence."""
    out = {}
    for t, name in enumerate(TASK_NAMES[: len(evidences)]):
        out[name] = task_metrics(decode_tasks(evidences[t], scene), scene)[name]
    return out


def transfer_gains(fused, baseline):
    deltas = {}
    for name, st_value in baseline.items():
        metric = TASK_METRIC[name]
        mt = metrics.TaskMetric(metric, fused[name])
        st = metrics.TaskMetric(metric, st_value)
        deltas[name] = metrics.delta_tau(mt, st) if st_value != 0 else 0.0
    return deltas, metrics.delta_mtl(list(deltas.values()))


# --------------------------------------------------------------------------
# Fusion strategies
# --------------------------------------------------------------------------


def pfe_precisions(reference, evidences, params):
    return [pfe.precision_field(pfe.extract_features(e, reference), params) for e in evidences]


def strategy_bridge(strategy, reference, evidences, oracle, pbo_config, pfe_params=None):
    if strategy == "posterior_oracle":
        precisions = oracle
    elif strategy == "posterior_pfe":
        if pfe_params is None:
            raise StateError("posterior_pfe needs fitted PFE parameters")
        precisions = pfe_precisions(reference, evidences, pfe_params)
    elif strategy == "mean_bridge":
        ones = np.ones(reference.spatial_shape)
        precisions = [PrecisionField(ones) for _ in evidences]
    else:
        raise ParameterError(f"unknown strategy {strategy!r}")
    return pbo.posterior_bridge(reference, evidences, precisions, pbo_config)


def run_fusion_bench(scene, noise, strategy, pbo_config, rng, pfe_params=None, trial=0, draws=None):
    """Fuse one evidence draw with ``strategy`` and score it against ``B*``.

    ``draws`` may carry a precomputed ``(reference, evidences, oracle)`` so
    several strategies see the same noise.
    """
    reference, evidences, oracle = draws if draws is not None else emit_evidence(scene, noise, rng)
    bridge = strategy_bridge(strategy, reference, evidences, oracle, pbo_config, pfe_params)
    latent_mse = float(np.mean((bridge.data - scene.latent_truth.data) ** 2))
    fused = task_metrics(decode_tasks(bridge, scene), scene)
    deltas, mtl = transfer_gains(fused, baseline_metrics(scene, evidences))
    return BenchEntry(
        trial=trial,
        strategy=strategy,
        latent_mse=latent_mse,
        semseg_miou=fused["semseg"],
        depth_rmse=fused["depth"],
        normal_merr=fused["normal"],
        edge_f=fused["edge"],
        delta_mtl=mtl,
        deltas=deltas,
    )


# --------------------------------------------------------------------------
# PFE fitting and reliability bins
# --------------------------------------------------------------------------


def pfe_training_set(scenes, noises, rng):
    """Stacked (features, log-precision targets) over every scene and task."""
    feats, targets = [], []
    for i, (scene, noise) in enumerate(zip(scenes, noises)):
        reference, evidences, _ = emit_evidence(scene, noise, rng.spawn(i))
        for e, var in zip(evidences, noise.task_variances):
            feats.append(pfe.extract_features(e, reference))
            targets.append(-np.log(var).reshape(1, -1))
    return pfe.PfeFeatures.stack(feats), ScalarField(np.concatenate(targets, axis=1))


@dataclass(frozen=True, eq=False)
class FitResult:
    params: pfe.PfeParams
    losses: tuple


MIN_SCALE = 1e-3


def fit_pfe(features, targets, initial, steps, learning_rate):
    """Plain gradient descent on the PFE log-precision loss.

    ``losses[i]`` is the loss before step ``i``; the last entry is the loss of
    the returned parameters.  Scales are projected onto ``>= MIN_SCALE``.
    """
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    if learning_rate < 0:
        raise ParameterError("learning_rate must be >= 0")
    params = initial
    r, eps = params.num_rules, params.epsilon
    losses = []
    for step in range(steps):
        loss, grads = pfe.pfe_fit_gradient(features, params, targets)
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}", step)
        losses.append(loss)
        vec = params.to_vector() - learning_rate * pfe.gradient_vector(grads)
        vec[2 * r : 4 * r] = np.maximum(vec[2 * r : 4 * r], MIN_SCALE)
        if not np.all(np.isfinite(vec)):
            raise TrainingError(f"parameters diverged at step {step}", step)
        params = pfe.PfeParams.from_vector(vec, r, eps)
    final, _ = pfe.pfe_fit_gradient(features, params, targets)
    if not np.isfinite(final):
        raise TrainingError(f"loss diverged at step {steps}", steps)
    losses.append(final)
    return FitResult(params, tuple(losses))


def precision_error_bins(precision, squared_error, num_bins=10):
    """Equal-population precision bins with mean precision and mean squared error."""
    p = np.asarray(precision.data if hasattr(precision, "data") else precision, dtype=np.float64).ravel()
    e = np.asarray(squared_error.data if hasattr(squared_error, "data") else squared_error, dtype=np.float64).ravel()
    if p.shape != e.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {e.shape}")
    if num_bins < 2:
        raise ParameterError("num_bins must be >= 2")
    if p.size < num_bins:
        raise ParameterError(f"{p.size} pixels cannot fill {num_bins} bins")
    order = np.argsort(p, kind="stable")
    chunks = np.array_split(order, num_bins)
    return BinTable(
        mean_precision=tuple(float(p[c].mean()) for c in chunks),
        mean_sq_error=tuple(float(e[c].mean()) for c in chunks),
        counts=tuple(int(c.size) for c in chunks),
    )


def evidence_bins(scenes, noises, params, rng, num_bins=10):
    """Bin PFE precision against per-pixel evidence error over a scene set."""
    precisions, errors = [], []
    for i, (scene, noise) in enumerate(zip(scenes, noises)):
        reference, evidences, _ = emit_evidence(scene, noise, rng.spawn(i))
        for e, prec in zip(evidences, pfe_precisions(reference, evidences, params)):
            precisions.append(prec.data.ravel())
            errors.append(np.mean((e.data - scene.latent_truth.data) ** 2, axis=-1).ravel())
    return precision_error_bins(np.concatenate(precisions), np.concatenate(errors), num_bins)
