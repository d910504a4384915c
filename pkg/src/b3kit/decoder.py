"""Multi-stage posterior bridge propagation.

Each stage builds a shared reference, extracts per-task evidence, estimates
its precision, fuses a bridge and dispatches it back into every task
state.  Stage outputs are combined with scalar aggregation weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cdo, pbo, pfe
from .errors import ArityError, DegenerateInputError, ParameterError, StateError
from .field import FieldTensor, check_same_shape, write_field


@dataclass(frozen=True, eq=False)
class DecoderConfig:
    """Decoder wiring.

    ``pfe_params``, ``cdo_params`` and ``extractor`` are either a single
    shared value or a list with one entry per task.
    """

    tasks: int
    pfe_params: object
    cdo_params: object
    num_stages: int = 3
    aggregation_weights: tuple | None = None
    dispatch_source: str | None = None
    pbo_config: pbo.PboConfig = field(default_factory=pbo.PboConfig)
    extractor: object = field(default_factory=pbo.ExtractorParams.identity)

    def __post_init__(self):
        if self.num_stages < 1:
            raise ParameterError("num_stages must be >= 1")
        if self.tasks < 1:
            raise ParameterError("tasks must be >= 1")
        weights = self.aggregation_weights
        weights = (1.0,) * self.num_stages if weights is None else tuple(float(w) for w in weights)
        if len(weights) != self.num_stages or not all(np.isfinite(weights)):
            raise ParameterError(f"need {self.num_stages} finite aggregation weights, got {weights}")
        object.__setattr__(self, "aggregation_weights", weights)
        source = self.dispatch_source
        if source is None:
            source = "corrected" if self.pbo_config.correction_enabled else "closed_form"
        if source not in ("closed_form", "corrected"):
            raise ParameterError(f"unknown dispatch_source {source!r}")
        object.__setattr__(self, "dispatch_source", source)
        for name in ("pfe_params", "cdo_params", "extractor"):
            value = getattr(self, name)
            if isinstance(value, (list, tuple)) and len(value) != self.tasks:
                raise ParameterError(f"{name} lists {len(value)} entries for {self.tasks} tasks")

    def for_task(self, name, t):
        value = getattr(self, name)
        return value[t] if isinstance(value, (list, tuple)) else value


@dataclass(frozen=True, eq=False)
class StageRecord:
    stage: int
    reference: FieldTensor
    evidences: tuple
    precisions: tuple
    bridge: FieldTensor
    corrected_bridge: FieldTensor
    dispatched: FieldTensor
    states: tuple
    contraction_ratios: tuple


@dataclass(frozen=True, eq=False)
class StageTrace:
    stages: tuple

    def __len__(self):
        return len(self.stages)

    def rows(self, truth=None):
        """``(stage, task, contraction_ratio, bridge_mse_vs_truth)`` tuples."""
        out = []
        for rec in self.stages:
            mse = float("nan") if truth is None else float(np.mean((rec.dispatched.data - truth.data) ** 2))
            for t, ratio in enumerate(rec.contraction_ratios):
                out.append((rec.stage, t, ratio, mse))
        return out

    def to_csv(self, path=None, truth=None):
        lines = ["stage,task,contraction_ratio,bridge_mse_vs_truth"]
        lines += [f"{s},{t},{r!r},{m!r}" for s, t, r, m in self.rows(truth)]
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text, newline="\n")
        return text

    def dump_fields(self, root):
        root = Path(root)
        for rec in self.stages:
            stage_dir = root / f"stage{rec.stage}"
            for t in range(len(rec.states)):
                task_dir = stage_dir / f"task{t}"
                task_dir.mkdir(parents=True, exist_ok=True)
                write_field(task_dir / "evidence.b3f", rec.evidences[t])
                write_field(task_dir / "precision.b3f", FieldTensor(rec.precisions[t].data[..., None]))
                write_field(task_dir / "state.b3f", rec.states[t])
            write_field(stage_dir / "bridge.b3f", rec.dispatched)


def build_reference(stage_index, initial_states, previous_bridge=None):
    if stage_index < 1:
        raise ParameterError("stage_index starts at 1")
    if not initial_states:
        raise ArityError("at least one task state is required")
    if stage_index == 1:
        check_same_shape(*initial_states)
        stack = np.sort(np.stack([s.data for s in initial_states]), axis=0)
        return FieldTensor(stack.sum(axis=0) / len(initial_states))
    if previous_bridge is None:
        raise StateError(f"stage {stage_index} needs the previous stage's bridge")
    return previous_bridge


def _stage_ratio(before, after, bridge):
    try:
        return cdo.contraction_ratio(before, after, bridge)
    except DegenerateInputError:
        # state already sits on the bridge and stays there
        return 0.0


def run_stage(states, reference, config, rng=None, stage=1, update=None):
    """One propagation stage; returns ``(new_states, dispatched_bridge, record)``.

    ``update`` replaces :func:`cdo.cdo_update` (used for fault injection).
    """
    if len(states) != config.tasks:
        raise ArityError(f"expected {config.tasks} task states, got {len(states)}")
    check_same_shape(reference, *states)
    update = update or cdo.cdo_update

    evidences, precisions = [], []
    for t, x in enumerate(states):
        e = pbo.extract_evidence(x, reference, config.for_task("extractor", t))
        feats = pfe.extract_features(e, reference)
        evidences.append(e)
        precisions.append(pfe.precision_field(feats, config.for_task("pfe_params", t)))

    bridge = pbo.posterior_bridge(reference, evidences, precisions, config.pbo_config)
    corrected = pbo.posterior_correction(reference, bridge, config.pbo_config)
    dispatched = corrected if config.dispatch_source == "corrected" else bridge

    new_states, ratios = [], []
    for t, x in enumerate(states):
        params = config.for_task("cdo_params", t)
        gate = cdo.dispatch_gate(x, dispatched, precisions[t], params)
        beta = cdo.effective_coefficient(gate, params.theta)
        x_new = update(x, dispatched, beta)
        new_states.append(x_new)
        ratios.append(_stage_ratio(x, x_new, dispatched))

    record = StageRecord(
        stage=stage,
        reference=reference,
        evidences=tuple(evidences),
        precisions=tuple(precisions),
        bridge=bridge,
        corrected_bridge=corrected,
        dispatched=dispatched,
        states=tuple(new_states),
        contraction_ratios=tuple(ratios),
    )
    return new_states, dispatched, record


def propagate(initial_states, config, rng=None, update=None):
    """Run every stage and aggregate: ``X~_t = sum_k phi_k X_t^(k)``."""
    states = list(initial_states)
    records = []
    bridge = None
    for k in range(1, config.num_stages + 1):
        reference = build_reference(k, list(initial_states), bridge)
        states, bridge, record = run_stage(states, reference, config, rng, stage=k, update=update)
        records.append(record)
    finals = []
    for t in range(config.tasks):
        acc = np.zeros(initial_states[0].shape)
        for phi, rec in zip(config.aggregation_weights, records):
            acc = acc + phi * rec.states[t].data
        finals.append(FieldTensor(acc))
    return finals, StageTrace(tuple(records))
