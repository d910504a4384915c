"""Seeded benchmark runs over synthetic scenes: PFE fitting, fusion trials, reports."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import cdo, decoder, pfe
from . import synthbench as sb
from .field import RngStream


def root_stream(cfg):
    return RngStream(cfg.seed)


def scene_set(cfg, stream, count):
    s, n = cfg.scene, cfg.noise
    scenes, noises = [], []
    for i in range(count):
        child = stream.spawn(i)
        scene = sb.generate_scene(s["height"], s["width"], s["regions"], s["channels"], child.spawn("scene"))
        noise = sb.make_noise(scene, s["tasks"], n["var_min"], n["var_max"], n["ref_var"], child.spawn("noise"),
                              min_ratio=cfg.bench["min_ratio"] if s["tasks"] >= 2 else None)
        scenes.append(scene)
        noises.append(noise)
    return scenes, noises


@dataclass(frozen=True, eq=False)
class FitOutcome:
    params: pfe.PfeParams
    losses: tuple
    bins: sb.BinTable


def bin_trend(bins):
    """``(monotone_pairs, spearman)`` of mean error against mean precision."""
    err = np.asarray(bins.mean_sq_error)
    pairs = int(np.sum(np.diff(err) <= 0))
    rho = float(stats.spearmanr(bins.mean_precision, bins.mean_sq_error)[0])
    return pairs, rho


def fit_default_pfe(cfg):
    """Fit PFE on the training ensemble and bin it on a held-out ensemble."""
    root = root_stream(cfg)
    scenes, noises = scene_set(cfg, root.spawn("pfe-train"), cfg.bench["train_scenes"])
    features, targets = sb.pfe_training_set(scenes, noises, root.spawn("pfe-train-evidence"))
    initial = pfe.default_params(features, cfg.pfe["rules"], cfg.pfe["epsilon"])
    fit = sb.fit_pfe(features, targets, initial, cfg.pfe["fit"]["steps"], cfg.pfe["fit"]["lr"])
    eval_scenes, eval_noises = scene_set(cfg, root.spawn("pfe-eval"), cfg.bench["eval_scenes"])
    bins = sb.evidence_bins(eval_scenes, eval_noises, fit.params, root.spawn("pfe-eval-evidence"))
    return FitOutcome(fit.params, fit.losses, bins)


def loss_curve_csv(losses):
    return "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses))


@dataclass(frozen=True, eq=False)
class TrialResult:
    entries: tuple
    stage_ratios: tuple  # batch ratio per stage
    trace_csv: str
    precisions: np.ndarray
    sq_errors: np.ndarray
    trace: object = None


def run_trial(cfg, trial, pfe_params, keep_trace=False):
    stream = root_stream(cfg).spawn("trial").spawn(trial)
    (scene,), (noise,) = scene_set(cfg, stream, 1)
    draws = sb.emit_evidence(scene, noise, stream.spawn("evidence"))
    pbo_config = cfg.pbo_config()
    entries = tuple(
        sb.run_fusion_bench(scene, noise, name, pbo_config, stream, pfe_params=pfe_params, trial=trial, draws=draws)
        for name in sb.STRATEGIES
    )
    reference, evidences, _ = draws
    precisions = sb.pfe_precisions(reference, evidences, pfe_params)
    truth = scene.latent_truth.data
    sq_err = np.concatenate([np.mean((e.data - truth) ** 2, axis=-1).ravel() for e in evidences])
    prec = np.concatenate([p.data.ravel() for p in precisions])

    dec_cfg = cfg.decoder_config(pfe_params)
    _, trace = decoder.propagate(evidences, dec_cfg, stream.spawn("decoder"))
    ratios = []
    before = evidences
    for rec in trace.stages:
        num = np.sqrt(sum(np.sum((x.data - rec.dispatched.data) ** 2) for x in rec.states))
        den = np.sqrt(sum(np.sum((x.data - rec.dispatched.data) ** 2) for x in before))
        ratios.append(float(num / den) if den > 0 else 0.0)
        before = rec.states
    return TrialResult(entries, tuple(ratios), trace.to_csv(truth=scene.latent_truth), prec, sq_err,
                       trace if keep_trace else None)


def _run_trial_star(args):
    return run_trial(*args)


@dataclass(frozen=True, eq=False)
class BenchResult:
    fit: FitOutcome
    trials: tuple

    def entries(self):
        return [e for t in self.trials for e in t.entries]

    def bench_csv(self):
        lines = [sb.BenchEntry.CSV_HEADER] + [e.csv_row() for e in self.entries()]
        return "\n".join(lines) + "\n"

    def contraction(self):
        return cdo.ContractionReport.from_ratios([r for t in self.trials for r in t.stage_ratios])

    def bins(self):
        prec = np.concatenate([t.precisions for t in self.trials])
        err = np.concatenate([t.sq_errors for t in self.trials])
        return sb.precision_error_bins(prec, err, 10)

    def strategy_summary(self):
        out = {}
        for name in sb.STRATEGIES:
            rows = [e for e in self.entries() if e.strategy == name]
            out[name] = {
                "mean_latent_mse": float(np.mean([e.latent_mse for e in rows])),
                "delta_mtl": float(np.mean([e.delta_mtl for e in rows])),
            }
        return out


def run_bench(cfg, jobs=1, fit=None):
    fit = fit or fit_default_pfe(cfg)
    args = [(cfg, i, fit.params, i == 0 and cfg.output["dump_fields"]) for i in range(cfg.bench["trials"])]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trials = list(pool.map(_run_trial_star, args))
    else:
        trials = [run_trial(*a) for a in args]
    return BenchResult(fit, tuple(trials))


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, newline="\n")
    return str(path)


def write_bench(result, out_dir, cfg):
    out = Path(out_dir)
    paths = {
        "bench": write_text(out / "bench.csv", result.bench_csv()),
        "bins": write_text(out / "bins.csv", result.bins().to_csv()),
        "contraction": write_text(out / "contraction.csv", result.contraction().to_csv()),
        "contraction_summary": write_text(out / "contraction.json", result.contraction().to_json()),
        "pfe_params": str(out / "pfe_params.yaml"),
    }
    pfe.dump_params(result.fit.params, out / "pfe_params.yaml")
    for i, t in enumerate(result.trials):
        write_text(out / "traces" / f"trial{i:03d}.csv", t.trace_csv)
        if t.trace is not None:
            t.trace.dump_fields(out / "fields")
    pairs, rho = bin_trend(result.bins())
    summary = {
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.seed,
        "trials": len(result.trials),
        "strategies": result.strategy_summary(),
        "pfe_final_loss": result.fit.losses[-1],
        "bins": {"monotone_pairs": pairs, "spearman": rho},
        "contraction": result.contraction().summary(),
    }
    paths["summary"] = write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary, paths
