"""Run configuration: YAML document, defaults, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import yaml

from . import cdo, decoder, pbo
from .errors import B3Error, ConfigError

SEED_ENV = "B3KIT_SEED"

DEFAULTS = {
    "scene": {"height": 32, "width": 32, "regions": 6, "channels": 8, "tasks": 4, "seed": 0},
    "noise": {"var_min": 0.01, "var_max": 1.0, "ref_var": 0.25},
    "pbo": {"w0": 1.0, "eta_b": 0.5, "correction_enabled": True},
    "extractor": {"mode": "identity", "seed": 0},
    "pfe": {"rules": 4, "epsilon": 1e-6, "fit": {"steps": 200, "lr": 0.05}},
    "cdo": {"kernel": 1, "theta": 0.0, "weight_seed": 0},
    "decoder": {"stages": 3, "aggregation": [1.0, 1.0, 1.0], "dispatch_source": None},
    "bench": {"trials": 20, "train_scenes": 8, "eval_scenes": 4, "min_ratio": 4.0},
    "verify": {"cases": 1000},
    "output": {"dir": "b3kit-out", "dump_fields": False},
}


def _merge(base, override, path=""):
    if not isinstance(override, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value or {}, where)
        else:
            out[key] = value
    return out


class RunConfig:
    """Validated configuration document with attribute access to sections."""

    def __init__(self, doc=None):
        self.doc = _merge(DEFAULTS, doc or {})
        self._validate()

    def __getattr__(self, name):
        doc = self.__dict__.get("doc", {})
        if name in doc:
            return doc[name]
        raise AttributeError(name)

    @property
    def seed(self):
        return int(self.doc["scene"]["seed"])

    def with_seed(self, seed):
        doc = copy.deepcopy(self.doc)
        doc["scene"]["seed"] = int(seed)
        return RunConfig(doc)

    def canonical_bytes(self):
        return json.dumps(self.doc, sort_keys=True, separators=(",", ":")).encode("utf-8")

    def config_hash(self):
        return hashlib.sha256(self.canonical_bytes()).hexdigest()

    def _validate(self):
        d = self.doc
        try:
            s = d["scene"]
            for key in ("height", "width", "regions", "channels", "tasks"):
                if not isinstance(s[key], int) or s[key] < 1:
                    raise ConfigError(f"scene.{key} must be a positive integer")
            if s["regions"] < 2:
                raise ConfigError("scene.regions must be >= 2")
            if s["channels"] < 7:
                raise ConfigError("scene.channels must be >= 7")
            if not isinstance(s["seed"], int) or s["seed"] < 0:
                raise ConfigError("scene.seed must be a non-negative integer")
            n = d["noise"]
            if not 0 < n["var_min"] <= n["var_max"]:
                raise ConfigError("noise needs 0 < var_min <= var_max")
            if not n["ref_var"] > 0:
                raise ConfigError("noise.ref_var must be > 0")
            self.pbo_config()
            if d["extractor"]["mode"] not in ("identity", "attention"):
                raise ConfigError("extractor.mode must be identity or attention")
            p = d["pfe"]
            if not isinstance(p["rules"], int) or p["rules"] < 1:
                raise ConfigError("pfe.rules must be >= 1")
            if not p["epsilon"] > 0:
                raise ConfigError("pfe.epsilon must be > 0")
            if not isinstance(p["fit"]["steps"], int) or p["fit"]["steps"] < 1:
                raise ConfigError("pfe.fit.steps must be >= 1")
            if not p["fit"]["lr"] >= 0:
                raise ConfigError("pfe.fit.lr must be >= 0")
            if d["cdo"]["kernel"] not in (1, 3):
                raise ConfigError("cdo.kernel must be 1 or 3")
            if not np.isfinite(d["cdo"]["theta"]):
                raise ConfigError("cdo.theta must be finite")
            dec = d["decoder"]
            if not isinstance(dec["stages"], int) or dec["stages"] < 1:
                raise ConfigError("decoder.stages must be >= 1")
            if len(dec["aggregation"]) != dec["stages"]:
                raise ConfigError("decoder.aggregation needs one weight per stage")
            if dec["dispatch_source"] not in (None, "closed_form", "corrected"):
                raise ConfigError("decoder.dispatch_source must be closed_form or corrected")
            b = d["bench"]
            for key in ("trials", "train_scenes", "eval_scenes"):
                if not isinstance(b[key], int) or b[key] < 1:
                    raise ConfigError(f"bench.{key} must be >= 1")
            if b["min_ratio"] is not None and not (1 <= b["min_ratio"] <= n["var_max"] / n["var_min"]):
                raise ConfigError("bench.min_ratio must lie in [1, var_max / var_min]")
            if not isinstance(d["verify"]["cases"], int) or d["verify"]["cases"] < 1:
                raise ConfigError("verify.cases must be >= 1")
        except ConfigError:
            raise
        except (B3Error, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    def pbo_config(self):
        p = self.doc["pbo"]
        try:
            return pbo.PboConfig(float(p["w0"]), float(p["eta_b"]), bool(p["correction_enabled"]))
        except B3Error as exc:
            raise ConfigError(f"pbo: {exc}") from exc

    def extractor_params(self):
        e = self.doc["extractor"]
        if e["mode"] == "identity":
            return pbo.ExtractorParams.identity()
        return pbo.ExtractorParams.seeded_attention(self.doc["scene"]["channels"], int(e["seed"]))

    def cdo_params(self):
        c = self.doc["cdo"]
        return cdo.CdoParams.seeded(
            self.doc["scene"]["channels"], int(c["kernel"]), int(c["weight_seed"]), float(c["theta"])
        )

    def decoder_config(self, pfe_params):
        dec = self.doc["decoder"]
        return decoder.DecoderConfig(
            tasks=self.doc["scene"]["tasks"],
            pfe_params=pfe_params,
            cdo_params=self.cdo_params(),
            num_stages=dec["stages"],
            aggregation_weights=tuple(dec["aggregation"]),
            dispatch_source=dec["dispatch_source"],
            pbo_config=self.pbo_config(),
            extractor=self.extractor_params(),
        )


def load_config(path=None, seed=None, env=None):
    """Load ``path`` over the defaults; ``seed`` beats ``$B3KIT_SEED`` beats the file."""
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = RunConfig(doc)
    env = os.environ if env is None else env
    if seed is None and env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    if seed is not None:
        if not 0 <= int(seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg = cfg.with_seed(seed)
    return cfg
