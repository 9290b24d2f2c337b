"""Experiment configuration: one JSON document, schema-validated before any
compute, unknown keys rejected, every error naming the offending field."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .data import GeneratorSpec, ShiftSpec
from .learners import ArchSpec, Hyper
from .metrics import ClassMapping
from .noise import PropagationSpec
from .util import fingerprint_bytes


class ConfigError(ValueError):
    pass


def _num(minimum=None, maximum=None, integer=False):
    s: dict = {"type": "integer" if integer else "number"}
    if minimum is not None:
        s["minimum"] = minimum
    if maximum is not None:
        s["maximum"] = maximum
    return s


_PAIR = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

_GENERATOR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "height": _num(8, 512, integer=True),
        "width": _num(8, 512, integer=True),
        "channels": _num(1, 8, integer=True),
        "num_classes": _num(2, 64, integer=True),
        "n_labeled": _num(1, integer=True),
        "n_reference": _num(1, integer=True),
        "n_test": _num(1, integer=True),
        "blobs_per_class": _num(0, 16, integer=True),
        "min_class_frac": _num(0.0, 0.5),
        "max_class_frac": _num(0.0, 0.5),
        "rare_classes": _num(0, 63, integer=True),
        "rare_min_frac": _num(0.0, 0.5),
        "rare_max_frac": _num(0.0, 0.5),
        "noise_level": _num(0.0, 5.0),
        "texture_amp": _num(0.0, 5.0),
        "intensity_jitter": _num(0.0, 2.0),
        "contrast_range": _PAIR,
        "brightness_range": _PAIR,
        "offset_range": _PAIR,
    },
}

_SHIFT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "intensity_scale": _num(1e-6, 10.0),
        "intensity_offset": _num(-5.0, 5.0),
        "contrast_gamma": _num(0.25, 4.0),
        "shape_drift": _num(-0.5, 1.0),
        "anomaly_rate": _num(0.0, 1.0),
        "anomaly_magnitude": _num(-5.0, 5.0),
    },
}

_MAPPING_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["source_classes", "target_classes", "table"],
    "properties": {
        "source_classes": _num(2, 64, integer=True),
        "target_classes": _num(2, 64, integer=True),
        "table": {"type": "array", "items": _num(0, integer=True)},
    },
}

_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": ["self_learning", "stso", "atso"]},
        "modes": {"type": "array", "minItems": 1,
                  "items": {"enum": ["self_learning", "stso", "atso"]}},
        "T": _num(0, 64, integer=True),
        "seed": _num(0, integer=True),
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_seeds": _num(1, integer=True),
                "base_seed": _num(0, integer=True),
            },
        },
        "generator": _GENERATOR_SCHEMA,
        "source_generator": _GENERATOR_SCHEMA,
        "shift": _SHIFT_SCHEMA,
        "manifest": {"type": "string"},
        "hyper": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _num(0, 100000, integer=True),
                "lr": _num(0.0, 100.0),
                "lr_decay": _num(0.0, 1.0),
                "batch_size": _num(1, integer=True),
                "l2": _num(0.0, 1.0),
            },
        },
        "arch": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden_units": _num(0, 512, integer=True),
                "feature_radii": {"type": "array", "minItems": 1, "maxItems": 6,
                                  "items": _num(1, 32, integer=True)},
            },
        },
        "scratch_depth": {"enum": [0, 1, 2]},
        "eval_metric": {"enum": ["auto", "dice", "miou", "accuracy"]},
        "concurrent": {"type": "boolean"},
        "class_mapping": {"oneOf": [{"type": "string"}, _MAPPING_SCHEMA, {"type": "null"}]},
        "reduced": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "stage1_T": _num(0, 64, integer=True),
                "stage2_T": _num(0, 64, integer=True),
                "stage2_init": {"enum": ["continued", "fresh", "both"]},
            },
        },
        "propagation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "regime": {"enum": ["continual", "scratch", "cross_subset"]},
                "generations": _num(0, 1000, integer=True),
                "trials": _num(1, integer=True),
                "initial_bias": _num(-10.0, 10.0),
                "inject_mean": _num(-10.0, 10.0),
                "inject_std": _num(0.0, 10.0),
                "loss_share_distance_continual": _num(1e-9, 100.0),
                "loss_share_distance_fresh": _num(1e-9, 100.0),
                "attenuation": {"oneOf": [_num(0.0, 1.0), {"type": "null"}]},
            },
        },
        "output_dir": {"type": "string"},
    },
}

DEFAULTS: dict = {
    "mode": "atso",
    "modes": ["self_learning", "stso", "atso"],
    "T": 3,
    "seed": 7,
    "sweep": {"num_seeds": 10, "base_seed": 100},
    "generator": {},
    "shift": {},
    "hyper": {},
    "arch": {},
    "scratch_depth": 2,
    "eval_metric": "auto",
    "concurrent": False,
    "class_mapping": None,
    "reduced": {"stage1_T": 3, "stage2_T": 1, "stage2_init": "continued"},
    "propagation": {},
    "output_dir": "atso_out",
}


@dataclass
class ExperimentConfig:
    mode: str
    modes: list[str]
    T: int
    seed: int
    num_seeds: int
    base_seed: int
    generator: GeneratorSpec
    source_generator: GeneratorSpec | None
    shift: ShiftSpec
    manifest: str | None
    hyper: Hyper
    hidden_units: int
    feature_radii: tuple[int, ...]
    scratch_depth: int
    eval_metric: str
    concurrent: bool
    class_mapping: ClassMapping | None
    stage1_T: int
    stage2_T: int
    stage2_init: str
    propagation: PropagationSpec
    output_dir: str
    config_hash: str
    raw: dict = field(repr=False, default_factory=dict)

    def arch_for(self, channels: int, num_classes: int) -> ArchSpec:
        return ArchSpec(channels, num_classes, self.hidden_units, self.feature_radii)

    def metric_for(self, num_classes: int) -> str:
        if self.eval_metric != "auto":
            return self.eval_metric
        return "dice" if num_classes == 2 else "miou"


def _validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config field '{path}': {e.message}")


def _merged_defaults(raw: dict) -> dict:
    merged = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


def parse_config_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _validate(raw)
    cfg = _merged_defaults(raw)
    base_dir = base_dir or Path.cwd()

    try:
        generator = GeneratorSpec.from_dict(cfg["generator"])
        source_generator = (GeneratorSpec.from_dict(cfg["source_generator"])
                            if "source_generator" in raw else None)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"config field 'generator': {err}") from err
    try:
        shift = ShiftSpec.from_dict(cfg["shift"])
    except (TypeError, ValueError) as err:
        raise ConfigError(f"config field 'shift': {err}") from err
    try:
        hyper = Hyper.from_dict({**Hyper().to_dict(), **cfg["hyper"]})
    except (TypeError, ValueError) as err:
        raise ConfigError(f"config field 'hyper': {err}") from err

    mapping_cfg = cfg["class_mapping"]
    mapping = None
    if isinstance(mapping_cfg, str):
        mpath = Path(mapping_cfg)
        if not mpath.is_absolute():
            mpath = base_dir / mpath
        try:
            mapping_cfg = json.loads(mpath.read_text())
        except OSError as err:
            raise ConfigError(f"config field 'class_mapping': cannot read {mpath}: {err}")
    if mapping_cfg is not None:
        try:
            mapping = ClassMapping.from_dict(mapping_cfg)
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"config field 'class_mapping': {err}") from err

    try:
        propagation = PropagationSpec(**cfg["propagation"])
        propagation.validate()
    except (TypeError, ValueError) as err:
        raise ConfigError(f"config field 'propagation': {err}") from err

    arch_cfg = cfg["arch"]
    hidden_units = int(arch_cfg.get("hidden_units", 24))
    feature_radii = tuple(arch_cfg.get("feature_radii", (1, 3, 6)))

    canonical = json.dumps(cfg, sort_keys=True).encode()
    return ExperimentConfig(
        mode=cfg["mode"],
        modes=list(cfg["modes"]),
        T=int(cfg["T"]),
        seed=int(cfg["seed"]),
        num_seeds=int(cfg["sweep"]["num_seeds"]),
        base_seed=int(cfg["sweep"]["base_seed"]),
        generator=generator,
        source_generator=source_generator,
        shift=shift,
        manifest=cfg.get("manifest"),
        hyper=hyper,
        hidden_units=hidden_units,
        feature_radii=feature_radii,
        scratch_depth=int(cfg["scratch_depth"]),
        eval_metric=cfg["eval_metric"],
        concurrent=bool(cfg["concurrent"]),
        class_mapping=mapping,
        stage1_T=int(cfg["reduced"]["stage1_T"]),
        stage2_T=int(cfg["reduced"]["stage2_T"]),
        stage2_init=cfg["reduced"]["stage2_init"],
        propagation=propagation,
        output_dir=cfg["output_dir"],
        config_hash=fingerprint_bytes(canonical),
        raw=cfg,
    )


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config {p}: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {p} is not valid JSON: {err}") from err
    return parse_config_dict(raw, base_dir=p.parent)
