"""JSON experiment and generator configuration (schema version 1)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from .cohort import SynthConfig
from .harness import BootstrapConfig, ExperimentSpec
from .models import STRATEGIES, HeadConfig, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


_pos_int = {"type": "integer", "minimum": 1}
_rate = {"type": "number", "exclusiveMinimum": 0}
_dropout = {"type": "number", "minimum": 0, "exclusiveMaximum": 1}
_modality_list = {"type": "array", "items": {"type": "string", "minLength": 1}, "minItems": 1}

EXPERIMENT_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["modalities", "fusion"],
    "properties": {
        "name": {"type": "string"},
        "modalities": _modality_list,
        "fusion": {"enum": list(STRATEGIES)},
        "restrict_to": {"type": "array", "items": {"type": "string"}},
        "folds": {"type": "integer", "minimum": 2, "maximum": 20},
        "test_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "n_test": {"type": "integer", "minimum": 3},
        "stratify": {"enum": ["event", "subtype"]},
        "ensemble": {"enum": ["mean", "refit"]},
        "late_cv_folds": {"type": "integer", "minimum": 2},
        "encoders": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "hidden": {"type": "array", "items": _pos_int},
                    "output_dim": _pos_int,
                    "dropout": _dropout,
                    "lr": _rate,
                },
            },
        },
        "head": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": _pos_int,
                "dropout": _dropout,
                "attention_dim": _pos_int,
                "attention_dropout": _dropout,
                "tokens": _pos_int,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _pos_int,
                "head_lr": _rate,
                "patience": _pos_int,
                "batch_size": {"type": ["integer", "null"], "minimum": 2},
            },
        },
        "bootstrap": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "properties": {
                "resamples": {"type": "integer", "minimum": 100},
                "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
    },
}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "data", "experiments"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["clinical", "features"],
            "properties": {
                "clinical": {"type": "string"},
                "features": {"type": "object", "additionalProperties": {"type": "string"},
                             "minProperties": 1},
            },
        },
        "defaults": {k: v for k, v in EXPERIMENT_SCHEMA.items() if k != "required"},
        "experiments": {"type": "array", "items": EXPERIMENT_SCHEMA, "minItems": 1},
    },
}

SYNTH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "n": _pos_int,
        "modalities": _modality_list,
        "dims": {"type": "array", "items": _pos_int, "minItems": 1},
        "weights": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "availability": {"type": "array",
                         "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
        "gbm_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "subtype_hazard": _rate,
        "baseline_hazard": _rate,
        "censoring": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
    },
}


def validate(doc: Any, schema: dict, source: str = "config") -> None:
    """Raise :class:`ConfigError` listing every violation with its field path."""
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{source}: {where}: {e.message}")
        raise ConfigError("\n".join(lines))


def read_json(path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


@dataclass
class RunConfig:
    clinical: Path
    features: dict[str, Path]
    experiments: list[ExperimentSpec]
    seed: int = 0
    raw: dict = field(default_factory=dict)


def experiment_from_dict(doc: dict, seed: int) -> ExperimentSpec:
    boot = doc.get("bootstrap", {})
    return ExperimentSpec(
        modalities=tuple(doc["modalities"]),
        strategy=doc["fusion"],
        name=doc.get("name"),
        restrict_to=tuple(doc.get("restrict_to", ())),
        encoders={m: dict(v) for m, v in doc.get("encoders", {}).items()},
        head=HeadConfig(**doc.get("head", {})),
        train=TrainConfig(seed=seed, **doc.get("train", {})),
        k=doc.get("folds", 5),
        test_fraction=doc.get("test_fraction", 0.2),
        n_test=doc.get("n_test"),
        stratify=doc.get("stratify", "event"),
        seed=seed,
        ensemble=doc.get("ensemble", "mean"),
        bootstrap=None if boot is None else BootstrapConfig(seed=seed, **boot),
        late_cv_folds=doc.get("late_cv_folds", 5),
    )


def parse_run_config(doc: dict, base_dir=".", source: str = "config",
                     seed: int | None = None) -> RunConfig:
    validate(doc, RUN_SCHEMA, source)
    base = Path(base_dir)
    seed = doc.get("seed", 0) if seed is None else seed
    defaults = doc.get("defaults", {})
    specs = []
    for i, exp in enumerate(doc["experiments"]):
        merged = {**defaults, **exp}
        for key in ("head", "train", "encoders"):
            if key in defaults and key in exp:
                merged[key] = {**defaults[key], **exp[key]}
        try:
            spec = experiment_from_dict(merged, seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: experiments/{i}: {exc}") from None
        unknown = set(spec.cohort_modalities) - set(doc["data"]["features"])
        if unknown:
            raise ConfigError(f"{source}: experiments/{i}/modalities: no feature file for "
                              f"{sorted(unknown)}")
        specs.append(spec)
    data = doc["data"]
    return RunConfig(
        clinical=(base / data["clinical"]).resolve(),
        features={m: (base / p).resolve() for m, p in data["features"].items()},
        experiments=specs,
        seed=seed,
        raw=doc,
    )


def load_run_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    return parse_run_config(read_json(path), path.parent, str(path), seed)


def load_synth_config(path=None, seed: int | None = None) -> SynthConfig:
    doc = {} if path is None else read_json(path)
    validate(doc, SYNTH_SCHEMA, str(path or "synth config"))
    doc = {k: v for k, v in doc.items() if k != "schema_version"}
    if seed is not None:
        doc["seed"] = seed
    try:
        return SynthConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
