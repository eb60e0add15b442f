"""The seven-section experiment configuration: schema, parsing, overrides.

Configs are YAML restricted to a safe subset (scalars, sequences, maps;
no anchors, aliases, or multi-document streams). Unknown sections and
unknown keys are rejected; every optional key has a documented default.
The ``distributed`` section is accepted as-is and ignored with a warning
at run time.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any

import yaml

from .dataset import LABEL_SCHEMES, SPLIT_MODES
from .errors import ConfigSyntaxError, SchemaError, TyeeError, TypeMismatch, UnknownKey
from .metrics import (
    BINARY_ONLY_METRICS,
    CLASSIFICATION_METRICS,
    REGRESSION_METRICS,
)
from .nn import ACTIVATIONS, CRITERIA
from .signal_io import registered_formats
from .transforms import compile_pipeline

_REQUIRED = object()


@dataclass(frozen=True)
class _Field:
    type: str
    default: Any = _REQUIRED
    choices: tuple | None = None
    item: str | None = None
    nullable: bool = False


SCHEMA: dict[str, Any] = {
    "common": {
        "seed": _Field("int", 42),
        "output_dir": _Field("str", "output"),
        "log_level": _Field("str", "info", choices=("debug", "info", "warning", "error")),
    },
    "dataset": {
        "format": _Field("str", None, nullable=True),
        "paths": _Field("list", _REQUIRED, item="str"),
        "sampling_rate": _Field("float", None, nullable=True),
        "offline_transforms": _Field("list", [], item="map"),
        "online_transforms": _Field("list", [], item="map"),
        "epoch": {
            "window": _Field("float", _REQUIRED),
            "stride": _Field("float", None, nullable=True),
        },
        "label_scheme": _Field("str", "per_record", choices=LABEL_SCHEMES),
        "classes": _Field("list", None, item="str", nullable=True),
        "target_channels": _Field("list", None, item="str", nullable=True),
        "split": {
            "mode": _Field("str", "by_record", choices=SPLIT_MODES),
            "fractions": _Field("list", [0.8, 0.1, 0.1], item="float"),
            "seed": _Field("int", 0),
        },
        "cache_dir": _Field("str", None, nullable=True),
    },
    "model": {
        "kind": _Field("str", _REQUIRED, choices=("linear", "mlp")),
        "input_dim": _Field("int", _REQUIRED),
        "output_dim": _Field("int", _REQUIRED),
        "hidden": _Field("list", [], item="int"),
        "activation": _Field("str", "relu", choices=ACTIVATIONS),
    },
    "optimizer": {
        "kind": _Field("str", _REQUIRED, choices=("sgd", "adam")),
        "lr": _Field("float", _REQUIRED),
        "momentum": _Field("float", 0.0),
        "beta1": _Field("float", 0.9),
        "beta2": _Field("float", 0.999),
        "eps": _Field("float", 1e-8),
        "weight_decay": _Field("float", 0.0),
        "scheduler": {
            "kind": _Field("str", "none", choices=("none", "step", "cosine")),
            "step_size": _Field("int", 10),
            "gamma": _Field("float", 0.1),
            "t_max": _Field("int", 10),
            "lr_min": _Field("float", 0.0),
        },
    },
    "task": {
        "type": _Field("str", "classification", choices=("classification", "regression")),
        "criterion": _Field("str", None, nullable=True),
        "metrics": _Field("list", ["accuracy"], item="str"),
        "select_by": _Field("str", "metric", choices=("metric", "loss")),
    },
    "trainer": {
        "epochs": _Field("int", 10),
        "batch_size": _Field("int", 32),
        "checkpoint_interval": _Field("int", 1),
        "eval_initial": _Field("bool", False),
    },
    "distributed": None,  # free-form map, accepted but ignored
}


def _coerce_scalar(kind: str, value, path: str):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(path, f"expected an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(path, f"expected a number, got {value!r}")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise SchemaError(path, f"expected a string, got {value!r}")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise SchemaError(path, f"expected a boolean, got {value!r}")
        return value
    if kind == "map":
        if not isinstance(value, dict) or not all(isinstance(k, str) for k in value):
            raise SchemaError(path, f"expected a mapping with string keys, got {value!r}")
        return value
    raise AssertionError(kind)


def _coerce(field: _Field, value, path: str):
    if value is None:
        if field.nullable:
            return None
        raise SchemaError(path, "may not be null")
    if field.type == "list":
        if not isinstance(value, (list, tuple)):
            raise SchemaError(path, f"expected a list, got {value!r}")
        out = [_coerce_scalar(field.item, v, f"{path}[{i}]") for i, v in enumerate(value)]
    else:
        out = _coerce_scalar(field.type, value, path)
    if field.choices is not None and out not in field.choices:
        raise SchemaError(path, f"must be one of {list(field.choices)}, got {out!r}")
    return out


def _normalize(schema: dict, raw: dict, path: str) -> dict:
    if not isinstance(raw, dict):
        raise SchemaError(path or "<root>", f"expected a mapping, got {raw!r}")
    unknown = set(raw) - set(schema)
    if unknown:
        raise SchemaError(
            f"{path + '.' if path else ''}{sorted(unknown)[0]}",
            "unknown key" if path else "unknown section",
        )
    out: dict[str, Any] = {}
    for key, spec in schema.items():
        sub_path = f"{path}.{key}" if path else key
        if spec is None:  # free-form section
            value = raw.get(key)
            if value is not None and not isinstance(value, dict):
                raise SchemaError(sub_path, "must be a mapping")
            out[key] = copy.deepcopy(value) if value else {}
        elif isinstance(spec, dict):
            out[key] = _normalize(spec, raw.get(key) or {}, sub_path)
        else:
            if key not in raw or raw[key] is None and not spec.nullable:
                if spec.default is _REQUIRED:
                    raise SchemaError(sub_path, "required key missing")
                out[key] = copy.deepcopy(spec.default)
            else:
                out[key] = _coerce(spec, raw[key], sub_path)
    return out


def _apply_derived_defaults(data: dict) -> None:
    epoch = data["dataset"]["epoch"]
    if epoch["stride"] is None:
        epoch["stride"] = epoch["window"]
    if data["task"]["criterion"] is None:
        data["task"]["criterion"] = (
            "cross_entropy" if data["task"]["type"] == "classification" else "mse"
        )


def _check_yaml_subset(text: str) -> None:
    documents = 0
    try:
        for event in yaml.parse(text, Loader=yaml.SafeLoader):
            if isinstance(event, yaml.DocumentStartEvent):
                documents += 1
                if documents > 1:
                    raise ConfigSyntaxError("multi-document configs are not supported")
            if isinstance(event, yaml.AliasEvent):
                raise ConfigSyntaxError("YAML aliases are not supported")
            if getattr(event, "anchor", None):
                raise ConfigSyntaxError("YAML anchors are not supported")
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise ConfigSyntaxError(str(getattr(exc, "problem", exc)),
                                    mark.line + 1, mark.column + 1) from exc
        raise ConfigSyntaxError(str(exc)) from exc


class ExperimentConfig:
    """Normalized seven-section configuration with typed access."""

    def __init__(self, data: dict):
        self._data = data

    def __getitem__(self, section: str) -> dict:
        return self._data[section]

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentConfig) and self._data == other._data

    def __repr__(self) -> str:
        return f"ExperimentConfig(seed={self._data['common']['seed']})"

    @property
    def data(self) -> dict:
        return self._data

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig(copy.deepcopy(self._data))

    def get(self, path: str):
        node = self._data
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                raise UnknownKey(path)
            node = node[part]
        return node

    def to_yaml(self) -> str:
        return yaml.safe_dump(self._data, sort_keys=False, default_flow_style=False)


def parse_config(text: str) -> ExperimentConfig:
    """Parse config text into a typed, defaulted :class:`ExperimentConfig`."""
    _check_yaml_subset(text)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            raise ConfigSyntaxError(str(getattr(exc, "problem", exc)),
                                    mark.line + 1, mark.column + 1) from exc
        raise ConfigSyntaxError(str(exc)) from exc
    if raw is None:
        raw = {}
    data = _normalize(SCHEMA, raw, "")
    _apply_derived_defaults(data)
    return ExperimentConfig(data)


# --- overrides ------------------------------------------------------------------


@dataclass(frozen=True)
class Override:
    """One dot-path assignment from the command line."""

    path: str
    value: Any

    @classmethod
    def parse(cls, text: str) -> "Override":
        if "=" not in text:
            raise TypeMismatch(text, "overrides take the form key.path=value")
        path, _, literal = text.partition("=")
        return cls(path.strip(), parse_override_value(literal))


def parse_override_value(text: str):
    """Parse an override literal with the config's scalar rules.

    Comma-separated text becomes a list of scalars; flow-style YAML lists
    and maps are parsed whole.
    """
    t = text.strip()
    if t.startswith(("[", "{")):
        return yaml.safe_load(t)
    if "," in t:
        return [yaml.safe_load(part.strip()) for part in t.split(",")]
    return yaml.safe_load(t) if t else ""


def _schema_field(path: str):
    node: Any = SCHEMA
    for part in path.split("."):
        if isinstance(node, dict) and part in node:
            node = node[part]
        else:
            return None
    return node


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply overrides in order (later ones win) to a copy of the config.

    Each path must resolve to an existing key; sections themselves cannot
    be replaced wholesale.
    """
    out = config.copy()
    for ov in overrides:
        if isinstance(ov, str):
            ov = Override.parse(ov)
        parts = ov.path.split(".")
        node = out.data
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise UnknownKey(ov.path)
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise UnknownKey(ov.path)
        field = _schema_field(ov.path)
        if isinstance(field, dict):
            raise TypeMismatch(ov.path, "cannot override a whole section; set its keys")
        if isinstance(field, _Field):
            try:
                node[leaf] = _coerce(field, ov.value, ov.path)
            except SchemaError as exc:
                raise TypeMismatch(ov.path, exc.reason) from exc
        else:  # inside the free-form distributed section
            node[leaf] = ov.value
    _apply_derived_defaults(out.data)
    return out


# --- validation -----------------------------------------------------------------


@dataclass(frozen=True)
class ValidationIssue:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


def _known_rate(dataset: dict) -> float | None:
    """Sampling rate after the offline pipeline, when statically known."""
    rate = dataset.get("sampling_rate")
    for spec in dataset.get("offline_transforms") or []:
        if isinstance(spec, dict) and spec.get("name") == "resample":
            rate = spec.get("target_rate", rate)
    return rate


def validate(config: ExperimentConfig) -> list[ValidationIssue]:
    """Cross-field checks; returns issues as data (empty list == valid)."""
    issues: list[ValidationIssue] = []
    say = lambda path, msg: issues.append(ValidationIssue(path, msg))
    cfg = config.data

    model = cfg["model"]
    if model["input_dim"] <= 0 or model["output_dim"] <= 0:
        say("model", "input_dim and output_dim must be positive")
    if model["kind"] == "mlp" and not model["hidden"]:
        say("model.hidden", "mlp requires a non-empty hidden list")
    if model["kind"] == "linear" and model["hidden"]:
        say("model.hidden", "linear model takes no hidden layers")
    if any(h <= 0 for h in model["hidden"]):
        say("model.hidden", "hidden sizes must be positive")

    opt = cfg["optimizer"]
    if opt["lr"] <= 0:
        say("optimizer.lr", "learning rate must be positive")
    if not 0 <= opt["momentum"] < 1:
        say("optimizer.momentum", "must lie in [0, 1)")
    for key in ("beta1", "beta2"):
        if not 0 <= opt[key] < 1:
            say(f"optimizer.{key}", "must lie in [0, 1)")
    if opt["eps"] <= 0:
        say("optimizer.eps", "must be positive")
    if opt["weight_decay"] < 0:
        say("optimizer.weight_decay", "must be >= 0")
    sched = opt["scheduler"]
    if sched["kind"] == "step" and (sched["step_size"] < 1 or sched["gamma"] <= 0):
        say("optimizer.scheduler", "step schedule needs step_size >= 1 and gamma > 0")
    if sched["kind"] == "cosine" and (sched["t_max"] < 1 or sched["lr_min"] < 0):
        say("optimizer.scheduler", "cosine schedule needs t_max >= 1 and lr_min >= 0")

    task = cfg["task"]
    expected_criterion = "cross_entropy" if task["type"] == "classification" else "mse"
    if task["criterion"] not in CRITERIA:
        say("task.criterion", f"unknown criterion {task['criterion']!r}")
    elif task["criterion"] != expected_criterion:
        say("task.criterion", f"{task['criterion']!r} incompatible with {task['type']} task")
    if not task["metrics"]:
        say("task.metrics", "at least one metric required")
    allowed = CLASSIFICATION_METRICS if task["type"] == "classification" else REGRESSION_METRICS
    for name in task["metrics"]:
        if name not in allowed:
            say("task.metrics", f"{name!r} is not a {task['type']} metric")
        elif name in BINARY_ONLY_METRICS and model["output_dim"] != 2:
            say("task.metrics", f"{name!r} requires binary classification (output_dim == 2)")

    ds = cfg["dataset"]
    if not ds["paths"]:
        say("dataset.paths", "at least one path required")
    if ds["format"] is not None and ds["format"] not in registered_formats():
        say("dataset.format", f"unknown format {ds['format']!r}")
    if ds["format"] == "CSV" and not ds["sampling_rate"]:
        say("dataset.sampling_rate", "required for CSV datasets")
    if ds["label_scheme"] == "regression":
        if task["type"] != "regression":
            say("dataset.label_scheme", "regression labels need task.type regression")
        if not ds["target_channels"]:
            say("dataset.target_channels", "required for regression labeling")
    elif task["type"] == "regression":
        say("task.type", "regression task needs dataset.label_scheme regression")

    epoch = ds["epoch"]
    if epoch["window"] <= 0 or epoch["stride"] <= 0:
        say("dataset.epoch", "window and stride must be positive")
    rate = _known_rate(ds)
    if rate and epoch["window"] > 0:
        for key in ("window", "stride"):
            if round(epoch[key] * rate) < 1:
                say(f"dataset.epoch.{key}", f"{epoch[key]} s rounds to zero samples at {rate} Hz")

    fr = ds["split"]["fractions"]
    if len(fr) != 3:
        say("dataset.split.fractions", "need exactly three fractions")
    elif any(f < 0 or f > 1 for f in fr):
        say("dataset.split.fractions", "each fraction must lie in [0, 1]")
    elif abs(sum(fr) - 1.0) > 1e-9:
        say("dataset.split.fractions", f"must sum to 1, got {sum(fr)!r}")

    for stage, key in (("offline", "offline_transforms"), ("online", "online_transforms")):
        try:
            compile_pipeline(ds[key], stage)
        except TyeeError as exc:
            say(f"dataset.{key}", str(exc))

    tr = cfg["trainer"]
    if tr["epochs"] < 0:
        say("trainer.epochs", "must be >= 0")
    if tr["batch_size"] < 1:
        say("trainer.batch_size", "must be >= 1")
    if tr["checkpoint_interval"] < 0:
        say("trainer.checkpoint_interval", "must be >= 0")

    return issues
