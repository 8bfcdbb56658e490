"""Experiment configuration: JSON in, fully resolved plan out.

Every unspecified field picks up the benchmark default (fine-tuning
lr=1e-3 / 10 epochs / batch 512, adaptation hyperparameters per method,
batch-size axis {64, 128, 256}, five seeds).  Unknown keys are rejected
with the JSON path of the offending key, so typos cannot silently fall
back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError
from ..shiftbench.suites import SuiteSpec
from ..tta import METHODS, AdapterConfig, ShotConfig, T3AConfig, TentConfig

DEFAULT_BATCH_SIZES = (64, 128, 256)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

_FINETUNE_DEFAULTS = {
    "lr": 1e-3,
    "weight_decay": 1e-4,
    "epochs": 10,
    "batch_size": 512,
    "hidden": 128,
    "dropout_rate": 0.1,
}

_ADAPTER_SECTIONS = {
    "tent": TentConfig,
    "shot": ShotConfig,
    "t3a": T3AConfig,
}

_ENCODER_KEYS = {"variant", "channels", "samples", "out_dim", "hidden",
                 "seed", "normalize_p95"}

_SUITE_KEYS = {f.name for f in dataclasses.fields(SuiteSpec)}

_TOP_KEYS = {"name", "base_seed", "output_dir", "suites", "datasets",
             "encoders", "methods", "batch_sizes", "seeds", "finetune",
             "adapters", "trace"}


def _reject_unknown(doc: dict, allowed, path: str):
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown config key at {path}.{key}")


@dataclass
class ExperimentPlan:
    name: str
    base_seed: int
    output_dir: str
    suites: list = field(default_factory=list)      # SuiteSpec
    datasets: list = field(default_factory=list)    # {name, source, target}
    encoders: list = field(default_factory=list)    # dict templates
    methods: tuple = tuple(METHODS)
    batch_sizes: tuple = DEFAULT_BATCH_SIZES
    seeds: tuple = DEFAULT_SEEDS
    finetune: dict = field(default_factory=lambda: dict(_FINETUNE_DEFAULTS))
    adapters: dict = field(default_factory=dict)    # method -> config dataclass
    trace: bool = False

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("methods list must not be empty")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r} (choose from {METHODS})")
        if not self.suites and not self.datasets:
            raise ConfigError("plan needs at least one suite or dataset")
        if not self.encoders:
            raise ConfigError("plan needs at least one encoder")
        if not self.batch_sizes or any(b < 1 for b in self.batch_sizes):
            raise ConfigError("batch_sizes must be positive")
        if not self.seeds:
            raise ConfigError("seeds list must not be empty")
        for section, cls in _ADAPTER_SECTIONS.items():
            self.adapters.setdefault(section, cls())

    @property
    def effective_methods(self) -> tuple:
        """no_tta always runs: it is the matched baseline of every cell."""
        rest = [m for m in self.methods if m != "no_tta"]
        return tuple(["no_tta"] + rest)

    def adapter_config(self, method: str, **overrides) -> AdapterConfig:
        kwargs = {"method": method}
        if method in _ADAPTER_SECTIONS:
            base = self.adapters[method]
            if overrides:
                base = dataclasses.replace(base, **overrides)
            kwargs[method] = base
        return AdapterConfig(**kwargs)

    def grid_size(self) -> int:
        n_data = len(self.suites) + len(self.datasets)
        return (n_data * len(self.encoders) * len(self.seeds)
                * len(self.batch_sizes) * len(self.effective_methods))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_seed": self.base_seed,
            "output_dir": self.output_dir,
            "suites": [s.to_dict() for s in self.suites],
            "datasets": list(self.datasets),
            "encoders": [dict(e) for e in self.encoders],
            "methods": list(self.methods),
            "batch_sizes": list(self.batch_sizes),
            "seeds": list(self.seeds),
            "finetune": dict(self.finetune),
            "adapters": {name: dataclasses.asdict(cfg)
                         for name, cfg in self.adapters.items()},
            "trace": self.trace,
        }


def _parse_suite(doc: dict, path: str) -> SuiteSpec:
    _reject_unknown(doc, _SUITE_KEYS, path)
    for required in ("name", "kind", "seed"):
        if required not in doc:
            raise ConfigError(f"missing {path}.{required}")
    kwargs = dict(doc)
    for tuple_key in ("source_priors", "target_priors", "drop_channels",
                      "channel_gain", "channel_offset"):
        if isinstance(kwargs.get(tuple_key), (list, tuple)):
            kwargs[tuple_key] = tuple(kwargs[tuple_key])
    spec = SuiteSpec(**kwargs)
    spec.validate()
    return spec


def plan_from_dict(doc: dict) -> ExperimentPlan:
    _reject_unknown(doc, _TOP_KEYS, "$")
    suites = [_parse_suite(s, f"$.suites[{i}]")
              for i, s in enumerate(doc.get("suites", []))]
    datasets = []
    for i, d in enumerate(doc.get("datasets", [])):
        _reject_unknown(d, {"name", "source", "target"}, f"$.datasets[{i}]")
        for required in ("name", "source", "target"):
            if required not in d:
                raise ConfigError(f"missing $.datasets[{i}].{required}")
        datasets.append(dict(d))
    encoders = []
    for i, e in enumerate(doc.get("encoders", [])):
        _reject_unknown(e, _ENCODER_KEYS, f"$.encoders[{i}]")
        if "variant" not in e:
            raise ConfigError(f"missing $.encoders[{i}].variant")
        encoders.append(dict(e))
    finetune = dict(_FINETUNE_DEFAULTS)
    ft_doc = doc.get("finetune", {})
    _reject_unknown(ft_doc, set(_FINETUNE_DEFAULTS), "$.finetune")
    finetune.update(ft_doc)
    adapters = {}
    ad_doc = doc.get("adapters", {})
    _reject_unknown(ad_doc, set(_ADAPTER_SECTIONS), "$.adapters")
    for section, cls in _ADAPTER_SECTIONS.items():
        sec_doc = ad_doc.get(section, {})
        allowed = {f.name for f in dataclasses.fields(cls)}
        _reject_unknown(sec_doc, allowed, f"$.adapters.{section}")
        adapters[section] = cls(**sec_doc)
    methods = doc.get("methods", list(METHODS))
    if methods is not None and len(methods) == 0:
        raise ConfigError("empty method list at $.methods")
    return ExperimentPlan(
        name=doc.get("name", "experiment"),
        base_seed=int(doc.get("base_seed", 0)),
        output_dir=doc.get("output_dir", "runs"),
        suites=suites,
        datasets=datasets,
        encoders=encoders,
        methods=tuple(methods),
        batch_sizes=tuple(doc.get("batch_sizes", DEFAULT_BATCH_SIZES)),
        seeds=tuple(doc.get("seeds", DEFAULT_SEEDS)),
        finetune=finetune,
        adapters=adapters,
        trace=bool(doc.get("trace", False)),
    )


def load_config(path) -> ExperimentPlan:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return plan_from_dict(doc)
