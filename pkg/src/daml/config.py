"""Run configuration: one JSON file selects every knob of a run.

Unknown keys are rejected everywhere (a typo must fail loudly, not silently
fall back to a default).  The canonical serialization (sorted keys, fixed
separators) feeds the config hash stored in model files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .adaptloss import LossNetConfig
from .metalearn import MetaConfig
from .policy import PolicyConfig
from .sim import SimConfig

METHODS = ("daml_temporal", "daml_linear", "contextual", "recurrent")
ADAPTIVE_METHODS = ("daml_temporal", "daml_linear")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_train_tasks: int = 60
    n_heldout_tasks: int = 20
    n_human_per_task: int = 2
    n_robot_per_task: int = 2

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be positive")


@dataclass(frozen=True)
class RunConfig:
    method: str = "daml_temporal"
    sim: SimConfig = field(default_factory=SimConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    loss_net: LossNetConfig = field(default_factory=LossNetConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; "
                              f"expected one of {', '.join(METHODS)}")
        if self.policy.image_hw != self.sim.image_hw:
            raise ConfigError("policy.image_hw must match sim.image_hw")
        if (self.method == "daml_temporal"
                and self.meta.demo_subsample < self.loss_net.min_length):
            raise ConfigError("meta.demo_subsample is below the temporal "
                              "loss minimum sequence length")


_SECTIONS = {"sim": SimConfig, "policy": PolicyConfig, "loss_net": LossNetConfig,
             "meta": MetaConfig, "data": DataConfig}


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = known[name].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("top level: expected an object")
    unknown = set(d) - set(_SECTIONS) - {"method"}
    if unknown:
        raise ConfigError(f"top level: unknown keys {sorted(unknown)}")
    kwargs = {}
    if "method" in d:
        kwargs["method"] = d["method"]
    for name, cls in _SECTIONS.items():
        if name in d:
            kwargs[name] = _build(cls, d[name], name)
    return RunConfig(**kwargs)


def load_run_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def config_to_dict(rc: RunConfig) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj

    return plain(rc)


def canonical_json(rc: RunConfig) -> str:
    return json.dumps(config_to_dict(rc), sort_keys=True, separators=(",", ":"))


def config_hash(rc: RunConfig) -> str:
    return hashlib.sha256(canonical_json(rc).encode("utf-8")).hexdigest()


def replace_method(rc: RunConfig, method: str) -> RunConfig:
    return dataclasses.replace(rc, method=method)
