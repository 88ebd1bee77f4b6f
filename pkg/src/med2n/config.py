"""Run configuration: YAML/JSON file + named profile + ``--set key=value`` overrides."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .data import SyntheticSpec
from .errors import ConfigError
from .trainer import LossWeights, TrainConfig


@dataclass
class EvalConfig:
    n_way: int = 5
    k_shot: int = 5
    m_query: int = 15
    episodes: int = 200

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if v < 1:
                raise ConfigError(f"eval.{k} must be positive, got {v}")


@dataclass
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.data.validate()
        self.train.validate()
        self.eval.validate()
        t, e, d = self.train, self.eval, self.data
        if t.n_way > d.source_train_classes or t.n_way > d.target_aux_classes:
            raise ConfigError(f"train.n_way={t.n_way} exceeds a training split's class count")
        if t.k_shot + t.m_query > d.source_train_images:
            raise ConfigError(f"train K+M = {t.k_shot + t.m_query} exceeds source_train_images={d.source_train_images}")
        if t.k_shot > d.target_aux_images:
            raise ConfigError(f"train.k_shot={t.k_shot} exceeds target_aux_images={d.target_aux_images}")
        for split in ("target_test", "source_test"):
            if e.n_way > getattr(d, f"{split}_classes"):
                raise ConfigError(f"eval.n_way={e.n_way} exceeds {split}_classes")
            if e.k_shot + e.m_query > getattr(d, f"{split}_images"):
                raise ConfigError(f"eval K+M = {e.k_shot + e.m_query} exceeds {split}_images="
                                  f"{getattr(d, f'{split}_images')}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# Named starting points. "desk" is the full desk-scale budget; "quick" is the
# reduced budget the multi-seed acceptance runs use on one CPU core.
PROFILES: dict[str, dict] = {
    "desk": {},
    "quick": {
        "data": {"image_size": 16, "source_train_images": 100},
        "train": {"channels": [16, 32, 64, 64], "m_query": 5, "pretrain_epochs": 6,
                  "teacher_epochs": 6, "student_epochs": 8, "mbase_epochs": 8, "episodes_per_epoch": 50},
        "eval": {"episodes": 200},
    },
    "smoke": {
        "data": {"image_size": 16, "source_train_classes": 6, "target_aux_classes": 5, "target_test_classes": 5,
                 "source_test_classes": 5, "source_train_images": 12, "target_test_images": 8,
                 "source_test_images": 8},
        "train": {"channels": [4, 4, 8, 8], "m_query": 2, "k_shot": 1, "pretrain_epochs": 1,
                  "teacher_epochs": 1, "student_epochs": 1, "mbase_epochs": 1, "episodes_per_epoch": 2},
        "eval": {"episodes": 4, "k_shot": 1, "m_query": 3},
    },
}


def _merge(base: dict, patch: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in patch.items():
        if k not in out:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where + k!r} must be a mapping")
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _build(cls, values: dict, where: str):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for k, v in values.items():
        f = hints[k]
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        if isinstance(default, bool) or default is None:
            pass
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(v, float) and v.is_integer():
                v = int(v)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{where}{k} must be an integer, got {v!r}")
        elif isinstance(default, float):
            if isinstance(v, str):
                # YAML 1.1 reads exponent forms without a dot (1e-3) as strings
                try:
                    v = float(v)
                except ValueError:
                    pass
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where}{k} must be a number, got {v!r}")
            v = float(v)
        kwargs[k] = v
    return cls(**kwargs)


def _defaults() -> dict:
    d = asdict(RunConfig())
    d["train"]["channels"] = list(d["train"]["channels"])
    return d


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    parts = key.strip().split(".")
    patch: dict = value
    for p in reversed(parts):
        patch = {p: patch}
    return patch


def load_config(path: str | Path | None = None, overrides: list[str] | tuple = (), profile: str | None = None,
                seed: int | None = None) -> RunConfig:
    """Merge defaults <- profile <- file <- overrides <- seed, then validate."""
    values = _defaults()
    if profile:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        values = _merge(values, PROFILES[profile])
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a mapping at top level")
        file_profile = loaded.pop("profile", None)
        if file_profile and not profile:
            if file_profile not in PROFILES:
                raise ConfigError(f"unknown profile {file_profile!r}; choose from {sorted(PROFILES)}")
            values = _merge(_defaults(), PROFILES[file_profile])
        values = _merge(values, loaded)
    for item in overrides:
        values = _merge(values, parse_override(item))
    if seed is not None:
        values["train"]["seed"] = seed
        values["data"]["seed"] = seed
    try:
        cfg = RunConfig(
            data=_build(SyntheticSpec, values["data"], "data."),
            train=_build(TrainConfig, {k: v for k, v in values["train"].items() if k != "weights"}, "train."),
            eval=_build(EvalConfig, values["eval"], "eval."),
        )
        cfg.train.weights = _build(LossWeights, values["train"]["weights"], "train.weights.")
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.data.source_bg_freq = tuple(cfg.data.source_bg_freq)
    cfg.data.target_bg_freq = tuple(cfg.data.target_bg_freq)
    cfg.data.target_texture_freq = tuple(cfg.data.target_texture_freq)
    return cfg.validate()
