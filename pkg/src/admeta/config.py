"""Run configuration: flat ``key = value`` files with typed defaults.

Every key has a default except ``source``, which picks the dataset kind
and must be stated. Unknown keys are rejected before any compute starts,
and the canonical echo of a parsed config round-trips through the parser
unchanged (checkpoints embed it for self-describing runs).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .adversarial import AttackConfig
from .errors import AdmetaError, ConfigError
from .metalearn import MetaConfig, TrainerKind
from .models import ModelSpec
from .tasks import SplitSpec, TaskSource, load_image_source, split_classes, synth_blob_source

__all__ = ["RunConfig", "parse_config_text"]

# key -> (kind, default); kind drives parsing and echo formatting.
_SCHEMA: dict[str, tuple[str, object]] = {
    "source": ("str", None),
    "trainer": ("str", "adml"),
    "model": ("str", "mlp"),
    "ways": ("int", 5),
    "shots": ("int", 5),
    "query_per_class": ("int", 15),
    "data_root": ("str", ""),
    "manifest": ("str", ""),
    "channels": ("int", 3),
    "height": ("int", 84),
    "width": ("int", 84),
    "synth_dim": ("int", 16),
    "synth_classes": ("int", 25),
    "synth_samples": ("int", 40),
    "synth_spread": ("float", 0.1),
    "train_classes": ("int", 20),
    "val_classes": ("int", 0),
    "test_classes": ("int", 5),
    "split_seed": ("int", 0),
    "hidden": ("ints", (32,)),
    "alpha1": ("float", 0.01),
    "alpha2": ("float", 0.01),
    "beta1": ("float", 0.001),
    "beta2": ("float", 0.001),
    "inner_steps_train": ("int", 5),
    "inner_steps_test": ("int", 10),
    "meta_batch": ("int", 4),
    "episodes": ("int", 2000),
    "order": ("str", "full"),
    "second_grad_at_updated": ("bool", False),
    "eps_train": ("float", 2.0),
    "clip": ("bool", True),
    "eps_test": ("floats", (2.0, 0.2)),
    "num_test_tasks": ("int", 600),
    "seed": ("int", 0),
    "checkpoint_every": ("int", 500),
    "out": ("str", "runs/out"),
}

_SOURCES = ("synth", "images")
_MODELS = ("mlp", "conv4")


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key/value pairs from config text; rejects unknown keys."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _parse_value(key: str, raw: str):
    kind, _ = _SCHEMA[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip()) if raw else ()
        if kind == "floats":
            return tuple(float(p) for p in raw.split(",") if p.strip()) if raw else ()
        return raw
    except ValueError as e:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {kind}") from e


def _format_value(key: str, value) -> str:
    kind, _ = _SCHEMA[key]
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "floats"):
        return ",".join(repr(v) if kind == "floats" else str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    source: str
    trainer: str
    model: str
    ways: int
    shots: int
    query_per_class: int
    data_root: str
    manifest: str
    channels: int
    height: int
    width: int
    synth_dim: int
    synth_classes: int
    synth_samples: int
    synth_spread: float
    train_classes: int
    val_classes: int
    test_classes: int
    split_seed: int
    hidden: tuple[int, ...]
    alpha1: float
    alpha2: float
    beta1: float
    beta2: float
    inner_steps_train: int
    inner_steps_test: int
    meta_batch: int
    episodes: int
    order: str
    second_grad_at_updated: bool
    eps_train: float
    clip: bool
    eps_test: tuple[float, ...]
    num_test_tasks: int
    seed: int
    checkpoint_every: int
    out: str

    def __post_init__(self):
        if self.source not in _SOURCES:
            raise ConfigError(f"source must be one of {_SOURCES}, got {self.source!r}")
        if self.model not in _MODELS:
            raise ConfigError(f"model must be one of {_MODELS}, got {self.model!r}")
        try:
            TrainerKind.from_name(self.trainer)
        except AdmetaError as e:
            raise ConfigError(str(e)) from e
        if self.source == "images" and not (self.data_root and self.manifest):
            raise ConfigError("images source needs data_root and manifest")

    @classmethod
    def from_items(cls, items: Mapping[str, str]) -> "RunConfig":
        values = {}
        for key, (kind, default) in _SCHEMA.items():
            if key in items:
                values[key] = _parse_value(key, items[key])
            elif default is None:
                raise ConfigError(f"required key {key!r} missing")
            else:
                values[key] = default
        return cls(**values)

    @classmethod
    def from_text(cls, text: str, overrides: Optional[Mapping[str, str]] = None) -> "RunConfig":
        items = parse_config_text(text)
        if overrides:
            for key, raw in overrides.items():
                if key not in _SCHEMA:
                    raise ConfigError(f"unknown override key {key!r}")
                items[key] = raw
        return cls.from_items(items)

    @classmethod
    def from_file(cls, path, overrides: Optional[Mapping[str, str]] = None) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_text(text, overrides)

    def echo(self) -> str:
        """Canonical serialization; parsing it reproduces this config."""
        lines = [
            f"{f.name} = {_format_value(f.name, getattr(self, f.name))}"
            for f in fields(self)
        ]
        return "\n".join(lines) + "\n"

    # -- derived objects ----------------------------------------------------

    def build_source(self) -> TaskSource:
        if self.source == "synth":
            return synth_blob_source(
                dim=self.synth_dim,
                classes=self.synth_classes,
                samples_per_class=self.synth_samples,
                spread=self.synth_spread,
                seed=self.split_seed,
            )
        return load_image_source(self.data_root, self.manifest)

    def build_splits(self, source: TaskSource):
        spec = SplitSpec(
            train=self.train_classes,
            val=self.val_classes,
            test=self.test_classes,
            seed=self.split_seed,
        )
        return split_classes(source, spec)

    def model_spec(self, geometry: tuple[int, ...]) -> ModelSpec:
        if self.model == "conv4":
            if len(geometry) != 3:
                raise ConfigError(f"conv4 needs 3-d samples, source has {geometry}")
            c, h, w = geometry
            return ModelSpec.conv4(ways=self.ways, channels=c, height=h, width=w)
        dim = int(np.prod(geometry))
        return ModelSpec.mlp(ways=self.ways, dim=dim, hidden=self.hidden)

    def attack_for(self, source: TaskSource, epsilon: Optional[float] = None) -> AttackConfig:
        return AttackConfig(
            epsilon=self.eps_train if epsilon is None else epsilon,
            value_range=source.value_range,
            clip=self.clip,
        )

    def meta_config(self, attack: AttackConfig) -> MetaConfig:
        return MetaConfig(
            alpha1=self.alpha1,
            alpha2=self.alpha2,
            beta1=self.beta1,
            beta2=self.beta2,
            inner_steps_train=self.inner_steps_train,
            inner_steps_test=self.inner_steps_test,
            meta_batch=self.meta_batch,
            order=self.order,
            attack=attack,
            episodes=self.episodes,
            shots=self.shots,
            query_per_class=self.query_per_class,
            second_grad_at_updated=self.second_grad_at_updated,
        )
