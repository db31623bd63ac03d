"""Run configuration document shared by every CLI subcommand."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .degrade import MixtureConfig
from .errors import ConfigError
from .flow import FieldToggles, SolverSettings
from .nn import ArchConfig
from .train import TrainConfig

SECTIONS = ("arch", "train", "mix", "solver", "toggles")


def _build(cls, d, what):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a JSON object")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {what} keys {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {what} section: {exc}") from exc


@dataclass
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mix: MixtureConfig = field(default_factory=MixtureConfig)

    @property
    def solver(self) -> SolverSettings:
        return self.train.solver

    @property
    def toggles(self) -> FieldToggles:
        return self.train.toggles

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        solver = train.pop("solver")
        toggles = train.pop("toggles")
        return {"arch": self.arch.to_dict(), "train": train, "mix": self.mix.to_dict(), "solver": solver, "toggles": toggles}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        arch = _build(ArchConfig, d.get("arch", {}), "arch")
        train_d = dict(d.get("train", {}))
        if "solver" in train_d or "toggles" in train_d:
            raise ConfigError("solver and toggles are top-level sections, not train keys")
        solver = _build(SolverSettings, d.get("solver", {}), "solver")
        tog = d.get("toggles", {})
        toggles = FieldToggles.parse(tog) if isinstance(tog, str) else _build(FieldToggles, tog, "toggles")
        known = set(TrainConfig.__dataclass_fields__) - {"solver", "toggles"}
        unknown = set(train_d) - known
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}")
        train = TrainConfig(**train_d, solver=solver, toggles=toggles)
        mix = MixtureConfig.from_dict(d.get("mix", {}))
        return cls(arch=arch, train=train, mix=mix)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def with_overrides(self, **kw) -> RunConfig:
        """Apply non-None flag overrides; keys are ``section.field`` with dots as ``__``."""
        arch, train, solver, toggles = {}, {}, {}, None
        for key, value in kw.items():
            if value is None:
                continue
            section, name = key.split("__", 1)
            if section == "arch":
                arch[name] = value
            elif section == "train":
                train[name] = value
            elif section == "solver":
                solver[name] = value
            elif section == "toggles":
                toggles = value if isinstance(value, FieldToggles) else FieldToggles.parse(value)
            else:
                raise ConfigError(f"unknown override section {section!r}")
        new_solver = replace(self.train.solver, **solver)
        new_train = replace(self.train, **train, solver=new_solver, toggles=toggles or self.train.toggles)
        return RunConfig(arch=replace(self.arch, **arch), train=new_train, mix=self.mix)
