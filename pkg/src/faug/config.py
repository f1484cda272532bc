"""Experiment configuration: one YAML document, resolved into dataclasses.

Precedence is CLI flag > config file > built-in default. ``load_config("default")``
returns the annotated configuration shipped with the package.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .attacks import AttackConfig
from .data import DataSpec
from .errors import ConfigInvalid, FaugError
from .feature_aug import HookConfig
from .models import ARCHITECTURES, ModelConfig, TrainHyper

DEFAULT_NAME = "default"


class ConfigNotFound(FaugError, FileNotFoundError):
    pass


@dataclass(frozen=True)
class ModelEntry:
    id: str
    config: ModelConfig
    hyper: TrainHyper
    role: str = "zoo"  # "zoo" models form the transfer matrix; "victim" models are held out

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "architecture": self.config.architecture,
            "init_seed": self.config.init_seed,
            "role": self.role,
            "train": self.hyper.to_dict(),
        }


@dataclass
class ExperimentConfig:
    seed: int
    data_seed: int
    dataset: DataSpec
    models: list
    attack: AttackConfig
    hooks: dict
    sweeps: dict
    outputs: dict
    workspace: Path
    raw: dict = field(default_factory=dict)

    @property
    def zoo(self) -> list:
        return [m for m in self.models if m.role == "zoo"]

    @property
    def held_out(self) -> list:
        return [m for m in self.models if m.role == "victim"]

    @property
    def out_dir(self) -> Path:
        return self.workspace / self.outputs.get("dir", "out")

    def resolved(self) -> dict:
        """The fully resolved configuration as plain data (embedded in outputs)."""
        return {
            "seed": self.seed,
            "data_seed": self.data_seed,
            "dataset": {k: getattr(self.dataset, k) for k in self.dataset.__dataclass_fields__},
            "models": [m.to_dict() for m in self.models],
            "attack": self.attack.to_dict(),
            "hooks": {k: (v.to_dict() if v is not None else None) for k, v in self.hooks.items()},
            "sweeps": copy.deepcopy(self.sweeps),
            "outputs": dict(self.outputs),
        }


def default_config_text() -> str:
    return resources.files("faug").joinpath("configs/default.yaml").read_text()


def _read(path) -> tuple[dict, Path]:
    if str(path) == DEFAULT_NAME:
        return yaml.safe_load(default_config_text()), Path.cwd()
    p = Path(path)
    if not p.is_file():
        raise ConfigNotFound(f"config not found: {path}")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigInvalid(f"config is not valid YAML: {e}") from None
    return doc or {}, p.resolve().parent


def _models(entries) -> list:
    if not isinstance(entries, list) or not entries:
        raise ConfigInvalid("config needs a non-empty 'models' list")
    out, seen = [], set()
    for e in entries:
        e = dict(e)
        mid = str(e.pop("id", e.get("architecture")))
        if mid in seen:
            raise ConfigInvalid(f"duplicate model id {mid!r}")
        seen.add(mid)
        arch = e.pop("architecture", None)
        if arch not in ARCHITECTURES:
            raise ConfigInvalid(f"model {mid!r}: unknown architecture {arch!r}")
        role = e.pop("role", "zoo")
        if role not in ("zoo", "victim"):
            raise ConfigInvalid(f"model {mid!r}: role must be 'zoo' or 'victim'")
        try:
            hyper = TrainHyper.from_dict(e.pop("train", None))
        except TypeError as err:
            raise ConfigInvalid(f"model {mid!r}: {err}") from None
        mc = ModelConfig(arch, init_seed=int(e.pop("init_seed", 1)))
        if e:
            raise ConfigInvalid(f"model {mid!r}: unknown keys {sorted(e)}")
        out.append(ModelEntry(mid, mc, hyper, role))
    return out


def build_config(doc: dict, workspace: Path | None = None, seed: int | None = None) -> ExperimentConfig:
    doc = copy.deepcopy(doc or {})
    known = {"seed", "data_seed", "workspace", "dataset", "models", "attack", "hooks", "sweeps", "outputs"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigInvalid(f"unknown top-level keys: {sorted(unknown)}")
    try:
        dataset = DataSpec.from_dict(doc.get("dataset"))
        dataset.validate()
        attack = AttackConfig.from_dict(doc.get("attack"))
        models = _models(doc.get("models"))
        ids = {m.id for m in models}
        hooks = {}
        for mid, h in (doc.get("hooks") or {}).items():
            if mid not in ids:
                raise ConfigInvalid(f"hook override for unknown model {mid!r}")
            hooks[mid] = None if h is None else HookConfig.from_dict(h)
    except ConfigInvalid:
        raise
    except (FaugError, TypeError, ValueError) as e:
        raise ConfigInvalid(str(e)) from None
    root = Path(workspace or Path.cwd())
    ws = doc.get("workspace", ".")
    master = int(doc.get("seed", 0)) if seed is None else int(seed)
    if master < 0:
        raise ConfigInvalid("seed must be a non-negative integer")
    return ExperimentConfig(
        seed=master,
        data_seed=int(doc.get("data_seed", 1)),
        dataset=dataset,
        models=models,
        attack=attack,
        hooks=hooks,
        sweeps=doc.get("sweeps") or {},
        outputs=doc.get("outputs") or {"dir": "out", "formats": ["json"]},
        workspace=(root / ws).resolve(),
        raw=doc,
    )


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    doc, base = _read(path)
    if not isinstance(doc, dict):
        raise ConfigInvalid("config must be a key/value mapping")
    return build_config(doc, base, seed)
