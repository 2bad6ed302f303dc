"""Flat ``section.key=value`` run configuration.

Resolution order: built-in defaults, then a config file, then ``QISEG_*``
environment variables, then command-line overrides. The resolved config is
written verbatim into every run directory.
"""
from __future__ import annotations

import hashlib
import os
import zlib
from pathlib import Path

import numpy as np

from .data import PhantomConfig
from .errors import ConfigError
from .protoseg import SegConfig
from .refine import RefineConfig
from .train import ModelShape, TrainConfig

ENV_PREFIX = "QISEG_"
CONFIG_FILE = "config.txt"

DEFAULTS = {
    "run.seed": 0,
    "run.workers": 1,
    "data.volumes": 20,
    "data.classes": 4,
    "data.size": 64,
    "data.depth": 32,
    "data.noise": 0.04,
    "data.bias": 0.05,
    "split.setting": 2,
    "split.fold": 0,
    "split.groups": "1,2;3,4",
    "model.depth": 32,
    "model.widths": (16, 32, 32),
    "model.hidden": 0,
    "seg.a": 20.0,
    "seg.alpha": 0.8,
    "seg.paths": "dual",
    "seg.threshold": "adaptive",
    "seg.per_path_threshold": False,
    "seg.t_init": -10.0,
    "refine.v": 0.01,
    "refine.n_iters": 7,
    "refine.enabled": True,
    "refine.replace_convention": "foreground",
    "train.lr0": 0.001,
    "train.decay": 0.98,
    "train.decay_every": 1000,
    "train.iters": 2000,
    "train.align": True,
    "train.optimizer": "sgd",
    "train.momentum": 0.0,
    "train.ckpt_every": 500,
    "sv.k": 50,
    "sv.compactness": 0.1,
    "sv.min_size": 100,
    "sv.seed": 0,
    "eval.max_n": 10,
    "eval.alphas": (0.2, 0.4, 0.5, 0.6, 0.8, 0.9),
}
# keys that do not change any result
VOLATILE = {"run.workers"}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse(key: str, raw):
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(text)
            return low in _TRUE
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return text


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def env_key(key: str) -> str:
    return ENV_PREFIX + key.replace(".", "_").upper()


class RunConfig:
    """Resolved configuration; values are typed like their defaults."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, raw in (values or {}).items():
            self.set(key, raw)

    def set(self, key: str, raw) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, raw)

    def __getitem__(self, key):
        return self.values[key]

    def updated(self, overrides: dict) -> "RunConfig":
        out = RunConfig(self.values)
        for key, raw in overrides.items():
            if raw is not None:
                out.set(key, raw)
        return out

    # -- serialization ------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{k}={_render(self.values[k])}\n" for k in sorted(self.values))

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "RunConfig":
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
            values[key.strip()] = val
        return cls(values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), str(path))

    def write(self, directory) -> Path:
        path = Path(directory) / CONFIG_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    def fingerprint(self) -> str:
        stable = "".join(f"{k}={_render(self.values[k])}\n" for k in sorted(self.values)
                         if k not in VOLATILE)
        return hashlib.sha256(stable.encode()).hexdigest()[:16]

    # -- seeds --------------------------------------------------------------

    def derive_seed(self, consumer: str) -> int:
        """Independent 32-bit seed for a named consumer of the root seed."""
        ss = np.random.SeedSequence([self.values["run.seed"], zlib.crc32(consumer.encode())])
        return int(ss.generate_state(1)[0])

    # -- module configs -----------------------------------------------------

    def seg_config(self) -> SegConfig:
        v = self.values
        return SegConfig(a=v["seg.a"], alpha=v["seg.alpha"], paths=v["seg.paths"],
                         threshold=v["seg.threshold"],
                         per_path_threshold=v["seg.per_path_threshold"], t_init=v["seg.t_init"])

    def refine_config(self) -> RefineConfig:
        v = self.values
        return RefineConfig(v=v["refine.v"], n_iters=v["refine.n_iters"],
                            enabled=v["refine.enabled"],
                            replace_convention=v["refine.replace_convention"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(lr0=v["train.lr0"], decay=v["train.decay"],
                           decay_every=v["train.decay_every"], iters=v["train.iters"],
                           seed=self.derive_seed("train"), align=v["train.align"],
                           optimizer=v["train.optimizer"], momentum=v["train.momentum"],
                           ckpt_every=v["train.ckpt_every"], sv_k=v["sv.k"],
                           sv_compactness=v["sv.compactness"], sv_min_size=v["sv.min_size"],
                           sv_seed=v["sv.seed"])

    def model_shape(self) -> ModelShape:
        v = self.values
        return ModelShape(depth=v["model.depth"], widths=v["model.widths"], hidden=v["model.hidden"])

    def phantom_config(self) -> PhantomConfig:
        v = self.values
        base = PhantomConfig()
        if v["data.classes"] != len(base.classes):
            raise ConfigError(f"data.classes must be {len(base.classes)} (the built-in organ set), "
                              f"got {v['data.classes']}")
        return PhantomConfig(depth=v["data.depth"], size=v["data.size"], noise=v["data.noise"],
                             bias=v["data.bias"])

    def groups(self):
        text = self.values["split.groups"].strip()
        if not text:
            return None
        try:
            return tuple(tuple(int(c) for c in g.split(",")) for g in text.split(";"))
        except ValueError as exc:
            raise ConfigError(f"split.groups: expected '1,2;3,4' style, got {text!r}") from exc


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    lookup = {env_key(k): k for k in DEFAULTS}
    return {lookup[name]: val for name, val in environ.items() if name in lookup}


def resolve(config_file=None, overrides: dict | None = None, environ=None) -> RunConfig:
    cfg = RunConfig.from_file(config_file) if config_file else RunConfig()
    cfg = cfg.updated(env_overrides(environ))
    return cfg.updated(overrides or {})
