"""Flat ``key = value`` run configuration covering model, loss, scene and
trainer settings.

Every key is declared once in ``REGISTRY`` with its type, default and
allowed range; unknown keys and out-of-range values are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

from .model import SCHEMES, ConfigError, ModelConfig
from .synth import SceneSpec
from .training import TrainConfig


@dataclass(frozen=True)
class Key:
    name: str
    type: type
    default: object
    section: str  # "model" | "scene" | "train"
    field: str
    lo: float | None = None
    hi: float | None = None
    choices: tuple = ()
    help: str = ""

    def parse(self, text):
        text = text.strip()
        if self.type is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                value = True
            elif low in ("0", "false", "no", "off"):
                value = False
            else:
                raise ConfigError(f"{self.name}: expected a boolean, got {text!r}")
        else:
            try:
                value = self.type(text)
            except ValueError:
                raise ConfigError(f"{self.name}: expected {self.type.__name__}, got {text!r}") from None
        return self.check(value)

    def check(self, value):
        if self.choices and value not in self.choices:
            raise ConfigError(f"{self.name}: {value!r} not in {list(self.choices)}")
        if self.lo is not None and value < self.lo:
            raise ConfigError(f"{self.name}: {value} below minimum {self.lo}")
        if self.hi is not None and value > self.hi:
            raise ConfigError(f"{self.name}: {value} above maximum {self.hi}")
        return value


def _k(name, type_, default, section, field=None, lo=None, hi=None, choices=(), help=""):
    return Key(name, type_, default, section, field or name, lo, hi, tuple(choices), help)


REGISTRY = {k.name: k for k in [
    # network
    _k("scheme", str, "G", "model", choices=sorted(SCHEMES), help="ablation scheme A-G"),
    _k("m", int, 4, "model", lo=1, hi=8, help="encoder/decoder levels"),
    _k("k", int, 3, "model", lo=1, hi=11, help="kernel size (odd)"),
    _k("r", int, 4, "model", lo=1, hi=64, help="attention expansion ratio"),
    _k("c0", int, 8, "model", lo=1, hi=512, help="channels after the first level"),
    _k("height", int, 64, "model", lo=16, hi=4096),
    _k("width", int, 64, "model", lo=16, hi=4096),
    _k("max_depth", float, 10.0, "model", lo=1e-3, hi=65.535, help="depth scale in metres"),
    _k("prefill_channels", int, 8, "model", lo=1, hi=512),
    _k("slope", float, 0.2, "model", lo=0.0, hi=1.0, help="leaky ReLU slope"),
    _k("dtype", str, "float32", "model", choices=("float32", "float64")),
    _k("init_seed", int, 0, "model", lo=0, hi=2**63 - 1),
    # loss
    _k("lambda_delta", float, 0.7, "model", lo=0.0, hi=1e6),
    _k("lambda_p", float, 0.3, "model", lo=0.0, hi=1e6),
    _k("huber_delta", float, 1.0, "model", lo=1e-6, hi=1e6),
    # synthetic scenes
    _k("data_seed", int, 0, "scene", "seed", lo=0, hi=2**63 - 1),
    _k("min_objects", int, 2, "scene", lo=0, hi=100),
    _k("max_objects", int, 6, "scene", lo=0, hi=100),
    _k("depth_min", float, 0.5, "scene", lo=1e-3, hi=65.535),
    _k("depth_max", float, 10.0, "scene", lo=1e-3, hi=65.535),
    _k("hole_fraction", float, 0.2, "scene", lo=0.0, hi=0.9),
    _k("speckle_weight", float, 0.2, "scene", lo=0.0, hi=1e6),
    _k("edge_shadow_weight", float, 0.3, "scene", lo=0.0, hi=1e6),
    _k("blob_weight", float, 0.5, "scene", lo=0.0, hi=1e6),
    _k("texture", float, 0.15, "scene", lo=0.0, hi=1.0),
    _k("edge_threshold", float, 0.25, "scene", lo=0.0, hi=100.0),
    _k("shadow_radius", int, 2, "scene", lo=0, hi=64),
    # trainer
    _k("epochs", int, 10, "train", lo=0, hi=10**6),
    _k("batch", int, 8, "train", lo=1, hi=4096),
    _k("lr", float, 1e-2, "train", lo=0.0, hi=10.0),
    _k("momentum", float, 0.95, "train", lo=0.0, hi=1.0),
    _k("weight_decay", float, 1e-4, "train", lo=0.0, hi=1.0),
    _k("patience", int, 5, "train", lo=1, hi=10**6),
    _k("factor", float, 0.3, "train", lo=0.0, hi=1.0),
    _k("min_lr", float, 1e-4, "train", lo=0.0, hi=10.0),
    _k("threshold", float, 1e-4, "train", lo=0.0, hi=1.0),
    _k("train_seed", int, 0, "train", "seed", lo=0, hi=2**63 - 1),
    _k("val_every", int, 1, "train", lo=1, hi=10**6),
    _k("crop_resize", bool, False, "train"),
    _k("max_steps", int, 0, "train", lo=0, hi=10**9),
]}


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    def __init__(self, values=None):
        self.values = {name: key.default for name, key in REGISTRY.items()}
        for name, value in (values or {}).items():
            self.set(name, value)

    def set(self, name, value):
        key = REGISTRY.get(name)
        if key is None:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(value, str):
            value = key.parse(value)
        elif key.type is float and isinstance(value, int) and not isinstance(value, bool):
            value = key.check(float(value))
        elif not isinstance(value, key.type) or (key.type is int and isinstance(value, bool)):
            raise ConfigError(f"{name}: expected {key.type.__name__}, got {value!r}")
        else:
            value = key.check(value)
        self.values[name] = value

    def __getitem__(self, name):
        return self.values[name]

    @classmethod
    def parse(cls, text, source="<config>"):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            name, value = (s.strip() for s in line.split("=", 1))
            try:
                cfg.set(name, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read(), str(path))

    def dumps(self):
        """Every key with its resolved value, grouped by section."""
        out = []
        for section in ("model", "scene", "train"):
            out.append(f"# {section}")
            for name, key in REGISTRY.items():
                if key.section == section:
                    out.append(f"{name} = {_format(self.values[name])}")
        return "\n".join(out) + "\n"

    def _section(self, section):
        return {key.field: self.values[name] for name, key in REGISTRY.items() if key.section == section}

    def model_config(self):
        return ModelConfig(**self._section("model")).validate()

    def scene_spec(self):
        return SceneSpec(height=self["height"], width=self["width"], **self._section("scene"))

    def train_config(self):
        return TrainConfig(**self._section("train"))

    def validate(self):
        self.model_config()
        try:
            self.scene_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self["min_lr"] > self["lr"]:
            raise ConfigError("min_lr must not exceed lr")
        return self


def _check_registry_covers_dataclasses():
    covered = {(k.section, k.field) for k in REGISTRY.values()}
    for section, cls, skip in (("model", ModelConfig, ()), ("scene", SceneSpec, ("height", "width")),
                               ("train", TrainConfig, ())):
        for f in fields(cls):
            if f.name not in skip and (section, f.name) not in covered:
                raise AssertionError(f"config registry misses {section}.{f.name}")


_check_registry_covers_dataclasses()
