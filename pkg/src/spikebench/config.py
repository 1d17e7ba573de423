"""INI-style run configuration shared by every pipeline stage.

Example::

    [run]
    seed = 7
    out_dir = out

    [train]
    epochs = 50

    [neuron]
    vth_mantissa = 512

Unknown sections or keys are rejected; each section is validated by the
dataclass that owns it.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .bench import EnergyModel
from .convert import ConversionConfig
from .data import AugmentConfig
from .errors import ConfigError
from .network import NeuronConfig
from .nn.train import TrainConfig
from .partition import CoreBudget

RUN_DEFAULTS = {"seed": 0, "out_dir": "", "jobs": 1}
DATA_DEFAULTS = {
    "train": "",
    "test": "",
    "num_classes": 0,
    "val_fraction": 0.1,
    "subset": 0,
    "edge_threshold": 0.8,
}
CONVERT_EXTRA = {"calibration_size": 500}
AUGMENT_EXTRA = {"enabled": False}


@dataclass
class RunConfig:
    run: dict = field(default_factory=lambda: dict(RUN_DEFAULTS))
    data: dict = field(default_factory=lambda: dict(DATA_DEFAULTS))
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig | None = None
    convert: ConversionConfig = field(default_factory=ConversionConfig)
    calibration_size: int = CONVERT_EXTRA["calibration_size"]
    budget: CoreBudget = field(default_factory=CoreBudget)
    energy: EnergyModel = field(default_factory=EnergyModel)
    explicit: frozenset = frozenset()  # (section, key) pairs set in the source file

    def is_set(self, section: str, key: str) -> bool:
        return (section, key) in self.explicit

    @property
    def seed(self) -> int:
        return int(self.run["seed"])

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, augment=self.augment, seed=self.seed)

    def as_dict(self) -> dict:
        def plain(obj):
            return {k: v for k, v in dataclasses.asdict(obj).items() if not isinstance(v, dict)}

        out = {
            "run": dict(self.run),
            "data": dict(self.data),
            "train": {k: v for k, v in plain(self.train).items() if k not in ("augment", "seed")},
            "convert": {**{k: v for k, v in plain(self.convert).items() if k != "neuron"},
                        "calibration_size": self.calibration_size},
            "neuron": dataclasses.asdict(self.convert.neuron),
            "budget": dataclasses.asdict(self.budget),
            "energy": dataclasses.asdict(self.energy),
        }
        aug = dataclasses.asdict(self.augment) if self.augment else {}
        out["augment"] = {"enabled": self.augment is not None, **aug}
        return out

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(section, key, raw, default):
    try:
        if isinstance(default, bool):
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _defaults_of(cls, skip=()):
    return {f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
            for f in dataclasses.fields(cls) if f.name not in skip}


def _section(parser, name, defaults):
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in defaults:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        out[key] = _coerce(name, key, raw, defaults[key])
    return out


def _build(cls, section, values):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


SECTIONS = ("run", "data", "train", "augment", "convert", "neuron", "budget", "energy")


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")

    run = {**RUN_DEFAULTS, **_section(parser, "run", RUN_DEFAULTS)}
    data = {**DATA_DEFAULTS, **_section(parser, "data", DATA_DEFAULTS)}
    if not 0.0 <= data["edge_threshold"] <= 1.0:
        raise ConfigError("[data] edge_threshold must be in [0, 1]")
    if not 0.0 < data["val_fraction"] < 1.0:
        raise ConfigError("[data] val_fraction must be in (0, 1)")
    if run["jobs"] < 1:
        raise ConfigError("[run] jobs must be at least 1")

    train = _build(TrainConfig, "train", _section(parser, "train", _defaults_of(TrainConfig, ("augment", "seed"))))
    aug_vals = _section(parser, "augment", {**_defaults_of(AugmentConfig), **AUGMENT_EXTRA})
    enabled = aug_vals.pop("enabled", False)
    augment = _build(AugmentConfig, "augment", aug_vals) if enabled else None

    neuron = _build(NeuronConfig, "neuron", _section(parser, "neuron", _defaults_of(NeuronConfig)))
    conv_vals = _section(parser, "convert", {**_defaults_of(ConversionConfig, ("neuron",)), **CONVERT_EXTRA})
    calib = conv_vals.pop("calibration_size", CONVERT_EXTRA["calibration_size"])
    if calib < 1:
        raise ConfigError("[convert] calibration_size must be at least 1")
    convert = _build(ConversionConfig, "convert", {**conv_vals, "neuron": neuron})

    budget = _build(CoreBudget, "budget", _section(parser, "budget", _defaults_of(CoreBudget)))
    energy = _build(EnergyModel, "energy", _section(parser, "energy", _defaults_of(EnergyModel)))
    explicit = frozenset((sec, key) for sec in parser.sections() for key, _ in parser.items(sec))
    return RunConfig(run, data, train, augment, convert, calib, budget, energy, explicit)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name, values in cfg.as_dict().items():
        lines.append(f"[{name}]")
        for k, v in values.items():
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
