"""Plain ``key=value`` run configuration.

One assignment per line; ``#`` starts a comment. Unknown keys, duplicate keys
and unparsable values are rejected. Every run writes the fully resolved
configuration (defaults included) next to its outputs, which is enough to
reproduce the run.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigError, MissingInputError
from .nn.models import ClassifierSpec, GeneratorSpec
from .objective import L1_MODES, LossConfig
from .phantom import PhantomSpec
from .relevance import PAINT_MODES, RelevanceConfig
from .slic3d import SlicConfig

SEED_ENV = "RELEVANCE_FORGE_SEED"
SCORE_DIRECTIONS = ("low-mask-is-relevant", "high-mask-is-relevant")
RESOLVED_NAME = "config.resolved"

GEN, CLF, GNR, REL, EVA = "gen-data", "train-classifier", "train-generator", "relevance", "evaluate"


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _choice(options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


def _fmt(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    used_by: tuple[str, ...]
    help: str


_DATA = (GEN, CLF, GNR, REL, EVA)
KEYS = [
    Key("seed", int, 0, (GEN, CLF, GNR), "master seed (overridden by $" + SEED_ENV + ")"),
    Key("count", int, 200, (GEN,), "number of phantom cases"),
    Key("dims", _int_tuple, (32, 32, 32), (GEN,), "phantom extents D,H,W"),
    Key("channels", int, 2, (GEN,), "channels per phantom"),
    Key("class_ratio", float, 0.6, (GEN,), "fraction of class-1 cases"),
    Key("blob_radius_range", _float_tuple, (5.0, 8.0), (GEN,), "blob radius bounds lo,hi in voxels"),
    Key("texture_contrast", float, 0.6, (GEN,), "class-1 blob texture amplitude"),
    Key("split", _float_tuple, (0.7, 0.1, 0.2), (GEN,), "train,val,test fractions"),
    Key("crop_dims", _int_tuple, (), _DATA, "center-crop target D,H,W before normalization (empty: no crop)"),
    Key("clf_lr", float, 0.01, (CLF,), "classifier Adam learning rate"),
    Key("clf_epochs", int, 100, (CLF,), "classifier epochs"),
    Key("clf_batch", int, 4, (CLF,), "classifier batch size"),
    Key("clf_stem_width", int, 8, (CLF,), "classifier stem channels"),
    Key("clf_block_widths", _int_tuple, (16, 16), (CLF,), "residual block widths (2-3 blocks)"),
    Key("gen_lr", float, 0.1, (GNR,), "generator Adam learning rate"),
    Key("gen_epochs", int, 200, (GNR,), "generator epochs"),
    Key("gen_batch", int, 4, (GNR,), "generator batch size"),
    Key("gen_encoder_widths", _int_tuple, (4, 8), (GNR,), "generator encoder stage widths"),
    Key("gen_bottleneck_width", int, 4, (GNR,), "generator bottleneck width (< widest encoder stage)"),
    Key("gen_out_bias", float, 3.0, (GNR,), "initial output bias of the mask head"),
    Key("alpha", float, 4.0, (GNR,), "indecisive penalty curvature"),
    Key("beta", float, 0.5, (GNR,), "indecisive penalty center"),
    Key("delta", float, 1.0, (GNR,), "indecisive penalty offset"),
    Key("epsilon_gap", float, 1e-6, (GNR,), "floor on |y_p - y_np| inside the log"),
    Key("l1_mode", _choice(L1_MODES), "mean", (GNR,), "L1 reduction: mean or sum"),
    Key("slic_k", int, 64, (REL, EVA), "target superpixel count"),
    Key("slic_m", float, 1.0, (REL, EVA), "SLIC compactness"),
    Key("slic_iters", int, 10, (REL, EVA), "maximum SLIC iterations"),
    Key("slic_min_size_fraction", float, 0.25, (REL, EVA), "connectivity merge threshold as a fraction of N/k"),
    Key("bins", int, 10, (REL, EVA), "relevance bin count B"),
    Key("score_direction", _choice(SCORE_DIRECTIONS), SCORE_DIRECTIONS[0], (REL, EVA), "mask orientation"),
    Key("paint_mode", _choice(PAINT_MODES), "sum", (REL, EVA), "per-superpixel aggregate"),
    Key("methods", lambda t: tuple(_choice(("ours", "blank"))(p) for p in t.split(",") if p), ("ours", "blank"), (EVA,), "methods to evaluate"),
]
KEY_INDEX = {k.name: k for k in KEYS}


def keys_for(command: str) -> list[Key]:
    return [k for k in KEYS if command in k.used_by]


class RunConfig:
    def __init__(self, values: dict[str, Any] | None = None, source: str | None = None):
        self.values = {k.name: k.default for k in KEYS}
        self.source = source
        for name, value in (values or {}).items():
            if name not in KEY_INDEX:
                raise ConfigError(f"unknown config key {name!r}")
            self.values[name] = value

    def __getitem__(self, name: str) -> Any:
        return self.values[name]

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "RunConfig":
        values: dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
            name, value = (p.strip() for p in line.split("=", 1))
            if name not in KEY_INDEX:
                raise ConfigError(f"{source}:{lineno}: unknown config key {name!r}")
            if name in values:
                raise ConfigError(f"{source}:{lineno}: duplicate config key {name!r}")
            try:
                values[name] = KEY_INDEX[name].parse(value)
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {name}: {exc}") from exc
        return cls(values, source)

    @classmethod
    def load(cls, path=None, environ=None) -> "RunConfig":
        """Read ``path`` (defaults only when None) and apply the seed override."""
        if path is None:
            cfg = cls()
        else:
            path = Path(path)
            if not path.is_file():
                raise MissingInputError(f"config file not found: {path}")
            cfg = cls.parse(path.read_text(), str(path))
        env = os.environ if environ is None else environ
        if env.get(SEED_ENV, "").strip():
            try:
                cfg.values["seed"] = int(env[SEED_ENV])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """Build every derived spec once so bad combinations fail before any work starts."""
        self.phantom_spec().validate()
        if len(self["split"]) != 3:
            raise ConfigError(f"split needs three fractions, got {self['split']}")
        if self["crop_dims"] and len(self["crop_dims"]) != 3:
            raise ConfigError(f"crop_dims needs three extents, got {self['crop_dims']}")
        for name in ("clf_epochs", "gen_epochs"):
            if self[name] < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("clf_batch", "gen_batch"):
            if self[name] < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("clf_lr", "gen_lr"):
            if not self[name] > 0:
                raise ConfigError(f"{name} must be > 0")
        if not self["methods"]:
            raise ConfigError("methods must name at least one method")
        self.loss_config()
        self.relevance_config().validate()
        self.slic_config().validate()

    def model_dims(self) -> tuple[int, int, int]:
        return tuple(self["crop_dims"]) if self["crop_dims"] else tuple(self["dims"])

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(
            seed=self["seed"],
            count=self["count"],
            dims=tuple(self["dims"]),
            channels=self["channels"],
            class_ratio=self["class_ratio"],
            blob_radius_range=tuple(self["blob_radius_range"]),
            texture_contrast=self["texture_contrast"],
        )

    def classifier_spec(self, in_channels: int, dims) -> ClassifierSpec:
        return ClassifierSpec(in_channels, tuple(dims), self["clf_stem_width"], tuple(self["clf_block_widths"]))

    def generator_spec(self, in_channels: int, dims) -> GeneratorSpec:
        return GeneratorSpec(
            in_channels,
            tuple(dims),
            tuple(self["gen_encoder_widths"]),
            self["gen_bottleneck_width"],
            self["gen_out_bias"],
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self["alpha"], self["beta"], self["delta"], self["epsilon_gap"], self["l1_mode"])

    def slic_config(self) -> SlicConfig:
        return SlicConfig(self["slic_k"], self["slic_m"], self["slic_iters"], self["slic_min_size_fraction"])

    def relevance_config(self) -> RelevanceConfig:
        return RelevanceConfig(
            self["bins"], self["score_direction"] == SCORE_DIRECTIONS[0], self.slic_config(), self["paint_mode"]
        )

    def resolved_text(self) -> str:
        lines = ["# resolved configuration (defaults included)"]
        lines += [f"{k.name}={_fmt(self.values[k.name])}" for k in KEYS]
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory) -> Path:
        path = Path(directory) / RESOLVED_NAME
        path.write_text(self.resolved_text())
        return path
