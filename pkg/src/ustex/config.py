"""Run configuration: one YAML document, strict keys, flag overrides.

Precedence is ``--set`` flags over file keys over dataclass defaults. The
top-level ``seed`` is the only seed; subsystems derive named sub-seeds from it.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import yaml

from .augment import AugmentConfig
from .data import PhantomFamily, TextureClass
from .errors import ConfigurationError
from .evalsuite import EvalProtocol
from .losses import LossWeights, SSIMConfig
from .model import TextureConfig
from .train import TrainConfig


@dataclass
class DataConfig:
    manifest: Optional[str] = None


@dataclass
class PhantomSetConfig:
    """Phantom family plus the options of a rendered set."""

    family: PhantomFamily = field(default_factory=PhantomFamily)
    frames_per_patient: int = 1
    organ_group: str = "phantom"
    lesion_prob: float = 0.0
    max_shift: float = 2.0
    prefix: str = "ph"

    def __post_init__(self):
        if self.frames_per_patient < 1:
            raise ConfigurationError("frames_per_patient must be >= 1")
        if not 0 <= self.lesion_prob <= 1:
            raise ConfigurationError("lesion_prob must be a probability")


# section name -> dataclass; ``seed`` fields are owned by the top level
SECTIONS: dict[str, type] = {
    "model": TextureConfig,
    "loss": LossWeights,
    "ssim": SSIMConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "eval": EvalProtocol,
    "data": DataConfig,
    "phantom": PhantomSetConfig,
}
_SEEDED = ("train", "eval")


@dataclass
class RunConfig:
    model: TextureConfig = field(default_factory=TextureConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    ssim: SSIMConfig = field(default_factory=SSIMConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    data: DataConfig = field(default_factory=DataConfig)
    phantom: PhantomSetConfig = field(default_factory=PhantomSetConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        doc = _plain(dataclasses.asdict(self))
        # section seeds are derived from the top-level one; dropping them keeps the echo re-parseable
        for name in _SEEDED:
            doc[name].pop("seed", None)
        return doc


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _coerce(value: Any, tp, key: str):
    """Check ``value`` against annotation ``tp``; ints widen to floats, lists to tuples."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if tp is Any:
        return value
    if origin is Union:
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, key)
            except ConfigurationError:
                pass
        raise ConfigurationError(f"{key}: expected {_type_name(tp)}, got {value!r}")
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{key}: expected a list, got {value!r}")
        if origin is tuple and len(args) == 2 and args[1] is Ellipsis:
            items = [_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value)]
        elif origin is tuple and args:
            if len(value) != len(args):
                raise ConfigurationError(f"{key}: expected {len(args)} items, got {len(value)}")
            items = [_coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args))]
        else:
            items = list(value)
        return tuple(items) if origin is tuple else items
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigurationError(f"{key}: expected a mapping, got {value!r}")
        return build_dataclass(tp, value, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 leaves exponents without a dot (``1e-4``) as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def build_dataclass(cls, values: Optional[dict], prefix: str = "", exclude: Sequence[str] = ()):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys by name."""
    values = {} if values is None else values
    if not isinstance(values, dict):
        raise ConfigurationError(f"{prefix or 'document'}: expected a mapping, got {type(values).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init and f.name not in exclude}
    kwargs = {}
    for k, v in values.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if k not in names:
            raise ConfigurationError(f"unknown key {key!r}")
        kwargs[k] = _coerce(v, hints[k], key)
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{prefix}: {exc}" if prefix else str(exc)) from None
    except TypeError as exc:
        raise ConfigurationError(f"{prefix or cls.__name__}: {exc}") from None


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigurationError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"override {key}: unparsable value {raw!r}") from exc
    return path, value


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    for text in overrides:
        path, value = parse_override(text)
        node = doc
        for p in path[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigurationError(f"override {'.'.join(path)}: {p!r} is not a section")
            node = nxt
        node[path[-1]] = value
    return doc


def load_document(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML ({exc})") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return doc


def config_from_dict(doc: Optional[dict]) -> RunConfig:
    doc = dict(doc or {})
    seed = _coerce(doc.pop("seed", 0), int, "seed")
    output_dir = _coerce(doc.pop("output_dir", "runs/default"), str, "output_dir")
    kwargs: dict[str, Any] = {}
    for name, values in doc.items():
        if name not in SECTIONS:
            raise ConfigurationError(f"unknown key {name!r}")
        if name in _SEEDED and isinstance(values, dict) and "seed" in values:
            raise ConfigurationError(f"unknown key '{name}.seed' (use the top-level seed)")
        extra = {"seed": seed} if name in _SEEDED else {}
        if name == "phantom":
            kwargs[name] = _build_phantom(values)
        else:
            kwargs[name] = build_dataclass(SECTIONS[name], {**(values or {}), **extra}, name)
    for name in _SEEDED:
        if name not in kwargs:
            kwargs[name] = SECTIONS[name](seed=seed)
    return RunConfig(output_dir=output_dir, seed=seed, **kwargs)


def _build_phantom(values) -> PhantomSetConfig:
    values = dict(values or {})
    fam = values.pop("family", None) or {}
    if not isinstance(fam, dict):
        raise ConfigurationError("phantom.family: expected a mapping")
    fam = dict(fam)
    for key in ("classes",):
        if key in fam:
            fam[key] = [build_dataclass(TextureClass, c, f"phantom.family.{key}[{i}]")
                        for i, c in enumerate(fam[key])]
    if fam.get("lesion") is not None:
        fam["lesion"] = build_dataclass(TextureClass, fam["lesion"], "phantom.family.lesion")
    family = build_dataclass(PhantomFamily, fam, "phantom.family")
    cfg = build_dataclass(PhantomSetConfig, values, "phantom", exclude=("family",))
    cfg.family = family
    return cfg


def parse_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Load, override and validate a run configuration (``path=None``: defaults only)."""
    doc = load_document(path) if path is not None else {}
    return config_from_dict(apply_overrides(doc, overrides))


def echo_config(cfg: RunConfig, out_dir, command: str) -> Path:
    """Write ``<command>.config.yaml`` (effective config, seed included) into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command}.config.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    (out_dir / f"{command}.seed").write_text(f"{cfg.seed}\n")
    return path
