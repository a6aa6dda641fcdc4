"""Typed INI run configuration: one section per module, unknown keys rejected."""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field

from .data import AugmentPolicy, SyntheticConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .evaluation import NMS_IOU, SEGMENT_THRESHOLDS, TIOU_THRESHOLDS
from .io_utils import atomic_write_text
from .fusion import FinetuneConfig, FusionConfig
from .pretrain import PretrainConfig


@dataclass
class EvalConfig:
    protocol: str = "linear"  # linear | knn
    tiou_thresholds: tuple = TIOU_THRESHOLDS
    segment_thresholds: tuple = SEGMENT_THRESHOLDS
    nms_iou: float = NMS_IOU
    test_fraction: float = 0.3

    def validate(self) -> None:
        if self.protocol not in ("linear", "knn"):
            raise ConfigError(f"eval protocol must be linear or knn, got {self.protocol!r}")
        if not self.tiou_thresholds or not self.segment_thresholds:
            raise ConfigError("threshold lists must be non-empty")
        if not 0 < self.nms_iou < 1 or not 0 < self.test_fraction < 1:
            raise ConfigError("nms_iou and test_fraction must be in (0, 1)")


@dataclass
class GlobalConfig:
    seed: int = 0
    out_dir: str = "out"
    threads: int = 1

    def validate(self) -> None:
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")


@dataclass
class RunConfig:
    run: GlobalConfig = field(default_factory=GlobalConfig)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sections(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]

    def validate(self) -> "RunConfig":
        for _, section in self.sections():
            section.validate()
        if self.encoder.J != self.data.J:
            raise ConfigError(f"encoder.J={self.encoder.J} but data.J={self.data.J}")
        if self.encoder.T != self.data.T:
            raise ConfigError(f"encoder.T={self.encoder.T} but data.T={self.data.T}")
        return self


# ---------------------------------------------------------------------------
# value coding


def _field_types(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse_scalar(text: str, kind, where: str):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {kind.__name__}") from None
    return text


def _parse_tuple(text: str, where: str) -> tuple:
    items = [t.strip() for t in text.split(",") if t.strip()]
    out = []
    for t in items:
        try:
            out.append(int(t))
        except ValueError:
            out.append(_parse_scalar(t, float, where))
    return tuple(out)


def _parse(text: str, hint, where: str):
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional:
        if text.strip().lower() == "none":
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is tuple or typing.get_origin(hint) is tuple:
        return _parse_tuple(text, where)
    if hint in (bool, int, float, str):
        return _parse_scalar(text, hint, where)
    raise ConfigError(f"{where}: unsupported field type {hint}")


# ---------------------------------------------------------------------------
# file form


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive field names
    return parser


def dumps(cfg: RunConfig) -> str:
    parser = _parser()
    for name, section in cfg.sections():
        parser[name] = {f.name: _format(getattr(section, f.name)) for f in dataclasses.fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text: str) -> RunConfig:
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    known = dict(cfg.sections())
    for sec in parser.sections():
        if sec not in known:
            raise ConfigError(f"unknown config section [{sec}]")
        target = known[sec]
        hints = _field_types(type(target))
        names = {f.name for f in dataclasses.fields(target)}
        updates = {}
        for key, raw in parser[sec].items():
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            updates[key] = _parse(raw, hints[key], f"[{sec}] {key}")
        setattr(cfg, sec, dataclasses.replace(target, **updates))
    return cfg


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def save(cfg: RunConfig, path) -> None:
    atomic_write_text(path, dumps(cfg))


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
