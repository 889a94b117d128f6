"""Pipeline configuration: a line-oriented ``section.key = value`` text format.

Example::

    variant = baseline
    paths.corpus = data/train.txt
    train.lr = 3e-4
    decode.beam_size = 10
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

from .decoding import DecodeConfig
from .gbdt import GbdtParams
from .training import TrainConfig

VARIANTS = (
    "baseline",
    "no_finetune",
    "no_oversample",
    "no_postprocess",
    "multi_output",
    "nucleus",
    "back_translate",
    "model_filter",
)

# decode defaults a variant applies unless the config sets them explicitly
VARIANT_DECODE_DEFAULTS = {
    "no_finetune": {"beam_size": 12, "top_k": 12},
    "no_oversample": {"beam_size": 15, "top_k": 15},
    "multi_output": {"top_k": 1},
    "nucleus": {"top_k": 1},
    "back_translate": {"top_k": 1},
}


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    corpus: str = ""
    output_dir: str = "out"
    init_checkpoint: str = ""
    bpe_model: str = ""
    reference_file: str = ""


@dataclass
class DataConfig:
    factor: float = 50.0
    validation_fraction: float = 0.15
    max_pairs: int = 10_000_000
    eval_split: str = "validation"
    multi_output_top_n: int = 5


@dataclass
class BpeConfig:
    vocab_size: int = 512


@dataclass
class ModelSection:
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    dropout_rate: float = 0.1
    max_positions: int = 128
    dtype: str = "float64"


@dataclass
class TrainSection(TrainConfig):
    enabled: bool = True


@dataclass
class ThresholdSection:
    value: float = -3.5


@dataclass
class FilterSection:
    decision_threshold: float = 0.5
    n_features: int = 11
    pad_value: float = 0.0


@dataclass
class GbdtSection(GbdtParams):
    n_iter: int = 10
    k: int = 5


@dataclass
class MetricsSection:
    lowercase: bool = False
    micro: str = "macro_pr"


@dataclass
class SeedsSection:
    data: int = 0
    model: int = 0
    decode: int = 0
    gbdt: int = 0


@dataclass
class BackTranslateSection:
    beam_size: int = 15
    top_k: int = 5


@dataclass
class PipelineConfig:
    variant: str = "baseline"
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bpe: BpeConfig = field(default_factory=BpeConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    threshold: ThresholdSection = field(default_factory=ThresholdSection)
    filter: FilterSection = field(default_factory=FilterSection)
    gbdt: GbdtSection = field(default_factory=GbdtSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    backtranslate: BackTranslateSection = field(default_factory=BackTranslateSection)
    explicit: set = field(default_factory=set, repr=False, compare=False)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.data.eval_split not in ("validation", "train"):
            raise ConfigError("data.eval_split must be 'validation' or 'train'")
        # re-run dataclass validation after overrides
        for section in (self.train, self.decode, self.gbdt):
            post = getattr(section, "__post_init__", None)
            if post:
                try:
                    post()
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None
        return self

    def effective_decode(self) -> DecodeConfig:
        values = dataclasses.asdict(self.decode)
        for key, value in VARIANT_DECODE_DEFAULTS.get(self.variant, {}).items():
            if f"decode.{key}" not in self.explicit:
                values[key] = value
        values["top_k"] = min(values["top_k"], values["beam_size"])
        return DecodeConfig(**values)

    def keys(self):
        yield "variant"
        for f in dataclasses.fields(self):
            if f.name in ("variant", "explicit"):
                continue
            for sub in dataclasses.fields(getattr(self, f.name)):
                yield f"{f.name}.{sub.name}"


_SECTIONS = {f.name for f in dataclasses.fields(PipelineConfig)} - {"variant", "explicit"}


def _coerce(value: str, typ):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        typ = next(a for a in typing.get_args(typ) if a is not type(None))
    if typ is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"bad boolean {value!r}")
    if typ is int:
        return int(float(value)) if "e" in value.lower() else int(value)
    if typ is float:
        return float(value)
    return value.strip()


def set_value(cfg: PipelineConfig, key: str, value: str):
    key = key.strip()
    if key == "variant":
        cfg.variant = value.strip()
        cfg.explicit.add(key)
        return
    if "." not in key:
        raise ConfigError(f"config key {key!r} needs a section prefix")
    section_name, name = key.split(".", 1)
    if section_name not in _SECTIONS:
        raise ConfigError(f"unknown config section {section_name!r}")
    section = getattr(cfg, section_name)
    hints = typing.get_type_hints(type(section))
    if name not in hints or name not in {f.name for f in dataclasses.fields(section)}:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        setattr(section, name, _coerce(value, hints[name]))
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    cfg.explicit.add(key)


def parse_config(text: str, cfg: PipelineConfig | None = None) -> PipelineConfig:
    cfg = cfg or PipelineConfig()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        key, value = line.split("=", 1)
        try:
            set_value(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {line_no}: {exc}") from None
    return cfg


def load_config(path, overrides=()) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    for key, value in overrides:
        set_value(cfg, key, value)
    return cfg.validate()


def get_value(cfg: PipelineConfig, key: str):
    if key == "variant":
        return cfg.variant
    section, name = key.split(".", 1)
    return getattr(getattr(cfg, section), name)


def dump_config(cfg: PipelineConfig, explicit_only=False) -> str:
    lines = []
    for key in cfg.keys():
        if explicit_only and key not in cfg.explicit:
            continue
        value = get_value(cfg, key)
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
