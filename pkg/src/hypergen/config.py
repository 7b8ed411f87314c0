"""Run configuration as a single TOML document.

Sections map one-to-one onto the library's config dataclasses::

    output_dir = "runs/demo"

    [dataset]        uri, train_classes, test_classes
    [episode]        EpisodeConfig
    [train]          TrainConfig
    [cnn]            channels, n_conv, generate
    [transformer]    TransformerConfig
    [augmentation]   AugmentationSpec

Unknown keys are rejected with a line/column pointing at the offending key.
``None``-valued optional fields are omitted on write and restored on read.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .cnn import CnnSpec
from .episodes import AugmentationSpec
from .generator import TransformerConfig
from .trainer import EpisodeConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line, self.column = line, column
        where = f" (at line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


@dataclass
class DatasetConfig:
    uri: str = "synth://glyphs?classes=30&per=20&size=16&seed=0"
    train_classes: int = 20
    test_classes: int = 10


@dataclass
class CnnConfig:
    channels: int = 8
    n_conv: int = 4
    generate: str = "logits"


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)

    def cnn_spec(self, input_shape) -> CnnSpec:
        return CnnSpec.standard(self.cnn.channels, self.episode.n_way, self.cnn.n_conv,
                                self.cnn.generate, tuple(input_shape))

    def to_dict(self) -> dict:
        out = {"output_dir": self.output_dir}
        for name in SECTIONS:
            out[name] = {k: v for k, v in asdict(getattr(self, name)).items() if v is not None}
        return out


SECTIONS = {
    "dataset": DatasetConfig,
    "episode": EpisodeConfig,
    "train": TrainConfig,
    "cnn": CnnConfig,
    "transformer": TransformerConfig,
    "augmentation": AugmentationSpec,
}


def _locate(text: str, section: str | None, key: str) -> tuple[int, int]:
    """1-based (line, column) of ``key`` inside ``[section]`` (or the root table)."""
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        header = re.match(r"\[\s*([^\]]+?)\s*\]", stripped)
        if header:
            current = header.group(1)
            if section is not None and key is None and current == section:
                return lineno, line.index("[") + 1
            continue
        m = re.match(r"\s*([A-Za-z0-9_\-]+|\"[^\"]*\")\s*=", line)
        if m and current == section and m.group(1).strip('"') == key:
            return lineno, m.start(1) + 1
    return 1, 1


def _coerce(cls, values: dict, text: str, section: str):
    known = {f.name: f for f in fields(cls)}
    for key, val in values.items():
        if key not in known:
            line, col = _locate(text, section, key)
            raise ConfigError(f"unknown key {key!r} in [{section}]", line, col)
        expected = known[key].type if isinstance(known[key].type, str) else known[key].type.__name__
        bad = (("int" in expected and "float" not in expected and (isinstance(val, bool) or not isinstance(val, int)))
               or (expected.startswith("float") and (isinstance(val, bool) or not isinstance(val, (int, float))))
               or (expected == "bool" and not isinstance(val, bool))
               or (expected == "str" and not isinstance(val, str)))
        if bad:
            line, col = _locate(text, section, key)
            raise ConfigError(f"[{section}] {key}: expected {expected}, got {type(val).__name__}", line, col)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        line, col = _locate(text, section, None)
        raise ConfigError(f"[{section}]: {exc}", line, col) from exc


def loads(text: str) -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        raise ConfigError(f"invalid TOML: {exc}", *(map(int, m.groups()) if m else (None, None))) from exc
    kwargs = {}
    for key, val in raw.items():
        if key == "output_dir":
            if not isinstance(val, str):
                raise ConfigError("output_dir must be a string", *_locate(text, None, key))
            kwargs[key] = val
        elif key in SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"{key} must be a table", *_locate(text, None, key))
            kwargs[key] = _coerce(SECTIONS[key], val, text, key)
        else:
            raise ConfigError(f"unknown top-level key {key!r}", *_locate(text, None, key))
    return RunConfig(**kwargs)


def dumps(config: RunConfig) -> str:
    return tomli_w.dumps(config.to_dict())


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def dump(config: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(dumps(config))
    return path
