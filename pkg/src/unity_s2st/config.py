"""Flat ``key = value`` run configuration with dotted namespaces.

Example::

    # comments start with '#'
    data.noise = 0.05
    model.n_1st = 4
    train.max_steps = 3000
    beam.b1 = 10

Every namespace maps to one dataclass; keys are its field names. Unknown
namespaces or keys and unparsable values raise :class:`ConfigError` with the
offending line number.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .data import TaskSpec
from .models import ModelConfig
from .search import BeamConfig
from .training import TrainConfig

# model fields derived from the data section
DERIVED_MODEL_KEYS = ("d_feat", "text_vocab", "unit_vocab", "src_vocab")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    train: int = 2000
    dev: int = 100
    test: int = 100
    text_corpus: int = 2000


@dataclass(frozen=True)
class PretrainConfig:
    mask_ratio: float = 0.3
    n_text_enc: int = 2
    lr: float = 1e-3
    warmup: int = 200
    max_steps: int = 1500
    batch_size: int = 32
    label_smoothing: float = 0.1
    dropout: float = 0.1
    seed: int = 0
    freeze_ffn: bool = True

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, warmup=self.warmup, label_smoothing=self.label_smoothing, dropout=self.dropout,
            max_steps=self.max_steps, batch_size=self.batch_size, seed=self.seed,
        )


@dataclass(frozen=True)
class BenchConfig:
    sweep: str = "1:1,5:1,10:1,10:5,10:10"
    capacity: str = "4:2,2:4,3:3"
    repeats: int = 3
    n_utts: int = 50
    force_lengths: bool = False

    def pairs(self, text: str | None = None) -> list[tuple[int, int]]:
        return parse_pairs(self.sweep if text is None else text)


@dataclass(frozen=True)
class PathsConfig:
    data: str = ""
    checkpoint: str = ""
    pretrained: str = ""
    checkpoints: str = ""
    decodes: str = ""
    split: str = "test"


@dataclass(frozen=True)
class ModelSection:
    """Model fields minus those derived from the data section."""

    arch: str = "unity"
    d_model: int = 64
    d_ff: int = 128
    n_head: int = 4
    conv_kernel: int = 7
    dropout: float = 0.1
    n_enc: int = 2
    n_1st: int = 4
    n_2nd: int = 2
    n_t2u: int = 2
    n_aux: int = 2
    d_spec: int = 8
    reduction: int = 3
    prenet_dim: int = 16
    w_s2t: float = 1.0
    w_ctc: float = 1.6
    w_asr: float = 0.0
    alpha: float = 1.0
    beta: float = 3.0
    gamma: float = 1.0
    label_smoothing: float = 0.2
    cross_mode: str = "none"
    t2u_ablation: bool = False


SECTIONS: dict[str, type] = {
    "data": TaskSpec,
    "split": SplitConfig,
    "model": ModelSection,
    "train": TrainConfig,
    "pretrain": PretrainConfig,
    "beam": BeamConfig,
    "bench": BenchConfig,
    "paths": PathsConfig,
}


def parse_pairs(text: str) -> list[tuple[int, int]]:
    """``"10:1,10:5"`` -> ``[(10, 1), (10, 5)]``."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        a, sep, b = item.partition(":")
        if not sep:
            raise ConfigError(f"expected 'a:b' pairs, got {item!r}")
        out.append((int(a), int(b)))
    return out


def _convert(raw: str, kind: Any) -> Any:
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def _field_types(cls: type) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


@dataclass
class ResolvedConfig:
    sections: dict[str, Any]

    def __getattr__(self, name: str) -> Any:
        try:
            return self.__dict__["sections"][name]
        except KeyError:
            raise AttributeError(name) from None

    def model_config(self, **overrides) -> ModelConfig:
        data: TaskSpec = self.sections["data"]
        fields = dataclasses.asdict(self.sections["model"])
        fields.update(
            d_feat=data.d_feat, text_vocab=data.text_vocab, unit_vocab=data.unit_vocab, src_vocab=data.src_vocab
        )
        fields.update(overrides)
        return ModelConfig(**fields)

    def lines(self) -> list[str]:
        out = []
        for name, obj in self.sections.items():
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                out.append(f"{name}.{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
        return out

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def parse_assignments(lines: Iterable[str], origin: str) -> list[tuple[str, str, str]]:
    """Split lines into (key, value, location) triples; blank and comment lines are skipped."""
    out = []
    for no, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{origin}:{no}: expected 'key = value', got {line.strip()!r}")
        out.append((key.strip(), value.strip(), f"{origin}:{no}"))
    return out


def resolve(assignments: Iterable[tuple[str, str, str]]) -> ResolvedConfig:
    """Apply assignments over the defaults of every section."""
    values: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    for key, raw, where in assignments:
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigError(f"{where}: unknown key {key!r} (namespaces: {', '.join(SECTIONS)})")
        types = _field_types(SECTIONS[section])
        if name not in types:
            hint = " (derived from the data section)" if section == "model" and name in DERIVED_MODEL_KEYS else ""
            raise ConfigError(f"{where}: unknown key {key!r}{hint}")
        try:
            values[section][name] = _convert(raw, types[name])
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    sections = {}
    for name, cls in SECTIONS.items():
        try:
            sections[name] = cls(**values[name])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"section {name!r}: {exc}") from None
    resolved = ResolvedConfig(sections)
    try:
        resolved.model_config()
    except ValueError as exc:
        raise ConfigError(f"section 'model': {exc}") from None
    return resolved


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> ResolvedConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (``key=value`` strings)."""
    assignments: list[tuple[str, str, str]] = []
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        assignments += parse_assignments(text.splitlines(), str(path))
    assignments += parse_assignments(list(overrides), "--override")
    return resolve(assignments)
