"""Run configuration: nested dataclasses read from flat ``section.key = value`` text."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from dam.encoder import EncoderConfig


@dataclass
class GraphSettings:
    speaker_dim: int = 192
    distance_dim: int = 192
    relation_dim: int = 384
    max_distance: int = 10

    @property
    def edge_dim(self) -> int:
        return self.speaker_dim + self.distance_dim + self.relation_dim


@dataclass
class GNNSettings:
    iterations: int = 2
    heads: int = 8


@dataclass
class ParserSettings:
    gru_dim: int = 0  # 0 -> hidden_dim // 2
    link_dim: int = 0  # 0 -> gru_dim
    rel_dim: int = 0  # 0 -> gru_dim
    # standalone edge-producing parser
    epochs: int = 5
    learning_rate: float = 1e-4
    batch_size: int = 4


@dataclass
class TrainerSettings:
    alpha: float = 1.0
    beta: float = 0.25
    learning_rate: float = 1e-5
    batch_size: int = 8
    discourse_batch_size: int = 8
    epochs: int = 10
    weight_decay: float = 0.01
    grad_clip: float = 1.0  # 0 disables clipping
    schedule: str = "constant"  # constant | linear
    warmup_ratio: float = 0.0
    interleave: str = "sum"  # sum | alternate
    class_weights: tuple[float, ...] = ()
    device: str = "cpu"


@dataclass
class DataSettings:
    include_self_cause: bool = True


@dataclass
class EvalSettings:
    distance_buckets: tuple[str, ...] = ("0", "1", "2", "3", "4+")


@dataclass
class AblationSettings:
    no_speaker: bool = False
    no_distance: bool = False
    no_gate: bool = False


@dataclass
class DAMConfig:
    seed: int = 13
    variant: str = "DAM"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    graph: GraphSettings = field(default_factory=GraphSettings)
    gnn: GNNSettings = field(default_factory=GNNSettings)
    parser: ParserSettings = field(default_factory=ParserSettings)
    trainer: TrainerSettings = field(default_factory=TrainerSettings)
    data: DataSettings = field(default_factory=DataSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)

    def __post_init__(self):
        resolve_variant(self.variant)
        if self.trainer.alpha < 0 or self.trainer.beta < 0:
            raise ValueError("loss weights alpha and beta must be >= 0")

    @property
    def variant_spec(self) -> "VariantSpec":
        return resolve_variant(self.variant)

    @property
    def effective_beta(self) -> float:
        return self.trainer.beta if self.variant_spec.multitask else 0.0

    @property
    def rel_dim(self) -> int:
        gru = self.parser.gru_dim or max(1, self.encoder.hidden_dim // 2)
        return self.parser.rel_dim or gru


# -- model variants -----------------------------------------------------------


@dataclass(frozen=True)
class VariantSpec:
    multitask: bool
    gnn: bool
    gate: bool
    relations: str  # typed | arc | none
    cat: bool = False

    @property
    def needs_parses(self) -> bool:
        return (self.gnn and self.relations != "none") or self.cat


VARIANTS = {
    "DAM": VariantSpec(multitask=True, gnn=True, gate=True, relations="typed"),
    "DAM-mtl": VariantSpec(multitask=True, gnn=False, gate=False, relations="none"),
    "DAM-cat": VariantSpec(multitask=False, gnn=False, gate=False, relations="none", cat=True),
    "DAM-gnn": VariantSpec(multitask=False, gnn=True, gate=False, relations="typed"),
    "DAM-mtl-gnn": VariantSpec(multitask=True, gnn=True, gate=False, relations="typed"),
    "DAM-arc": VariantSpec(multitask=True, gnn=True, gate=True, relations="arc"),
}

# Rows of the ablation / fusion matrix as overrides of a base config.
MATRIX_ROWS: dict[str, dict[str, str]] = {
    "DAM": {"variant": "DAM"},
    "WO-multitask": {"variant": "DAM", "trainer.beta": "0"},
    "WO-gated-gnn": {"variant": "DAM-mtl"},
    "WO-speaker": {"variant": "DAM", "ablation.no_speaker": "true"},
    "WO-distance": {"variant": "DAM", "ablation.no_distance": "true"},
    "WO-gate": {"variant": "DAM", "ablation.no_gate": "true"},
    **{name: {"variant": name} for name in VARIANTS if name != "DAM"},
}


def resolve_variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; valid: {', '.join(VARIANTS)}") from None


def matrix_config(base: "DAMConfig", row: str) -> "DAMConfig":
    if row not in MATRIX_ROWS:
        raise ValueError(f"unknown variant {row!r}; valid: {', '.join(MATRIX_ROWS)}")
    return apply_overrides(base, MATRIX_ROWS[row])


# -- flat text format ------------------------------------------------------------

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: str, kind: Any, key: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(kind)
    if origin is tuple:
        (item,) = {a for a in typing.get_args(kind) if a is not Ellipsis}
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_coerce(p, item, key) for p in parts)
    if kind is bool:
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ValueError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def flatten(config: DAMConfig) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                out[f"{f.name}.{sub.name}"] = _format(getattr(value, sub.name))
        else:
            out[f.name] = _format(value)
    return out


def apply_overrides(config: DAMConfig, overrides: Mapping[str, str]) -> DAMConfig:
    """Return a copy of ``config`` with dotted-key string overrides applied."""
    top = {f.name: getattr(config, f.name) for f in dataclasses.fields(config)}
    sections = {k: dataclasses.asdict(v) for k, v in top.items() if dataclasses.is_dataclass(v)}
    hints = _hints(DAMConfig)
    for key, raw in overrides.items():
        if "." in key:
            section, name = key.split(".", 1)
            if section not in sections:
                raise KeyError(f"unknown config section {section!r} in {key!r}")
            sub_hints = _hints(hints[section])
            if name not in sub_hints:
                raise KeyError(f"unknown config key {key!r}")
            sections[section][name] = _coerce(str(raw), sub_hints[name], key)
        else:
            if key not in hints or key in sections:
                raise KeyError(f"unknown config key {key!r}")
            top[key] = _coerce(str(raw), hints[key], key)
    for section, values in sections.items():
        top[section] = hints[section](**values)
    return DAMConfig(**top)


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path, overrides: Mapping[str, str] = ()) -> DAMConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update(dict(overrides))
    return apply_overrides(DAMConfig(), values)


def config_to_text(config: DAMConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flatten(config).items())
