"""Experiment configuration: nested dataclasses with a flat key=value file
format (``section.field = value``, ``#`` comments)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .datagen import GenConfig
from .errors import ConfigError
from .objectives import LossWeights
from .optim import OptimConfig


@dataclass(frozen=True)
class ModelConfig:
    height: int = 32
    width: int = 32
    patch: int = 8
    d_v: int = 64
    d_t: int = 64
    d_text: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    L_q: int = 8
    d_q: int = 64
    d_shared: int = 64
    qf_depth: int = 2
    qf_heads: int = 4
    d_llm: int = 128
    dec_layers: int = 2
    dec_heads: int = 4
    max_len: int = 512
    pool_renormalize: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass(frozen=True)
class StageBudget:
    steps: int
    batch_size: int = 32
    eval_every: int = 250

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("invalid stage budget")


@dataclass(frozen=True)
class LoraConfig:
    targets: tuple[str, ...] = ("q", "v")
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: GenConfig = field(default_factory=GenConfig)
    defect_data: GenConfig = field(default_factory=lambda: GenConfig(
        n_objects=60, samples_per_object=10, tasks=("defect",),
        split_ratios=(0.70, 0.15, 0.15)))
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    stage1: StageBudget = field(default_factory=lambda: StageBudget(steps=2000, eval_every=250))
    stage2: StageBudget = field(default_factory=lambda: StageBudget(steps=4000, eval_every=250))
    stage3: StageBudget = field(default_factory=lambda: StageBudget(steps=500, eval_every=100))
    lora: LoraConfig = field(default_factory=LoraConfig)
    warmup_lm_steps: int = 600
    warmup_lm_sequences: int = 2000
    eval_max_rows: int = 256
    generate_max_new: int = 12
    seed: int = 0


_SECTIONS = ("model", "data", "defect_data", "optim", "loss",
             "stage1", "stage2", "stage3", "lora")


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in text:
        return tuple(_parse_value(p) for p in text.split(",") if p.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def to_flat_dict(cfg: ExperimentConfig) -> dict[str, object]:
    out: dict[str, object] = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in fields(value):
                out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            out[f.name] = value
    return out


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# flat experiment configuration: section.field = value\n")
        for key, value in to_flat_dict(cfg).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            fh.write(f"{key} = {value}\n")


def from_flat_dict(flat: dict[str, object],
                   base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    sections: dict[str, dict] = {name: {} for name in _SECTIONS}
    top: dict[str, object] = {}
    valid_top = {f.name for f in fields(ExperimentConfig)}
    for key, value in flat.items():
        if "." in key:
            section, _, fieldname = key.partition(".")
            if section not in sections:
                raise ConfigError(f"unknown config section {section!r} in key {key!r}")
            sections[section][fieldname] = value
        else:
            if key not in valid_top or key in _SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = value

    kwargs: dict[str, object] = dict(top)
    for name in _SECTIONS:
        if not sections[name]:
            continue
        current = getattr(base, name)
        valid = {f.name for f in fields(current)}
        bad = set(sections[name]) - valid
        if bad:
            raise ConfigError(f"unknown key(s) {sorted(bad)} in section {name!r}")
        coerced = {}
        for k, v in sections[name].items():
            cur = getattr(current, k)
            if isinstance(cur, tuple) and not isinstance(v, tuple):
                v = (v,)
            if isinstance(cur, float) and isinstance(v, int):
                v = float(v)
            coerced[k] = v
        kwargs[name] = dataclasses.replace(current, **coerced)
    return dataclasses.replace(base, **kwargs)


def load_config(path: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    flat: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            flat[key.strip()] = _parse_value(value)
    return from_flat_dict(flat, base)
