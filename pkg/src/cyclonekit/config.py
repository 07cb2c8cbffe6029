"""Run configuration: one TOML file, dataclass sections, strict keys."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import tomli_w

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .errors import ContractError
from .mae import MAEConfig
from .masking import RadialMaskPolicy


@dataclass
class DataSection:
    n_cyclones: int = 20        # storms for pre-training
    n_finetune: int = 0         # extra storms for fine-tuning; 0 reuses the pre-training storms
    duration: int = 28          # minimum steps per storm
    hw: int = 64                # crop size for both modalities
    noise: float = 0.05
    test_fraction: float = 0.2
    val_fraction: float = 0.2


@dataclass
class PretrainSection:
    epochs: int = 50
    lr: float = 5e-4
    batch_size: int = 8


@dataclass
class FinetuneSection:
    variables: tuple = ("msw",)
    leads: tuple = (6,)
    shared_trunk: bool = False  # one multi-head model per variable instead of one per (variable, lead)
    basin: str = ""             # empty: all basins
    hidden: int = 64
    layers: int = 2
    bins: int = 256
    track_bins: int = 64
    sigma_bins: float = 1.0
    epochs: int = 200
    lr: float = 5e-4
    decay: float = 0.2
    patience: int = 10
    batch_size: int = 32


@dataclass
class EvalSection:
    baselines: tuple = ()       # CSV paths, relative to the config file
    model_name: str = "CycloneMAE"
    persistence: bool = True
    precision: int = 1


@dataclass
class AttributionSection:
    steps: int = 64
    baseline: str = "zeros"
    component: str = "lat"
    n_windows: int = 4


@dataclass
class RunConfig:
    seed: int
    data: DataSection = field(default_factory=DataSection)
    mask: RadialMaskPolicy = field(default_factory=RadialMaskPolicy)
    model: MAEConfig = field(default_factory=MAEConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    attribution: AttributionSection = field(default_factory=AttributionSection)
    base_dir: Path | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return _plain(d)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() or self.base_dir is None else self.base_dir / p


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ContractError(f"{where or 'config'}: expected a table, got {type(values).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ContractError(f"unknown config key {where + '.' if where else ''}{unknown[0]}")
    kw = {}
    for k, v in values.items():
        t = hints[k]
        key = f"{where}.{k}" if where else k
        if dataclasses.is_dataclass(t):
            kw[k] = _build(t, v, key)
        elif t is tuple:
            if not isinstance(v, list):
                raise ContractError(f"{key}: expected an array")
            kw[k] = tuple(v)
        elif t is float and isinstance(v, int) and not isinstance(v, bool):
            kw[k] = float(v)
        elif t in (int, float, str, bool) and not (type(v) is t):
            raise ContractError(f"{key}: expected {t.__name__}, got {type(v).__name__}")
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except TypeError as e:
        raise ContractError(f"{where or 'config'}: {e}") from None


def from_dict(values: dict, base_dir=None) -> RunConfig:
    if "seed" not in values:
        raise ContractError("config needs a top-level seed")
    cfg = _build(RunConfig, values, "")
    cfg.base_dir = Path(base_dir) if base_dir is not None else None
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            values = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ContractError(f"{path}: {e}") from None
    return from_dict(values, path.parent.resolve())


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def echo(cfg: RunConfig, directory) -> Path:
    """Write the effective (post-default) config next to a stage's outputs."""
    out = Path(directory) / "config.toml"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps(cfg), encoding="utf-8")
    return out
