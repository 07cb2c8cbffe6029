"""Integrated-gradients attribution of a forecast head to the 16 input predictors."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import finetune as ft
from .autodiff import Tensor
from .data import ERA5_CHANNELS, INPUT_STEPS, SAT_CHANNELS, Window
from .errors import ContractError, NonFiniteError

log = logging.getLogger(__name__)

PREDICTORS = tuple(c.upper() for c in SAT_CHANNELS) + ERA5_CHANNELS
_SURFACE = ("u10", "v10", "t2m", "msl")
GROUPS = {p: ("satellite" if p in ("IR", "WV") else "surface" if p in _SURFACE
              else "850 hPa" if p.endswith("850") else "200 hPa") for p in PREDICTORS}
CSV_COLUMNS = ("variable", "lead", "predictor", "group", "relative_weight")
TARGET = "decoded expectation"


@dataclass
class AttributionConfig:
    steps: int = 64
    baseline: str = "zeros"     # "zeros" (channel means) or "custom"
    component: str = "lat"      # track head to attribute; ignored for scalar variables
    chunk: int = 8              # path points per backward sweep

    def __post_init__(self):
        if self.steps < 2:
            raise ContractError(f"need at least 2 path steps, got {self.steps}")
        if self.baseline not in ("zeros", "custom"):
            raise ContractError(f"unknown baseline policy {self.baseline!r}")
        if self.component not in ("lat", "lon"):
            raise ContractError(f"component must be 'lat' or 'lon', got {self.component!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class AttributionReport:
    variable: str
    lead: int
    attributions: tuple          # per input element, same shapes as the inputs
    f_input: float
    f_baseline: float
    residual: float              # |sum(attr) - (F(x) - F(x'))|
    weights: dict = field(default_factory=dict)   # predictor -> relative weight
    target: str = TARGET

    @property
    def relative_residual(self) -> float:
        gap = abs(self.f_input - self.f_baseline)
        return self.residual / gap if gap > 0 else self.residual


def midpoints(steps: int) -> np.ndarray:
    return (np.arange(steps) + 0.5) / steps


def integrated_gradients(fn: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[np.ndarray],
                         baselines: Sequence[np.ndarray], steps: int = 64, chunk: int = 8):
    """Midpoint-rule IG for ``fn`` mapping a batch of inputs ``[n, *shape]`` to outputs ``[n]``.

    Returns ``(attributions, F(x), F(x'), residual)``. Each path point is an
    independent batch row, so one backward sweep yields a whole chunk of
    gradients.
    """
    xs = [np.asarray(x, dtype=np.float64) for x in inputs]
    bs = [np.asarray(b, dtype=np.float64) for b in baselines]
    for x, b in zip(xs, bs):
        if x.shape != b.shape:
            raise ContractError(f"baseline shape {b.shape} differs from input {x.shape}")
    alphas = midpoints(steps)
    total = [np.zeros_like(x) for x in xs]
    for start in range(0, steps, chunk):
        a = alphas[start:start + chunk]
        shape = lambda x: (len(a),) + (1,) * x.ndim  # noqa: E731
        leaves = [Tensor(b + a.reshape(shape(x)) * (x - b), requires_grad=True) for x, b in zip(xs, bs)]
        out = fn(leaves)
        g = ad.backward(ad.sum(out))
        for i, leaf in enumerate(leaves):
            gi = g.of(leaf)
            bad = ~np.isfinite(gi.reshape(len(a), -1)).all(axis=1)
            if bad.any():
                raise NonFiniteError(f"non-finite gradient at alpha={a[np.argmax(bad)]:.6g}")
            total[i] += gi.sum(axis=0)
    attr = [(x - b) * t / steps for x, b, t in zip(xs, bs, total)]
    with ad.no_grad():
        ends = fn([Tensor(np.stack([b, x])) for x, b in zip(xs, bs)]).data
    f_base, f_x = float(ends[0]), float(ends[1])
    residual = abs(float(sum(a.sum() for a in attr)) - (f_x - f_base))
    return attr, f_x, f_base, residual


def _detached(params: Mapping[str, Tensor]) -> dict:
    return {k: Tensor(v.data) for k, v in params.items()}


def expectation_fn(model: ft.FinetuneModel, lead: int, att: np.ndarray, component: str = "lat"):
    """``F(sat, era5)`` for batches of whole windows ``[n, 5, H, W, C]``; conditioning history held fixed."""
    cfg, mcfg = model.config, model.mae_config
    if lead not in cfg.leads:
        raise ContractError(f"model has no head for lead {lead}; leads are {cfg.leads}")
    enc, params = _detached(model.encoders), _detached(model.params)
    spec = model.specs[lead]
    head = 0
    if cfg.variable == "track":
        head = ("lat", "lon").index(component)
        spec = spec.lat if head == 0 else spec.lon
    centers = Tensor(spec.centers[:, None])

    def fn(leaves):
        sat, era5 = leaves
        n = sat.shape[0]
        flat = lambda t: ad.reshape(t, (n * INPUT_STEPS,) + t.shape[2:])  # noqa: E731
        a = np.broadcast_to(att, (n,) + att.shape).reshape(n * INPUT_STEPS, -1)
        f = ft.featurize(enc, mcfg, flat(sat), flat(era5), a, cfg.variable)
        f = ft.standardize(ad.reshape(f, (n, INPUT_STEPS, f.shape[-1])), model.feat_mean, model.feat_std)
        z = ft.forward_logits(params, cfg, f)[lead][head]
        return ad.reshape(ad.matmul(ad.softmax(z, axis=-1), centers), (n,))

    return fn


def window_arrays(window: Window) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    sat = np.stack([s.sat for s in window.inputs])
    era5 = np.stack([s.era5 for s in window.inputs])
    att = np.stack([s.att for s in window.inputs])
    return sat, era5, att


def attribute(model: ft.FinetuneModel, window: Window, lead: int, config: AttributionConfig = AttributionConfig(),
              baseline: tuple[np.ndarray, np.ndarray] | None = None) -> AttributionReport:
    """IG of one head's decoded expectation over the satellite and reanalysis inputs of a window."""
    sat, era5, att = window_arrays(window)
    if config.baseline == "zeros":
        base = (np.zeros_like(sat), np.zeros_like(era5))
    elif baseline is None:
        raise ContractError("custom baseline policy needs a baseline sample")
    else:
        base = baseline
    fn = expectation_fn(model, lead, att, config.component)
    attr, fx, fb, res = integrated_gradients(fn, (sat, era5), base, config.steps, config.chunk)
    raw = channel_attributions(attr[0], attr[1])
    if sum(raw.values()) > 0:
        weights = group_and_normalize(raw)
    else:
        log.warning("input equals the baseline: every attribution is zero")
        weights = dict.fromkeys(PREDICTORS, 0.0)
    report = AttributionReport(model.config.variable, lead, tuple(attr), fx, fb, res, weights)
    log.info("IG %s %dh: F(x)=%.4f F(x')=%.4f residual=%.3g", report.variable, lead, fx, fb, res)
    return report


def channel_attributions(sat_attr: np.ndarray, era5_attr: np.ndarray) -> dict:
    """Absolute attributions summed over steps and pixels, per named predictor (channel last)."""
    out = {}
    for names, a in ((PREDICTORS[:len(SAT_CHANNELS)], sat_attr), (ERA5_CHANNELS, era5_attr)):
        if a.shape[-1] != len(names):
            raise ContractError(f"expected {len(names)} channels, got {a.shape[-1]}")
        for i, n in enumerate(names):
            out[n] = float(np.abs(a[..., i]).sum())
    return out


def group_and_normalize(raw: Mapping[str, float | np.ndarray]) -> dict:
    """Relative weights over the 16 predictors (absent predictors weigh 0), summing to 1."""
    lookup = {p.lower(): p for p in PREDICTORS}
    mass = dict.fromkeys(PREDICTORS, 0.0)
    for name, value in raw.items():
        p = lookup.get(str(name).lower())
        if p is None:
            raise ContractError(f"channel {name!r} does not map to a predictor")
        mass[p] += float(np.abs(np.asarray(value, dtype=np.float64)).sum())
    total = sum(mass.values())
    if not total > 0:
        raise ContractError("attributions carry no mass; relative weights are undefined")
    return {p: m / total for p, m in mass.items()}


def emit_csv(reports: Sequence[AttributionReport], path=None) -> str:
    buf = io.StringIO()
    buf.write(f"# target: {TARGET} of the head; baseline: channel means\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        for p in PREDICTORS:
            w.writerow([r.variable, r.lead, p, GROUPS[p], repr(r.weights[p])])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
