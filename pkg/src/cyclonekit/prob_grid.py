"""Discrete probability grids for scalar and track targets.

Targets are placed on uniform bins, softened with a Gaussian kernel over the
bin centres, trained with cross-entropy and decoded by expectation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import wrap_lon
from .errors import ContractError, DegenerateRangeError

SCALAR_BINS = 256
TRACK_BINS = 64
NARROW = (15.0, 20.0)  # max |dlat|, |dlon| in degrees
WIDE = (20.0, 25.0)
NARROW_MAX_LEAD = 48  # inclusive
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class BinSpec:
    v_min: float
    v_max: float
    K: int
    sigma: float | None = None  # smoothing bandwidth, defaults to one bin width

    def __post_init__(self):
        if not (np.isfinite(self.v_min) and np.isfinite(self.v_max)) or self.v_min >= self.v_max:
            raise DegenerateRangeError(f"need v_min < v_max, got {self.v_min}, {self.v_max}")
        if int(self.K) != self.K or self.K < 2:
            raise ContractError(f"need K >= 2 bins, got {self.K}")
        if self.sigma is not None and not self.sigma > 0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")

    @property
    def width(self) -> float:
        return (self.v_max - self.v_min) / self.K

    @property
    def centers(self) -> np.ndarray:
        return self.v_min + (np.arange(self.K) + 0.5) * self.width

    @property
    def bandwidth(self) -> float:
        return self.width if self.sigma is None else self.sigma

    def to_dict(self):
        return {"v_min": float(self.v_min), "v_max": float(self.v_max), "K": int(self.K), "sigma": self.bandwidth}

    @classmethod
    def from_dict(cls, d):
        return cls(d["v_min"], d["v_max"], d["K"], d.get("sigma"))


@dataclass(frozen=True)
class TrackBinSpec:
    lat: BinSpec
    lon: BinSpec
    regime: str

    def to_dict(self):
        return {"lat": self.lat.to_dict(), "lon": self.lon.to_dict(), "regime": self.regime}

    @classmethod
    def from_dict(cls, d):
        return cls(BinSpec.from_dict(d["lat"]), BinSpec.from_dict(d["lon"]), d["regime"])


@dataclass
class ProbForecast:
    spec: BinSpec
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (self.spec.K,):
            raise ContractError(f"expected {self.spec.K} probabilities, got shape {self.probs.shape}")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ContractError("probabilities must be nonnegative and sum to 1")


@dataclass
class TrackForecast:
    """Independent latitude and longitude displacement distributions."""
    spec: TrackBinSpec
    lat: ProbForecast
    lon: ProbForecast
    clamped: bool = field(default=False)


def fit_binspec_global_scan(targets, K: int = SCALAR_BINS, sigma: float | None = None) -> BinSpec:
    """Bins spanning the exact extrema of the training targets."""
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    y = y[np.isfinite(y)]
    if y.size == 0 or y.min() == y.max():
        raise DegenerateRangeError("targets need at least two distinct finite values")
    return BinSpec(float(y.min()), float(y.max()), K, sigma)


def track_binspec(lead_hours: int, M: int = TRACK_BINS) -> TrackBinSpec:
    if lead_hours <= 0:
        raise ContractError(f"lead must be positive, got {lead_hours}")
    regime, (dlat, dlon) = ("narrow", NARROW) if lead_hours <= NARROW_MAX_LEAD else ("wide", WIDE)
    return TrackBinSpec(BinSpec(-dlat, dlat, M), BinSpec(-dlon, dlon, M), regime)


def smooth_labels(y, spec: BinSpec, sigma: float | None = None) -> np.ndarray:
    """Gaussian soft targets over the bin centres; ``y`` may be a scalar or an array."""
    sigma = spec.bandwidth if sigma is None else sigma
    if not sigma > 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    y = np.asarray(y, dtype=np.float64)[..., None]
    z = -((spec.centers - y) ** 2) / (2.0 * sigma * sigma)
    # shifting by the max keeps far out-of-range targets finite; the ratio is unchanged
    w = np.exp(z - z.max(axis=-1, keepdims=True))
    return w / w.sum(axis=-1, keepdims=True)


def ce_loss(p, q) -> np.ndarray | float:
    """Cross-entropy ``-sum q log p`` over the last axis, with ``p`` floored at 1e-12."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    out = -(q * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def ce_from_logits(logits, q) -> ad.Tensor:
    """Mean over the batch of the cross-entropy between ``softmax(logits)`` and ``q``."""
    q = np.asarray(q, dtype=np.float64)
    if logits.shape != q.shape:
        raise ContractError(f"logits {logits.shape} and targets {q.shape} differ")
    rows = int(np.prod(q.shape[:-1])) if q.ndim > 1 else 1
    return ad.scale(ad.sum(ad.mul(ad.log_softmax(logits, axis=-1), ad.Tensor(q))), -1.0 / rows)


def expect_decode(forecast):
    """Expected value of a scalar forecast, or ``(dlat, dlon)`` for a track forecast."""
    if isinstance(forecast, TrackForecast):
        return expect_decode(forecast.lat), expect_decode(forecast.lon)
    return float(np.dot(forecast.probs, forecast.spec.centers))


def expect_values(probs, spec: BinSpec) -> np.ndarray:
    """Vectorised expectation over the last axis of ``probs``."""
    return np.asarray(probs) @ spec.centers


def apply_displacement(lat, lon, dlat, dlon):
    """Add a displacement to a start position; returns ``(lat, lon, clamped)``."""
    new_lat = lat + dlat
    clamped = bool(abs(new_lat) > 90.0)
    new_lat = float(np.clip(new_lat, -90.0, 90.0))
    return new_lat, float(wrap_lon(lon + dlon)), clamped


def quantile(forecast: ProbForecast, q: float) -> float:
    """Inverse CDF, piecewise linear between the mid-mass points of occupied bins.

    Each occupied bin contributes the anchor ``(F_i - p_i / 2, c_i)`` where ``F_i``
    is the cumulative mass through bin ``i``; beyond the outer anchors the
    quantile is clamped. A one-hot forecast therefore has every quantile at its
    centre, and a uniform forecast inverts to the exact linear CDF.
    """
    p = forecast.probs
    occupied = p > 0
    mid = (np.cumsum(p) - p / 2.0)[occupied]
    return float(np.interp(q, mid, forecast.spec.centers[occupied]))


def interval(forecast: ProbForecast, q_lo: float, q_hi: float):
    if not 0.0 <= q_lo < q_hi <= 1.0:
        raise ContractError(f"need 0 <= q_lo < q_hi <= 1, got {q_lo}, {q_hi}")
    return quantile(forecast, q_lo), quantile(forecast, q_hi)
