"""Sample schema, synthetic vortices, on-disk dataset layout and preprocessing.

Fields are channel-last ``[H, W, C]`` arrays on a regular lat/lon grid whose
pixel ``(0, 0)`` centre sits at ``(lat0, lon0)``; row index grows northward.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (AlignmentError, ContractError, DegenerateChannelError, GapError,
                     InsufficientLengthError)

SAT_CHANNELS = ("ir", "wv")
ERA5_CHANNELS = ("z850", "z200", "t850", "t200", "q850", "q200", "u850", "u200",
                 "v850", "v200", "u10", "v10", "t2m", "msl")
ATT_NAMES = ("msw", "mslp", "lat", "lon")
BASINS = ("WP", "NA", "EP", "SI", "SP")
STEP = timedelta(hours=6)
INPUT_STEPS = 5
LEADS = tuple(range(6, 121, 6))
TIME_FMT = "%Y%m%d%H"


@dataclass(frozen=True)
class GridSpec:
    lat0: float
    lon0: float
    dlat: float
    dlon: float

    def to_dict(self):
        return asdict(self)


@dataclass
class TCSample:
    sat: np.ndarray
    era5: np.ndarray
    att: np.ndarray
    time: datetime
    basin: str
    cyclone_id: str = ""
    sat_grid: GridSpec | None = None
    era5_grid: GridSpec | None = None

    def validate(self):
        if self.time.minute or self.time.second or self.time.hour % 6:
            raise AlignmentError(f"{self.time.isoformat()} is not on a 6-hourly synoptic time")
        msw, mslp, lat, lon = self.att
        if not -90 <= lat <= 90 or not -180 <= lon < 180:
            raise ContractError(f"centre ({lat}, {lon}) out of range")
        if msw <= 0 or not 850 < mslp < 1050:
            raise ContractError(f"implausible intensity msw={msw}, mslp={mslp}")
        if self.basin not in BASINS:
            raise ContractError(f"unknown basin {self.basin}")
        return self


@dataclass
class TrackSeries:
    cyclone_id: str
    basin: str
    times: list
    lat: np.ndarray
    lon: np.ndarray
    msw: np.ndarray
    mslp: np.ndarray

    def __post_init__(self):
        for a, b in zip(self.times, self.times[1:]):
            if b - a != STEP:
                raise AlignmentError(f"track {self.cyclone_id}: {a.isoformat()} -> {b.isoformat()} is not 6 h")

    def __len__(self):
        return len(self.times)

    def index_of(self, t: datetime) -> int:
        k, rem = divmod(t - self.times[0], STEP)
        if rem or not 0 <= k < len(self):
            raise GapError(t, f"{self.cyclone_id}: no fix at {t.isoformat()}")
        return int(k)

    def value(self, variable: str, k: int) -> float:
        return float(getattr(self, variable.lower())[k])


# ---------------------------------------------------------------- synthetic vortex

@dataclass
class VortexConfig:
    duration: int = 28
    amplitude: float = 25.0          # IR cloud-top depression at MSW_REF, kelvin
    core_radius: float = 3.0         # degrees
    drift: tuple = (0.3, -0.4)       # (dlat, dlon) degrees per 6 h
    noise: float = 0.05
    base_temp: float = 290.0
    msw0: float = 22.0
    intensity_swing: float = 20.0
    start_lat: float = 15.0
    start_lon: float = 140.0
    start_time: datetime = datetime(2001, 8, 1, 0, tzinfo=timezone.utc)
    basin: str = "WP"
    cyclone_id: str = "SYN0000"
    sat_hw: int = 64
    era5_hw: int = 64
    sat_extent: float = 28.0
    era5_extent: float = 20.0
    margin: int = 4
    input_steps: int = INPUT_STEPS
    max_lead: int = 120


def _lifecycle(cfg: VortexConfig, k: np.ndarray) -> np.ndarray:
    return cfg.msw0 + cfg.intensity_swing * np.sin(np.pi * k / max(cfg.duration - 1, 1))


def pressure_from_wind(msw):
    """Monotone wind-pressure relation used by the synthetic storms (hPa)."""
    msw = np.asarray(msw, dtype=np.float64)
    return 1012.0 - 0.026 * msw ** 2 - 0.3 * msw


def wrap_lon(lon):
    return (np.asarray(lon, dtype=np.float64) + 180.0) % 360.0 - 180.0


MSW_REF = 22.0  # m/s

# noise std per channel, in channel units, multiplied by VortexConfig.noise
_SAT_NOISE = np.array([4.0, 2.0])
_ERA5_NOISE = np.array([200.0, 300.0, 1.0, 1.0, 1e-3, 2e-5, 3.0, 4.0, 3.0, 4.0, 2.5, 2.5, 1.0, 200.0])


def _vortex_fields(cfg, lat_c, lon_c, msw, mslp, grid: GridSpec, hw, channels, rng):
    h = w = hw + 2 * cfg.margin
    lats = grid.lat0 + grid.dlat * np.arange(h)
    lons = grid.lon0 + grid.dlon * np.arange(w)
    dy = (lats - lat_c)[:, None] * np.ones((1, w))
    dx = wrap_lon(lons - lon_c)[None, :] * math.cos(math.radians(lat_c)) * np.ones((h, 1))
    r = np.sqrt(dx * dx + dy * dy)
    f = np.exp(-(r / cfg.core_radius) ** 2)
    dp = 1012.0 - mslp
    if channels == "sat":
        # cloud-top cooling follows absolute intensity, amplitude is the depression at MSW_REF
        amp = cfg.amplitude * msw / MSW_REF
        out = np.stack([cfg.base_temp - amp * f, 235.0 - 0.5 * amp * f], axis=-1)
        scale = _SAT_NOISE
    else:
        rm = 0.7 * cfg.core_radius
        vt = msw * (r / rm) * np.exp(0.5 * (1.0 - (r / rm) ** 2))
        rs = np.where(r > 0, r, 1.0)
        s = 1.0 if lat_c >= 0 else -1.0
        uc, vc = -s * vt * dy / rs, s * vt * dx / rs
        us = cfg.drift[1] * 111e3 * math.cos(math.radians(lat_c)) / 21600.0
        vs = cfg.drift[0] * 111e3 / 21600.0
        out = np.stack([
            14700.0 - 80.0 * dp * f, 121000.0 + 30.0 * dp * f,
            288.0 + 0.05 * dp * f, 218.0 + 0.08 * dp * f,
            0.014 + 5e-5 * dp * f, 1e-4 + 2e-6 * dp * f,
            0.8 * uc + us, -0.3 * uc + 1.5 * us,
            0.8 * vc + vs, -0.3 * vc + 1.5 * vs,
            0.7 * uc + 0.8 * us, 0.7 * vc + 0.8 * vs,
            300.0 - 0.02 * dp * f, 101200.0 - 100.0 * dp * f,
        ], axis=-1)
        scale = _ERA5_NOISE
    if cfg.noise:
        out = out + cfg.noise * scale * rng.standard_normal(out.shape)
    return out


def synth_cyclone(config: VortexConfig, seed: int) -> tuple[TrackSeries, list[TCSample]]:
    """A drifting parametric vortex with matching best track.

    Raw fields are larger than the crop windows by ``margin`` pixels per side
    and the storm sits on a pixel centre offset from the grid centre by a
    seeded integer shift, so cropping has real work to do.
    """
    cfg = config
    need = cfg.input_steps + cfg.max_lead // 6
    if cfg.duration < max(need, 10):
        raise InsufficientLengthError(f"duration {cfg.duration} < {need} steps (input window + max lead)")
    rng = np.random.default_rng(seed)
    k = np.arange(cfg.duration)
    lat = cfg.start_lat + cfg.drift[0] * k
    lon = wrap_lon(cfg.start_lon + cfg.drift[1] * k)
    msw = _lifecycle(cfg, k)
    mslp = pressure_from_wind(msw)
    times = [cfg.start_time + STEP * int(i) for i in k]
    track = TrackSeries(cfg.cyclone_id, cfg.basin, times, lat, lon, msw, mslp)
    samples = []
    for i in range(cfg.duration):
        grids = {}
        fields = {}
        for name, hw, extent in (("sat", cfg.sat_hw, cfg.sat_extent), ("era5", cfg.era5_hw, cfg.era5_extent)):
            res = extent / hw
            shift = rng.integers(-cfg.margin // 2, cfg.margin // 2 + 1, size=2)
            centre_px = cfg.margin + hw // 2 + shift
            grid = GridSpec(float(lat[i] - centre_px[0] * res), float(lon[i] - centre_px[1] * res), res, res)
            grids[name] = grid
            fields[name] = _vortex_fields(cfg, lat[i], lon[i], msw[i], mslp[i], grid, hw, name, rng)
        samples.append(TCSample(fields["sat"], fields["era5"], np.array([msw[i], mslp[i], lat[i], lon[i]]),
                                times[i], cfg.basin, cfg.cyclone_id, grids["sat"], grids["era5"]))
    return track, samples


_BASIN_GENESIS = {
    # lat range, lon range, drift lat range, drift lon range
    "WP": ((10, 20), (125, 155), (0.15, 0.45), (-0.5, -0.2)),
    "NA": ((12, 22), (-70, -40), (0.15, 0.45), (-0.5, -0.2)),
    "EP": ((10, 18), (-125, -100), (0.1, 0.35), (-0.5, -0.25)),
    "SI": ((-20, -10), (60, 95), (-0.45, -0.15), (-0.4, 0.1)),
    "SP": ((-20, -12), (155, 179), (-0.45, -0.15), (-0.2, 0.3)),
}


def random_vortex_config(rng: np.random.Generator, index: int, base: VortexConfig | None = None,
                         basins: Sequence[str] = BASINS) -> VortexConfig:
    base = base or VortexConfig()
    basin = basins[int(rng.integers(len(basins)))]
    la, lo, dla, dlo = _BASIN_GENESIS[basin]
    start = datetime(2000, 1, 1, tzinfo=timezone.utc) + STEP * int(rng.integers(0, 4 * 365 * 20))
    return replace(
        base,
        basin=basin,
        cyclone_id=f"{basin}{index:04d}",
        start_lat=float(rng.uniform(*la)),
        start_lon=float(rng.uniform(*lo)),
        drift=(float(rng.uniform(*dla)), float(rng.uniform(*dlo))),
        msw0=float(rng.uniform(16, 28)),
        intensity_swing=float(rng.uniform(8, 35)),
        amplitude=float(rng.uniform(18, 30)),
        core_radius=float(rng.uniform(2.0, 4.0)),
        duration=int(base.duration + rng.integers(0, 5)),
        start_time=start,
    )


def synth_dataset(n_cyclones: int, seed: int, base: VortexConfig | None = None, first_index: int = 0):
    """``n_cyclones`` independent storms; yields ``(track, samples)`` pairs.

    Ids are numbered from ``first_index`` so separately drawn sets can share a namespace.
    """
    children = np.random.SeedSequence(seed).spawn(n_cyclones + 1)
    cfg_rng = np.random.default_rng(children[0])
    for i in range(n_cyclones):
        cfg = random_vortex_config(cfg_rng, first_index + i, base)
        yield synth_cyclone(cfg, int(children[i + 1].generate_state(1)[0]))


# ---------------------------------------------------------------- crop / resample

def bilinear_sample(data: np.ndarray, fi: np.ndarray, fj: np.ndarray, fill: np.ndarray) -> np.ndarray:
    """Sample ``data[H, W, C]`` at fractional rows ``fi[h]`` and columns ``fj[w]``.

    Points outside the pixel-centre hull take ``fill[C]``.
    """
    h, w, c = data.shape
    fi = np.where(np.abs(fi - np.round(fi)) < 1e-9, np.round(fi), fi)
    fj = np.where(np.abs(fj - np.round(fj)) < 1e-9, np.round(fj), fj)
    ok_i = (fi >= 0) & (fi <= h - 1)
    ok_j = (fj >= 0) & (fj <= w - 1)
    i0 = np.clip(np.floor(fi).astype(int), 0, max(h - 2, 0))
    j0 = np.clip(np.floor(fj).astype(int), 0, max(w - 2, 0))
    wi = np.clip(fi - i0, 0.0, 1.0)[:, None, None]
    wj = np.clip(fj - j0, 0.0, 1.0)[None, :, None]
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    # a + (b - a) * w keeps constant regions exact
    a = data[i0][:, j0]
    top = a + (data[i0][:, j1] - a) * wj
    c = data[i1][:, j0]
    bot = c + (data[i1][:, j1] - c) * wj
    out = top + (bot - top) * wi
    valid = ok_i[:, None] & ok_j[None, :]
    return np.where(valid[:, :, None], out, fill[None, None, :])


def center_crop_resample(field: np.ndarray, grid: GridSpec, center, extent_deg, out_hw) -> np.ndarray:
    """Bilinear resample of an ``extent_deg`` window centred on ``center`` (lat, lon)."""
    ext = np.broadcast_to(np.asarray(extent_deg, dtype=np.float64), (2,))
    if np.any(ext <= 0):
        raise ContractError(f"crop extent must be positive, got {extent_deg}")
    oh, ow = (out_hw, out_hw) if np.isscalar(out_hw) else out_hw
    lat_c, lon_c = center
    lats = lat_c + (np.arange(oh) + 0.5 - oh / 2) * (ext[0] / oh)
    lons = lon_c + (np.arange(ow) + 0.5 - ow / 2) * (ext[1] / ow)
    fi = (lats - grid.lat0) / grid.dlat
    fj = wrap_lon(lons - grid.lon0) / grid.dlon
    fill = field.reshape(-1, field.shape[-1]).mean(axis=0)
    return bilinear_sample(field, fi, fj, fill)


@dataclass
class CropConfig:
    sat_extent: float = 28.0
    era5_extent: float = 20.0
    sat_hw: int = 64
    era5_hw: int = 64


def crop_sample(sample: TCSample, crop: CropConfig) -> TCSample:
    """Storm-centred crop of both modalities onto aligned output lattices."""
    centre = (sample.att[2], sample.att[3])
    sat = center_crop_resample(sample.sat, sample.sat_grid, centre, crop.sat_extent, crop.sat_hw)
    era5 = center_crop_resample(sample.era5, sample.era5_grid, centre, crop.era5_extent, crop.era5_hw)

    def out_grid(extent, hw):
        res = extent / hw
        return GridSpec(centre[0] + (0.5 - hw / 2) * res, centre[1] + (0.5 - hw / 2) * res, res, res)

    return replace(sample, sat=sat, era5=era5,
                   sat_grid=out_grid(crop.sat_extent, crop.sat_hw),
                   era5_grid=out_grid(crop.era5_extent, crop.era5_hw))


# ---------------------------------------------------------------- normalisation

@dataclass
class NormStats:
    sat_mean: np.ndarray
    sat_std: np.ndarray
    era5_mean: np.ndarray
    era5_std: np.ndarray
    att_mean: np.ndarray
    att_std: np.ndarray

    def __post_init__(self):
        for name in ("sat", "era5", "att"):
            std = getattr(self, f"{name}_std")
            if np.any(std <= 0):
                bad = np.flatnonzero(std <= 0).tolist()
                raise DegenerateChannelError(f"{name} channels {bad} have zero standard deviation")

    def to_dict(self):
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


def _moments(arrays: Iterable[np.ndarray], channels: int):
    # two-pass population moments, accumulated in float64
    arrays = list(arrays)
    n = sum(a.size // channels for a in arrays)
    mean = sum(a.reshape(-1, channels).sum(axis=0) for a in arrays) / n
    var = sum(((a.reshape(-1, channels) - mean) ** 2).sum(axis=0) for a in arrays) / n
    return mean, np.sqrt(var)


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Population mean/std over all but the last axis."""
    return _moments([np.asarray(x, dtype=np.float64)], np.shape(x)[-1])


def fit_stats(samples: Sequence[TCSample]) -> NormStats:
    if not samples:
        raise ContractError("fit_stats needs at least one sample")
    sm, ss = _moments((s.sat for s in samples), samples[0].sat.shape[-1])
    em, es = _moments((s.era5 for s in samples), samples[0].era5.shape[-1])
    am, as_ = _moments((s.att for s in samples), samples[0].att.shape[-1])
    return NormStats(sm, ss, em, es, am, as_)


def zscore_array(x, mean, std):
    if np.any(np.asarray(std) <= 0):
        raise DegenerateChannelError("zero standard deviation")
    return (np.asarray(x, dtype=np.float64) - mean) / std


def unzscore_array(z, mean, std):
    return np.asarray(z, dtype=np.float64) * std + mean


def zscore(batch: Sequence[TCSample], stats: NormStats) -> list[TCSample]:
    return [replace(s, sat=zscore_array(s.sat, stats.sat_mean, stats.sat_std),
                    era5=zscore_array(s.era5, stats.era5_mean, stats.era5_std),
                    att=zscore_array(s.att, stats.att_mean, stats.att_std)) for s in batch]


def unzscore(batch: Sequence[TCSample], stats: NormStats) -> list[TCSample]:
    return [replace(s, sat=unzscore_array(s.sat, stats.sat_mean, stats.sat_std),
                    era5=unzscore_array(s.era5, stats.era5_mean, stats.era5_std),
                    att=unzscore_array(s.att, stats.att_mean, stats.att_std)) for s in batch]


# ---------------------------------------------------------------- time handling

def temporal_upsample_12h_to_6h(times: Sequence[datetime], values) -> tuple[list, np.ndarray]:
    """Insert linear midpoints between 12-hourly records; endpoints are kept."""
    values = np.asarray(values, dtype=np.float64)
    if len(times) != len(values):
        raise ContractError("times and values differ in length")
    for a, b in zip(times, times[1:]):
        if b - a != 2 * STEP:
            raise AlignmentError(f"expected 12 h spacing, got {a.isoformat()} -> {b.isoformat()}")
    if len(times) < 2:
        return list(times), values.copy()
    mids = 0.5 * (values[:-1] + values[1:])
    out = np.empty((2 * len(values) - 1,) + values.shape[1:])
    out[0::2] = values
    out[1::2] = mids
    out_times = []
    for t in times[:-1]:
        out_times += [t, t + STEP]
    out_times.append(times[-1])
    return out_times, out


@dataclass
class Window:
    cyclone_id: str
    basin: str
    t0: datetime
    inputs: list
    targets: dict = field(default_factory=dict)   # lead hours (0 = t0) -> {msw, mslp, lat, lon}


def _step_index(samples, t0) -> int:
    if isinstance(t0, (int, np.integer)):
        return int(t0)
    for i, s in enumerate(samples):
        if s.time == t0:
            return i
    raise GapError(t0, f"t0 {t0.isoformat()} not in series")


def build_window(samples: Sequence[TCSample], t0, leads: Sequence[int] | None = None,
                 track: TrackSeries | None = None) -> Window:
    """Five inputs at ``t0-24h .. t0`` (oldest first) plus targets keyed by lead hours.

    Lead 0 (the t0 state) is always included. With ``leads=None`` every
    available 6-hourly lead up to 120 h is returned.
    Requested leads that are missing raise :class:`GapError`.
    """
    ids = {s.cyclone_id for s in samples}
    if len(ids) > 1:
        raise ContractError(f"samples mix cyclones {sorted(ids)}")
    k0 = _step_index(samples, t0)
    if not 0 <= k0 < len(samples):
        raise GapError(k0, f"t0 step {k0} outside series of {len(samples)}")
    t0_time = samples[k0].time
    by_time = {s.time: s for s in samples}
    inputs = []
    for back in range(INPUT_STEPS - 1, -1, -1):
        t = t0_time - STEP * back
        if t not in by_time:
            raise GapError(t, f"missing input step {t.isoformat()} (window needs t0-24h)")
        inputs.append(by_time[t])
    targets = {}
    # lead 0 is the t0 state itself: persistence and track origins read it
    for lead in (0,) + tuple(LEADS if leads is None else leads):
        t = t0_time + timedelta(hours=lead)
        if track is not None:
            try:
                k = track.index_of(t)
            except GapError:
                k = None
            value = None if k is None else {v: track.value(v, k) for v in ATT_NAMES}
        else:
            s = by_time.get(t)
            value = None if s is None else dict(zip(ATT_NAMES, map(float, s.att)))
        if value is None:
            if leads is not None:
                raise GapError(t, f"missing target at lead {lead} h ({t.isoformat()})")
            continue
        targets[lead] = value
    return Window(samples[0].cyclone_id, samples[0].basin, t0_time, inputs, targets)


def window_starts(n_steps: int, min_leads: int = 1) -> range:
    """Indices usable as t0 that leave at least ``min_leads`` future steps."""
    return range(INPUT_STEPS - 1, n_steps - min_leads)


# ---------------------------------------------------------------- disk format

def _stamp(t: datetime) -> str:
    return t.strftime(TIME_FMT)


def write_track_csv(path, track: TrackSeries):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "lat", "lon", "msw", "mslp"])
        for k, t in enumerate(track.times):
            w.writerow([t.strftime("%Y-%m-%dT%H:%M:%SZ"), repr(float(track.lat[k])), repr(float(track.lon[k])),
                        repr(float(track.msw[k])), repr(float(track.mslp[k]))])


def read_track_csv(path, cyclone_id="", basin="") -> TrackSeries:
    rows = list(csv.DictReader(open(path, encoding="utf-8")))
    times = [datetime.fromisoformat(r["time"].replace("Z", "+00:00")) for r in rows]
    col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    return TrackSeries(cyclone_id, basin, times, col("lat"), col("lon"), col("msw"), col("mslp"))


def write_cyclone(root, track: TrackSeries, samples: Sequence[TCSample], extents=(28.0, 20.0)) -> Path:
    d = Path(root) / track.cyclone_id
    d.mkdir(parents=True, exist_ok=True)
    write_track_csv(d / "track.csv", track)
    steps = []
    for s in samples:
        stamp = _stamp(s.time)
        np.ascontiguousarray(s.sat, dtype="<f4").tofile(d / f"sat_{stamp}.f32")
        np.ascontiguousarray(s.era5, dtype="<f4").tofile(d / f"era5_{stamp}.f32")
        steps.append({"time": stamp, "sat_grid": s.sat_grid.to_dict(), "era5_grid": s.era5_grid.to_dict()})
    manifest = {
        "cyclone_id": track.cyclone_id,
        "basin": track.basin,
        "sat": {"shape": list(samples[0].sat.shape), "channels": list(SAT_CHANNELS), "extent_deg": extents[0]},
        "era5": {"shape": list(samples[0].era5.shape), "channels": list(ERA5_CHANNELS), "extent_deg": extents[1]},
        "dtype": "float32-le",
        "layout": "row-major, channel-last",
        "steps": steps,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return d


def read_cyclone(directory) -> tuple[TrackSeries, list[TCSample]]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    if tuple(manifest["era5"]["channels"]) != ERA5_CHANNELS or tuple(manifest["sat"]["channels"]) != SAT_CHANNELS:
        raise ContractError(f"{d}: unexpected channel order")
    track = read_track_csv(d / "track.csv", manifest["cyclone_id"], manifest["basin"])
    samples = []
    for step in manifest["steps"]:
        t = datetime.strptime(step["time"], TIME_FMT).replace(tzinfo=timezone.utc)
        k = track.index_of(t)
        sat = np.fromfile(d / f"sat_{step['time']}.f32", dtype="<f4").astype(np.float64)
        era5 = np.fromfile(d / f"era5_{step['time']}.f32", dtype="<f4").astype(np.float64)
        att = np.array([track.msw[k], track.mslp[k], track.lat[k], track.lon[k]])
        samples.append(TCSample(sat.reshape(manifest["sat"]["shape"]), era5.reshape(manifest["era5"]["shape"]),
                                att, t, manifest["basin"], manifest["cyclone_id"],
                                GridSpec(**step["sat_grid"]), GridSpec(**step["era5_grid"])))
    return track, samples


def list_cyclones(root) -> list[Path]:
    return sorted(p.parent for p in Path(root).glob("*/manifest.json"))


def split_by_cyclone(ids: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Deterministic held-out split; returns (kept, held_out)."""
    ids = sorted(ids)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n_out = max(1, int(round(fraction * len(ids)))) if len(ids) > 1 else 0
    held = sorted(ids[i] for i in order[:n_out])
    return [i for i in ids if i not in held], held
