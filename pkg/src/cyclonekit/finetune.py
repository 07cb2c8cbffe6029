"""Forecasting on top of the frozen pre-trained encoders.

Each of the five window steps is encoded with every patch visible, the two
token sets are average-pooled and joined with the conditioning encoder's
embedding of the target variable's own history. A stacked LSTM reads the five
feature vectors and one probabilistic head per lead emits bin logits.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import layers as L
from . import mae
from . import prob_grid as pg
from .autodiff import Tensor
from .data import INPUT_STEPS, Window, wrap_lon
from .errors import ContractError, FrozenWeightDrift, NonFiniteError
from .masking import MaskPartition

log = logging.getLogger(__name__)

VARIABLES = ("msw", "mslp", "track")
# attribute components fed to the conditioning encoder for each target
COND_COMPONENTS = {"msw": (0,), "mslp": (1,), "track": (2, 3)}
DEFAULT_QUANTILES = ((0.05, 0.95), (0.25, 0.75))


@dataclass
class FinetuneConfig:
    variable: str = "msw"
    leads: tuple = (6,)
    basin: str | None = None
    hidden: int = 64
    layers: int = 2
    bins: int = 256
    track_bins: int = 64
    sigma_bins: float = 1.0   # smoothing bandwidth in bin widths
    logit_scale: float = 1.0  # fixed multiplier on head outputs (inverse temperature)
    epochs: int = 200
    lr: float = 5e-4
    decay: float = 0.2
    patience: int = 10
    batch_size: int = 32
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.variable not in VARIABLES:
            raise ContractError(f"unknown variable {self.variable!r}; expected one of {VARIABLES}")
        self.leads = tuple(int(x) for x in self.leads)
        if not self.leads or any(x <= 0 or x % 6 for x in self.leads):
            raise ContractError(f"leads must be positive multiples of 6 h, got {self.leads}")

    def to_dict(self):
        d = asdict(self)
        d["leads"] = list(self.leads)
        return d


def frozen_params(params) -> dict:
    return {k: v for k, v in params.items() if k.startswith(mae.FROZEN_GROUPS)}


def frozen_hash(params) -> str:
    """SHA-256 over the names, shapes and float64 bytes of the frozen groups."""
    h = hashlib.sha256()
    for k in sorted(frozen_params(params)):
        a = np.ascontiguousarray(params[k].data, dtype="<f8")
        h.update(k.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def cond_input(att, variable: str):
    """Keep only the target variable's attribute components (normalised); zero the rest."""
    att = np.asarray(att, dtype=np.float64)
    keep = np.zeros(att.shape[-1], dtype=bool)
    keep[list(COND_COMPONENTS[variable])] = True
    return att * keep


def gap(tokens: Tensor) -> Tensor:
    return ad.mean(tokens, axis=1)


def featurize(enc_params, cfg: mae.MAEConfig, sat, era5, att, variable: str) -> Tensor:
    """``[B, D_sat + D_era5 + D_cond]`` features for a batch of single steps, nothing masked."""
    sat = sat if isinstance(sat, Tensor) else Tensor(np.asarray(sat))
    b = sat.shape[0]
    part = MaskPartition.all_visible(cfg.n_patches)
    f_sat, f_era5 = mae.encode_visible(enc_params, cfg, sat, era5, part)
    f_cond = mae.condition(enc_params, cond_input(att, variable))
    return ad.concat([gap(f_sat), gap(f_era5), ad.reshape(f_cond, (b, f_cond.shape[-1]))], axis=-1)


def feature_width(cfg: mae.MAEConfig) -> int:
    return 2 * cfg.encoder.model_dim + cfg.decoder.model_dim


def feature_stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std over windows and steps; constant features get std 1."""
    flat = feats.reshape(-1, feats.shape[-1])
    std = flat.std(axis=0)
    return flat.mean(axis=0), np.where(std > 1e-12, std, 1.0)


def standardize(feats, mean, std):
    """Works on arrays and on tensors (so attribution can differentiate through it)."""
    if isinstance(feats, Tensor):
        return ad.mul(ad.sub(feats, Tensor(mean)), Tensor(1.0 / std))
    return (feats - mean) / std


def featurize_windows(enc_params, cfg: mae.MAEConfig, windows: Sequence[Window], variable: str,
                      cache: dict | None = None) -> np.ndarray:
    """``[n, 5, F]`` features; each distinct (cyclone, time) step is encoded once.

    Pass the same ``cache`` dict across calls (same encoder and variable) to
    reuse step features between overlapping window sets.
    """
    cache = {} if cache is None else cache
    todo = []
    for w in windows:
        for s in w.inputs:
            key = (s.cyclone_id, s.time)
            if key not in cache:
                cache[key] = None
                todo.append(s)
    with ad.no_grad():
        for start in range(0, len(todo), 16):
            chunk = todo[start:start + 16]
            feats = featurize(enc_params, cfg, np.stack([s.sat for s in chunk]), np.stack([s.era5 for s in chunk]),
                              np.stack([s.att for s in chunk]), variable).data
            for s, f in zip(chunk, feats):
                cache[(s.cyclone_id, s.time)] = f
    return np.stack([np.stack([cache[(s.cyclone_id, s.time)] for s in w.inputs]) for w in windows])


# ---------------------------------------------------------------- targets and specs

def target_of(window: Window, lead: int, variable: str):
    """Physical target: a scalar, or the (dlat, dlon) displacement from t0 for track."""
    tgt = window.targets[lead]
    if variable != "track":
        return tgt[variable]
    lat0, lon0 = window_origin(window)
    return tgt["lat"] - lat0, float(wrap_lon(tgt["lon"] - lon0))


def window_origin(window: Window) -> tuple[float, float]:
    if 0 not in window.targets:
        raise ContractError("window carries no t0 state (lead 0)")
    return window.targets[0]["lat"], window.targets[0]["lon"]


def make_specs(cfg: FinetuneConfig, windows: Sequence[Window]) -> dict:
    specs = {}
    for lead in cfg.leads:
        if cfg.variable == "track":
            t = pg.track_binspec(lead, cfg.track_bins)
            specs[lead] = pg.TrackBinSpec(_with_sigma(t.lat, cfg), _with_sigma(t.lon, cfg), t.regime)
        else:
            ys = [target_of(w, lead, cfg.variable) for w in windows]
            s = pg.fit_binspec_global_scan(ys, cfg.bins)
            specs[lead] = _with_sigma(s, cfg)
    return specs


def _with_sigma(spec: pg.BinSpec, cfg: FinetuneConfig) -> pg.BinSpec:
    return pg.BinSpec(spec.v_min, spec.v_max, spec.K, cfg.sigma_bins * spec.width)


def soft_targets(cfg: FinetuneConfig, specs: dict, windows: Sequence[Window]) -> dict:
    out = {}
    for lead, spec in specs.items():
        ys = [target_of(w, lead, cfg.variable) for w in windows]
        if cfg.variable == "track":
            ys = np.asarray(ys)
            out[lead] = (pg.smooth_labels(ys[:, 0], spec.lat), pg.smooth_labels(ys[:, 1], spec.lon))
        else:
            out[lead] = (pg.smooth_labels(np.asarray(ys), spec),)
    return out


# ---------------------------------------------------------------- model

def init_head_params(cfg: FinetuneConfig, width: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    p: dict = {}
    L.init_lstm(p, rng, "lstm", width, cfg.hidden, cfg.layers)
    for lead in cfg.leads:
        if cfg.variable == "track":
            L.init_linear(p, rng, f"head.{lead}.lat", cfg.hidden, cfg.track_bins)
            L.init_linear(p, rng, f"head.{lead}.lon", cfg.hidden, cfg.track_bins)
        else:
            L.init_linear(p, rng, f"head.{lead}", cfg.hidden, cfg.bins)
    return p


def head_names(cfg: FinetuneConfig, lead: int) -> tuple[str, ...]:
    return (f"head.{lead}.lat", f"head.{lead}.lon") if cfg.variable == "track" else (f"head.{lead}",)


def forward_logits(params, cfg: FinetuneConfig, feats) -> dict:
    """Per-lead tuples of logits ``[B, K]`` from window features ``[B, 5, F]``."""
    feats = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats))
    if feats.ndim != 3 or feats.shape[1] != INPUT_STEPS:
        raise ContractError(f"window must hold {INPUT_STEPS} steps, got features of shape {feats.shape}")
    h = L.lstm(params, "lstm", feats, cfg.layers)
    return {lead: tuple(ad.scale(L.dense(params, n, h), cfg.logit_scale) for n in head_names(cfg, lead))
            for lead in cfg.leads}


def forward_probs(params, cfg: FinetuneConfig, feats) -> dict:
    with ad.no_grad():
        logits = forward_logits(params, cfg, feats)
    return {lead: tuple(ad.softmax(z, axis=-1).data for z in zs) for lead, zs in logits.items()}


def loss_fn(params, cfg: FinetuneConfig, feats, targets: dict, idx) -> Tensor:
    """Cross-entropy against the smoothed targets, summed over heads, mean over the batch."""
    logits = forward_logits(params, cfg, feats[idx])
    total = None
    for lead, zs in logits.items():
        for z, q in zip(zs, targets[lead]):
            term = pg.ce_from_logits(z, q[idx])
            total = term if total is None else ad.add(total, term)
    return total


@dataclass
class FinetuneModel:
    config: FinetuneConfig
    mae_config: mae.MAEConfig
    encoders: dict               # frozen groups only
    params: dict                 # LSTM and heads
    specs: dict                  # lead -> BinSpec | TrackBinSpec
    feat_mean: np.ndarray
    feat_std: np.ndarray
    encoder_hash: str = ""
    history: list = field(default_factory=list)
    forward_calls: int = 0

    def __post_init__(self):
        if not self.encoder_hash:
            self.encoder_hash = frozen_hash(self.encoders)


class PlateauSchedule:
    """Multiply the learning rate by ``decay`` once validation loss has not improved for ``patience`` epochs."""

    def __init__(self, lr: float, decay: float = 0.2, patience: int = 10):
        self.lr, self.decay, self.patience = lr, decay, patience
        self.best = math.inf
        self.stale = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best, self.stale = val_loss, 0
        else:
            self.stale += 1
            if self.stale > self.patience:
                self.lr *= self.decay
                self.stale = 0
        return self.lr


def finetune(enc_params, mae_cfg: mae.MAEConfig, train_windows: Sequence[Window], cfg: FinetuneConfig,
             val_windows: Sequence[Window] = (), progress=None, features=None) -> FinetuneModel:
    """Train the sequence encoder and heads; the encoder groups stay untouched.

    Validation loss drives the plateau schedule and selects the returned
    weights; without validation windows the training loss is used.
    ``features`` may carry precomputed raw ``(train, val)`` window features
    from :func:`featurize_windows` so several seeds can share one encoding pass.
    """
    encoders = frozen_params(enc_params)
    ref_hash = frozen_hash(encoders)
    if features is None:
        features = (None, None)
    x_tr, x_va = features
    if cfg.basin:
        keep_tr = [i for i, w in enumerate(train_windows) if w.basin == cfg.basin]
        keep_va = [i for i, w in enumerate(val_windows) if w.basin == cfg.basin]
        train_windows = [train_windows[i] for i in keep_tr]
        val_windows = [val_windows[i] for i in keep_va]
        x_tr = None if x_tr is None else x_tr[keep_tr]
        x_va = None if x_va is None else x_va[keep_va]
    if not train_windows:
        raise ContractError("no training windows" + (f" for basin {cfg.basin}" if cfg.basin else ""))
    specs = make_specs(cfg, train_windows)
    if x_tr is None:
        x_tr = featurize_windows(encoders, mae_cfg, train_windows, cfg.variable)
    # the pooled features differ in scale by orders of magnitude between blocks
    f_mean, f_std = feature_stats(x_tr)
    x_tr = standardize(x_tr, f_mean, f_std)
    q_tr = soft_targets(cfg, specs, train_windows)
    if val_windows and x_va is None:
        x_va = featurize_windows(encoders, mae_cfg, val_windows, cfg.variable)
    x_va = standardize(x_va, f_mean, f_std) if val_windows else None
    q_va = soft_targets(cfg, specs, val_windows) if val_windows else None

    params = init_head_params(cfg, x_tr.shape[-1], cfg.seed)
    opt = ad.Adam(lr=cfg.lr)
    sched = PlateauSchedule(cfg.lr, cfg.decay, cfg.patience)
    rng = np.random.default_rng(cfg.seed)
    history = []
    best, best_params = math.inf, params
    n = len(train_windows)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = loss_fn(params, cfg, x_tr, q_tr, idx)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"epoch {epoch}: non-finite fine-tune loss")
            params = opt.step(params, ad.grad(loss, params))
            total += value * idx.size
        train_loss = total / n
        with ad.no_grad():
            val_loss = (loss_fn(params, cfg, x_va, q_va, np.arange(len(val_windows))).item()
                        if x_va is not None else train_loss)
        if frozen_hash(encoders) != ref_hash:
            raise FrozenWeightDrift(f"epoch {epoch}: frozen encoder weights changed")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.lr})
        if val_loss < best:
            best, best_params = val_loss, params
        opt.lr = sched.step(val_loss)
        if progress:
            progress(history[-1])
        log.debug("finetune epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss, opt.lr)
    return FinetuneModel(cfg, mae_cfg, encoders, best_params, specs, f_mean, f_std, ref_hash, history)


# ---------------------------------------------------------------- inference

def decode(model: FinetuneModel, probs: dict, origin=None, quantiles=DEFAULT_QUANTILES) -> dict:
    """Per-lead deterministic value, probabilities and intervals for one window."""
    out = {}
    for lead, ps in probs.items():
        spec = model.specs[lead]
        if model.config.variable == "track":
            f = pg.TrackForecast(spec, pg.ProbForecast(spec.lat, ps[0]), pg.ProbForecast(spec.lon, ps[1]))
            dlat, dlon = pg.expect_decode(f)
            entry = {"dlat": dlat, "dlon": dlon, "probs_lat": ps[0].tolist(), "probs_lon": ps[1].tolist(),
                     "intervals_dlat": _intervals(f.lat, quantiles), "intervals_dlon": _intervals(f.lon, quantiles)}
            if origin is not None:
                lat, lon, clamped = pg.apply_displacement(origin[0], origin[1], dlat, dlon)
                entry.update(lat=lat, lon=lon, clamped=clamped)
        else:
            f = pg.ProbForecast(spec, ps[0])
            entry = {"value": pg.expect_decode(f), "probs": ps[0].tolist(), "intervals": _intervals(f, quantiles)}
        out[lead] = entry
    return out


def _intervals(f: pg.ProbForecast, quantiles) -> dict:
    return {f"{lo:g}-{hi:g}": list(pg.interval(f, lo, hi)) for lo, hi in quantiles}


def model_features(model: FinetuneModel, windows: Sequence[Window]) -> np.ndarray:
    raw = featurize_windows(model.encoders, model.mae_config, windows, model.config.variable)
    return standardize(raw, model.feat_mean, model.feat_std)


def predict(model: FinetuneModel, window: Window, origin=None, quantiles=DEFAULT_QUANTILES) -> dict:
    """One forward evaluation of the window yields every lead's value and distribution."""
    feats = model_features(model, [window])
    model.forward_calls += 1
    probs = {lead: tuple(p[0] for p in ps) for lead, ps in forward_probs(model.params, model.config, feats).items()}
    return decode(model, probs, origin, quantiles)


def predict_batch(model: FinetuneModel, windows: Sequence[Window], feats=None) -> list[dict]:
    """Vectorised :func:`predict` over many windows (one forward evaluation per window)."""
    if feats is None:
        feats = model_features(model, windows)
    probs = forward_probs(model.params, model.config, feats)
    model.forward_calls += len(windows)
    out = []
    for i, w in enumerate(windows):
        out.append(decode(model, {lead: tuple(p[i] for p in ps) for lead, ps in probs.items()}, window_origin(w)))
    return out


# ---------------------------------------------------------------- checkpoints

def save_finetuned(directory, model: FinetuneModel, extra: dict | None = None):
    meta = {"kind": "finetune", "config": model.config.to_dict(), "mae_config": model.mae_config.to_dict(),
            "encoder_hash": model.encoder_hash, "history": model.history,
            "specs": {str(k): s.to_dict() for k, s in model.specs.items()},
            "feat_mean": model.feat_mean.tolist(), "feat_std": model.feat_std.tolist(), **(extra or {})}
    return ad.save_checkpoint(directory, model.params, meta)


def load_finetuned(directory, enc_params) -> FinetuneModel:
    """Rebuild a model; ``enc_params`` must hash to the recorded frozen-encoder reference."""
    params, meta = ad.load_checkpoint(directory)
    if meta.get("kind") != "finetune":
        raise ContractError(f"{directory} is not a fine-tune checkpoint")
    cfg = FinetuneConfig(**meta["config"])
    encoders = frozen_params(enc_params)
    got = frozen_hash(encoders)
    if got != meta["encoder_hash"]:
        raise FrozenWeightDrift(f"encoder hash {got[:12]} does not match checkpoint {meta['encoder_hash'][:12]}")
    spec_cls = pg.TrackBinSpec if cfg.variable == "track" else pg.BinSpec
    specs = {int(k): spec_cls.from_dict(v) for k, v in meta["specs"].items()}
    return FinetuneModel(cfg, mae.MAEConfig(**meta["mae_config"]), encoders, params, specs,
                         np.asarray(meta["feat_mean"]), np.asarray(meta["feat_std"]), got, meta["history"])


def persistence(window: Window, lead: int, variable: str):
    """Repeat the t0 value (zero displacement for track)."""
    if variable == "track":
        return 0.0, 0.0
    return window.targets[0][variable]

