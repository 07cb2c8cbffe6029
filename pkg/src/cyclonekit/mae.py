"""Dual-stream masked autoencoder over aligned satellite and reanalysis patch lattices.

Two modality encoders see only the visible patches of a shared partition,
their tokens are concatenated channel-wise and fused by one affine map, and a
decoder reconstructs every patch from the fused tokens, a learned mask token
and a prepended conditioning token built from the storm attributes.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .errors import ContractError, NonFiniteError
from .masking import MaskPartition, PatchGrid, RadialMaskPolicy, patchify, sample_partition, unpatchify

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    depth: int = 2
    heads: int = 4
    model_dim: int = 64
    mlp_dim: int = 128

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ContractError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")


@dataclass
class MAEConfig:
    sat_hw: int = 64
    era5_hw: int = 64
    sat_patch: int = 8
    era5_patch: int = 8
    sat_channels: int = 2
    era5_channels: int = 14
    att_dim: int = 4
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: EncoderConfig = field(default_factory=EncoderConfig)
    cond_hidden: int = 64

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = EncoderConfig(**self.decoder)
        if self.sat_grid.N != self.era5_grid.N:
            raise ContractError(f"patch lattices differ: {self.sat_grid.N} vs {self.era5_grid.N} patches")

    @property
    def sat_grid(self) -> PatchGrid:
        return PatchGrid(self.sat_hw, self.sat_hw, self.sat_patch)

    @property
    def era5_grid(self) -> PatchGrid:
        return PatchGrid(self.era5_hw, self.era5_hw, self.era5_patch)

    @property
    def n_patches(self) -> int:
        return self.sat_grid.N

    def to_dict(self):
        return asdict(self)


def full_scale_config() -> MAEConfig:
    """ViT-Base encoders on 400x400 satellite / 80x80 reanalysis crops (not used at desk scale)."""
    return MAEConfig(sat_hw=400, era5_hw=80, sat_patch=20, era5_patch=4,
                     encoder=EncoderConfig(depth=12, heads=12, model_dim=768, mlp_dim=3072),
                     decoder=EncoderConfig(depth=8, heads=16, model_dim=512, mlp_dim=2048),
                     cond_hidden=512)


ENCODERS = ("sat_enc", "era5_enc")
FROZEN_GROUPS = ("sat_enc", "era5_enc", "cond")


def init_mae(cfg: MAEConfig, seed: int) -> dict[str, Tensor]:
    """Seeded normal(0, 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}
    d_enc, d_dec = cfg.encoder.model_dim, cfg.decoder.model_dim
    for name, grid, ch in (("sat_enc", cfg.sat_grid, cfg.sat_channels), ("era5_enc", cfg.era5_grid, cfg.era5_channels)):
        L.init_linear(p, rng, f"{name}.embed", grid.p * grid.p * ch, d_enc)
        for i in range(cfg.encoder.depth):
            L.init_block(p, rng, f"{name}.blocks.{i}", d_enc, cfg.encoder.mlp_dim)
        L.init_layer_norm(p, f"{name}.norm", d_enc)
    L.init_linear(p, rng, "fuse", 2 * d_enc, d_dec)
    L.init_mlp(p, rng, "cond", cfg.att_dim, cfg.cond_hidden, d_dec)
    p["mask_token"] = Tensor(rng.normal(0.0, L.INIT_STD, d_dec), requires_grad=True)
    for i in range(cfg.decoder.depth):
        L.init_block(p, rng, f"dec.blocks.{i}", d_dec, cfg.decoder.mlp_dim)
    L.init_layer_norm(p, "dec.norm", d_dec)
    L.init_linear(p, rng, "head_sat", d_dec, cfg.sat_patch ** 2 * cfg.sat_channels)
    L.init_linear(p, rng, "head_era5", d_dec, cfg.era5_patch ** 2 * cfg.era5_channels)
    return p


_POS_CACHE: dict = {}


def encoder_pos(cfg: MAEConfig) -> np.ndarray:
    key = ("enc", cfg.encoder.model_dim, cfg.sat_grid.rows, cfg.sat_grid.cols)
    if key not in _POS_CACHE:
        _POS_CACHE[key] = L.sincos_2d(cfg.encoder.model_dim, cfg.sat_grid.rows, cfg.sat_grid.cols)
    return _POS_CACHE[key]


def decoder_pos(cfg: MAEConfig) -> np.ndarray:
    """``[N + 1, D]``; row 0 is the conditioning slot and is zero."""
    key = ("dec", cfg.decoder.model_dim, cfg.sat_grid.rows, cfg.sat_grid.cols)
    if key not in _POS_CACHE:
        _POS_CACHE[key] = L.sincos_2d(cfg.decoder.model_dim, cfg.sat_grid.rows, cfg.sat_grid.cols, extra_slot=True)
    return _POS_CACHE[key]


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _batched(x, ndim):
    x = _as_tensor(x)
    return ad.reshape(x, (1,) + x.shape) if x.ndim == ndim - 1 else x


class PartitionBatch:
    """Per-sample partitions of one batch, padded to a common visible count.

    ``vis_idx[b, k]`` is the patch index of sample ``b``'s ``k``-th visible
    token (padding repeats a real index and is hidden by ``valid``).
    ``slot[b, j]`` points into the flat table ``[B * Vmax visible tokens ;
    mask token]`` used to arrange decoder inputs.
    """

    def __init__(self, parts: Sequence[MaskPartition]):
        self.parts = list(parts)
        n = {p.n for p in self.parts}
        if len(n) != 1:
            raise ContractError(f"partitions disagree on patch count: {sorted(n)}")
        self.n = n.pop()
        b = len(self.parts)
        vmax = max(p.visible.size for p in self.parts)
        self.vmax = vmax
        self.vis_idx = np.zeros((b, vmax), dtype=np.int64)
        self.valid = np.zeros((b, vmax), dtype=bool)
        self.slot = np.full((b, self.n), b * vmax, dtype=np.int64)
        self.weight = np.zeros((b, self.n))
        for i, p in enumerate(self.parts):
            k = p.visible.size
            self.vis_idx[i, :k] = p.visible
            self.vis_idx[i, k:] = p.visible[0] if k else 0
            self.valid[i, :k] = True
            self.slot[i, p.visible] = i * vmax + np.arange(k)
            if p.masked.size:
                self.weight[i, p.masked] = 1.0 / p.masked.size

    @classmethod
    def of(cls, partition, batch: int) -> "PartitionBatch":
        if isinstance(partition, PartitionBatch):
            return partition
        if isinstance(partition, MaskPartition):
            return cls([partition] * batch)
        return cls(partition)

    @property
    def padded(self) -> bool:
        return not self.valid.all()

    def attention_bias(self, heads: int):
        return L.key_mask_bias(self.valid, heads) if self.padded else None


def _check_partition(cfg: MAEConfig, pb: PartitionBatch):
    if pb.n != cfg.n_patches:
        raise ContractError(f"partition covers {pb.n} patches, lattice has {cfg.n_patches}")


def encode(params, name: str, cfg: MAEConfig, field, partition) -> Tensor:
    """Embed the visible patches of ``field[B, H, W, C]`` and run one modality encoder.

    Position enters only here, through the fixed table row of each patch.
    """
    grid = cfg.sat_grid if name == "sat_enc" else cfg.era5_grid
    field = _batched(field, 4)
    b = field.shape[0]
    pb = PartitionBatch.of(partition, b)
    patches = patchify(field, grid.p)
    flat = ad.reshape(patches, (b * grid.N, patches.shape[-1]))
    x = ad.take(flat, pb.vis_idx + (np.arange(b) * grid.N)[:, None], axis=0)
    x = ad.add(L.dense(params, f"{name}.embed", x), Tensor(encoder_pos(cfg)[pb.vis_idx]))
    bias = pb.attention_bias(cfg.encoder.heads)
    for i in range(cfg.encoder.depth):
        x = L.block(params, f"{name}.blocks.{i}", x, cfg.encoder.heads, bias)
    return L.norm(params, f"{name}.norm", x)


def encode_visible(params, cfg: MAEConfig, sat, era5, partition) -> tuple[Tensor, Tensor]:
    """Tokens ``[B, |V|, D]`` from each modality encoder, no cross-modal mixing."""
    pb = PartitionBatch.of(partition, _batched(sat, 4).shape[0])
    _check_partition(cfg, pb)
    return encode(params, "sat_enc", cfg, sat, pb), encode(params, "era5_enc", cfg, era5, pb)


def fuse(params, f_sat: Tensor, f_era5: Tensor) -> Tensor:
    if f_sat.shape[:-1] != f_era5.shape[:-1]:
        raise ContractError(f"token counts differ: {f_sat.shape} vs {f_era5.shape}")
    return L.dense(params, "fuse", ad.concat([f_sat, f_era5], axis=-1))


def condition(params, att) -> Tensor:
    """Conditioning encoder on normalised attributes ``att[B, 4]``."""
    return L.mlp(params, "cond", _batched(att, 2))


def arrange(fused: Tensor, mask_token: Tensor, partition) -> Tensor:
    """Place fused visible tokens and the mask token at their original patch indices."""
    b, vmax, d = fused.shape
    pb = PartitionBatch.of(partition, b)
    table = ad.concat([ad.reshape(fused, (b * vmax, d)), ad.reshape(mask_token, (1, d))], axis=0)
    return ad.take(table, pb.slot, axis=0)


def decode_and_reconstruct(params, cfg: MAEConfig, fused: Tensor, f_cond: Tensor,
                           partition) -> tuple[Tensor, Tensor]:
    b, _, d = fused.shape
    pb = PartitionBatch.of(partition, b)
    _check_partition(cfg, pb)
    tokens = arrange(fused, params["mask_token"], pb)
    x = ad.concat([ad.reshape(f_cond, (b, 1, d)), tokens], axis=1)
    x = ad.add(x, Tensor(decoder_pos(cfg)))
    for i in range(cfg.decoder.depth):
        x = L.block(params, f"dec.blocks.{i}", x, cfg.decoder.heads)
    x = L.norm(params, "dec.norm", x)
    h_out = ad.take(x, np.arange(1, cfg.n_patches + 1), axis=1)
    sat = unpatchify(L.dense(params, "head_sat", h_out), cfg.sat_patch, cfg.sat_hw, cfg.sat_hw)
    era5 = unpatchify(L.dense(params, "head_era5", h_out), cfg.era5_patch, cfg.era5_hw, cfg.era5_hw)
    return sat, era5


def forward(params, cfg: MAEConfig, sat, era5, att, partition) -> tuple[Tensor, Tensor]:
    pb = PartitionBatch.of(partition, _batched(sat, 4).shape[0])
    f_sat, f_era5 = encode_visible(params, cfg, sat, era5, pb)
    return decode_and_reconstruct(params, cfg, fuse(params, f_sat, f_era5), condition(params, att), pb)


def recon_loss(pred: tuple, target: tuple, partition, patch: tuple[int, int],
               all_patches: bool = False) -> Tensor:
    """Squared error summed within each masked patch of both modalities, divided by |M|.

    Batches average the per-sample value. Visible patches carry weight zero,
    so their targets cannot reach the loss or its gradient. ``all_patches``
    scores every patch instead (overfit/debug mode only).
    """
    b = _batched(pred[0], 4).shape[0]
    pb = PartitionBatch.of(partition, b)
    if all_patches:
        weight = np.full((b, pb.n), 1.0 / pb.n)
    else:
        if any(p.masked.size == 0 for p in pb.parts):
            raise ContractError("reconstruction loss needs at least one masked patch")
        weight = pb.weight
    per_patch = None
    for x_hat, x, p in zip(pred, target, patch):
        diff = ad.sub(patchify(_batched(x_hat, 4), p), patchify(_batched(x, 4), p))
        sq = ad.sum(ad.square(diff), axis=-1)
        per_patch = sq if per_patch is None else ad.add(per_patch, sq)
    return ad.scale(ad.sum(ad.mul(per_patch, Tensor(weight))), 1.0 / b)


def stack_samples(samples: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([s.sat for s in samples]), np.stack([s.era5 for s in samples]),
            np.stack([s.att for s in samples]))


def batch_loss(params, cfg: MAEConfig, samples: Sequence, partition, all_patches=False) -> Tensor:
    sat, era5, att = stack_samples(samples)
    pb = PartitionBatch.of(partition, len(samples))
    pred = forward(params, cfg, sat, era5, att, pb)
    return recon_loss(pred, (sat, era5), pb, (cfg.sat_patch, cfg.era5_patch), all_patches)


def sample_loss(params, cfg: MAEConfig, sample, partition, all_patches=False) -> Tensor:
    return batch_loss(params, cfg, [sample], partition, all_patches)


# ---------------------------------------------------------------- training

@dataclass
class PretrainConfig:
    epochs: int = 50
    lr: float = 5e-4
    batch_size: int = 8
    seed: int = 0
    mask: RadialMaskPolicy = field(default_factory=RadialMaskPolicy)


def partition_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def pretrain(samples: Sequence, cfg: MAEConfig, train: PretrainConfig, out_dir=None,
             params: dict | None = None, progress=None) -> tuple[dict, list[float]]:
    """Adam on the masked reconstruction loss.

    Every sample gets a fresh partition each epoch (seeded by seed, epoch and
    sample index); samples are shuffled into mini-batches of ``batch_size``.
    The epoch loss is the sample-weighted mean of batch losses. With
    ``out_dir`` the final and best-epoch parameters and ``loss_history.csv``
    are written there.
    """
    params = dict(params) if params is not None else init_mae(cfg, train.seed)
    opt = ad.Adam(lr=train.lr)
    history: list[float] = []
    best = math.inf
    out_dir = Path(out_dir) if out_dir is not None else None
    order_rng = np.random.default_rng(train.seed)
    for epoch in range(train.epochs):
        total, count = 0.0, 0
        order = order_rng.permutation(len(samples))
        for start in range(0, len(order), train.batch_size):
            idx = order[start:start + train.batch_size]
            batch = [samples[i] for i in idx]
            parts = [sample_partition(cfg.sat_grid, train.mask, partition_seed(train.seed, epoch, int(i))) for i in idx]
            loss = batch_loss(params, cfg, batch, parts)
            value = loss.item()
            if not math.isfinite(value):
                where = ", ".join(f"{s.cyclone_id}@{s.time.isoformat()}" for s in batch)
                raise NonFiniteError(f"epoch {epoch}: non-finite loss on batch [{where}]")
            params = opt.step(params, ad.grad(loss, params))
            total += value * len(batch)
            count += len(batch)
        history.append(total / count)
        if progress:
            progress(epoch, history[-1])
        log.info("pretrain epoch %d mean loss %.6f", epoch, history[-1])
        if out_dir is not None and history[-1] < best:
            save_mae(out_dir / "best", params, cfg, {"epoch": epoch, "loss": history[-1]})
        best = min(best, history[-1])
    if out_dir is not None:
        save_mae(out_dir / "final", params, cfg, {"epoch": train.epochs - 1, "loss": history[-1] if history else None})
        write_loss_history(out_dir / "loss_history.csv", history)
    return params, history


def save_mae(directory, params, cfg: MAEConfig, extra: dict | None = None):
    meta = {"kind": "mae", "config": cfg.to_dict(), **(extra or {})}
    return ad.save_checkpoint(directory, params, meta)


def load_mae(directory) -> tuple[dict, MAEConfig, dict]:
    params, meta = ad.load_checkpoint(directory)
    if meta.get("kind") != "mae":
        raise ContractError(f"{directory} is not a pre-training checkpoint")
    return params, MAEConfig(**meta["config"]), meta


def write_loss_history(path, history: Sequence[float]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(history):
            w.writerow([i, repr(float(v))])
