"""Patch lattices and radial-distance masking of storm-centred fields."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DegenerateMaskError

MAX_REDRAWS = 16


@dataclass(frozen=True)
class PatchGrid:
    H: int
    W: int
    p: int

    def __post_init__(self):
        if self.p <= 0 or self.H % self.p or self.W % self.p:
            raise ContractError(f"patch size {self.p} must divide field size {self.H}x{self.W}")

    @property
    def rows(self) -> int:
        return self.H // self.p

    @property
    def cols(self) -> int:
        return self.W // self.p

    @property
    def N(self) -> int:
        return self.rows * self.cols

    def centers(self) -> np.ndarray:
        """Patch-centre offsets ``[N, 2]`` (row, col), field half-width = 1."""
        r = ((np.arange(self.rows) + 0.5) * self.p - self.H / 2) / (self.H / 2)
        c = ((np.arange(self.cols) + 0.5) * self.p - self.W / 2) / (self.W / 2)
        rr, cc = np.meshgrid(r, c, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)

    def radial_distance(self) -> np.ndarray:
        ctr = self.centers()
        return np.sqrt((ctr ** 2).sum(axis=1))


@dataclass(frozen=True)
class RadialMaskPolicy:
    r_eye: float = 0.25
    r_outer: float = 0.55
    gamma_core: float = 0.20
    gamma_wall: float = 0.50
    gamma_env: float = 0.75

    def __post_init__(self):
        if not 0 < self.r_eye < self.r_outer:
            raise ContractError(f"need 0 < r_eye < r_outer, got {self.r_eye}, {self.r_outer}")
        gammas = (self.gamma_core, self.gamma_wall, self.gamma_env)
        if any(g < 0 or g > 1 for g in gammas):
            raise ContractError(f"masking probabilities must lie in [0, 1], got {gammas}")
        if not self.gamma_core <= self.gamma_wall <= self.gamma_env:
            raise ContractError(f"masking must be inner-low/outer-high, got {gammas}")

    def band(self, d) -> np.ndarray:
        """0 = core, 1 = wall, 2 = environment."""
        d = np.asarray(d, dtype=np.float64)
        return np.where(d < self.r_eye, 0, np.where(d < self.r_outer, 1, 2))


@dataclass(frozen=True)
class MaskPartition:
    masked: np.ndarray
    visible: np.ndarray
    seed: int
    n: int = field(default=0)

    @classmethod
    def from_mask(cls, is_masked: np.ndarray, seed: int) -> "MaskPartition":
        is_masked = np.asarray(is_masked, dtype=bool)
        idx = np.arange(is_masked.size)
        return cls(masked=idx[is_masked], visible=idx[~is_masked], seed=seed, n=is_masked.size)

    @classmethod
    def all_visible(cls, n: int) -> "MaskPartition":
        return cls.from_mask(np.zeros(n, dtype=bool), seed=-1)

    def is_masked(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=bool)
        out[self.masked] = True
        return out


def mask_probability(d, policy: RadialMaskPolicy):
    if np.any(np.asarray(d) < 0):
        raise ContractError("radial distance must be non-negative")
    gammas = np.array([policy.gamma_core, policy.gamma_wall, policy.gamma_env])
    out = gammas[policy.band(d)]
    return float(out) if np.ndim(out) == 0 else out


def sample_partition(grid: PatchGrid, policy: RadialMaskPolicy, seed: int) -> MaskPartition:
    """Independent Bernoulli draw per patch, re-drawn with ``seed + k`` if degenerate."""
    prob = mask_probability(grid.radial_distance(), policy)
    for k in range(MAX_REDRAWS):
        rng = np.random.default_rng(seed + k)
        is_masked = rng.random(grid.N) < prob
        if 0 < is_masked.sum() < grid.N:
            return MaskPartition.from_mask(is_masked, seed + k)
    raise DegenerateMaskError(f"{MAX_REDRAWS} draws from seed {seed} were all-masked or all-visible")


def patchify(field, p: int):
    """``[..., H, W, C] -> [..., N, p*p*C]``; patches row-major, pixels row-major, channel last."""
    shape = field.shape
    *lead, h, w, c = shape
    if p <= 0 or h % p or w % p:
        raise ContractError(f"patch size {p} must divide field size {h}x{w}")
    nl = len(lead)
    split = tuple(lead) + (h // p, p, w // p, p, c)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    out = tuple(lead) + ((h // p) * (w // p), p * p * c)
    if isinstance(field, Tensor):
        return ad.reshape(ad.transpose(ad.reshape(field, split), perm), out)
    return np.asarray(field).reshape(split).transpose(perm).reshape(out)


def unpatchify(patches, p: int, h: int, w: int):
    *lead, n, ppc = patches.shape
    c = ppc // (p * p)
    if n != (h // p) * (w // p) or ppc != p * p * c:
        raise ContractError(f"patches {patches.shape} do not tile a {h}x{w} field with p={p}")
    nl = len(lead)
    split = tuple(lead) + (h // p, w // p, p, p, c)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    out = tuple(lead) + (h, w, c)
    if isinstance(patches, Tensor):
        return ad.reshape(ad.transpose(ad.reshape(patches, split), perm), out)
    return np.asarray(patches).reshape(split).transpose(perm).reshape(out)


def channel_of_patch_feature(p: int, channels: int) -> np.ndarray:
    """Channel index of each flattened patch feature."""
    return np.tile(np.arange(channels), p * p)
