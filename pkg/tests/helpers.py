"""Small synthetic fixtures shared by the test modules."""

import numpy as np

from cyclonekit import data
from cyclonekit.mae import EncoderConfig, MAEConfig

TINY = MAEConfig(sat_hw=16, era5_hw=16, sat_patch=4, era5_patch=4,
                 encoder=EncoderConfig(depth=1, heads=2, model_dim=16, mlp_dim=32),
                 decoder=EncoderConfig(depth=1, heads=2, model_dim=16, mlp_dim=32),
                 cond_hidden=16)


def tiny_dataset(n_cyclones=4, seed=0, hw=16, noise=0.05):
    """Cropped, z-scored samples plus tracks and the fitted stats."""
    base = data.VortexConfig(sat_hw=hw, era5_hw=hw, noise=noise, duration=25)
    crop = data.CropConfig(sat_hw=hw, era5_hw=hw)
    tracks, samples = [], []
    for track, raw in data.synth_dataset(n_cyclones, seed, base):
        tracks.append(track)
        samples.append([data.crop_sample(s, crop) for s in raw])
    stats = data.fit_stats([s for ss in samples for s in ss])
    normed = [data.zscore(ss, stats) for ss in samples]
    return tracks, normed, stats


def perturb(x, rng, scale=1.0):
    return x + scale * rng.normal(size=np.shape(x))
