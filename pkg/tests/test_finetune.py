import hashlib

import numpy as np
import pytest

from cyclonekit import autodiff as ad
from cyclonekit import data, mae
from cyclonekit import finetune as ft
from cyclonekit import prob_grid as pg
from cyclonekit.autodiff import Tensor
from cyclonekit.errors import ContractError, FrozenWeightDrift

from helpers import TINY, tiny_dataset


@pytest.fixture(scope="module")
def setup():
    tracks, series, _ = tiny_dataset(4, seed=2)
    enc = mae.init_mae(TINY, 5)
    windows = []
    for tr, ss in zip(tracks, series):
        windows += [data.build_window(ss, k, leads=[6, 24, 72], track=tr) for k in range(4, 12)]
    return enc, windows


def small_cfg(**kw):
    base = dict(variable="msw", leads=(6,), hidden=8, bins=16, epochs=3, batch_size=8)
    base.update(kw)
    return ft.FinetuneConfig(**base)


def test_gap_of_constant_tokens():
    c = np.random.default_rng(0).normal(size=5)
    tokens = Tensor(np.broadcast_to(c, (2, 7, 5)).copy())
    assert np.allclose(ft.gap(tokens).data, c, rtol=0, atol=1e-15)


def test_gap_ignores_token_order():
    x = np.random.default_rng(1).normal(size=(1, 9, 4))
    a = ft.gap(Tensor(x)).data
    b = ft.gap(Tensor(x[:, ::-1])).data
    assert np.allclose(a, b, rtol=0, atol=1e-15)


def test_feature_width(setup):
    enc, windows = setup
    s = windows[0].inputs[0]
    f = ft.featurize(enc, TINY, s.sat[None], s.era5[None], s.att[None], "msw")
    assert f.shape == (1, ft.feature_width(TINY)) == (1, 16 + 16 + 16)


def test_cond_input_keeps_only_target_history():
    att = np.array([1.0, 2.0, 3.0, 4.0])
    assert ft.cond_input(att, "msw").tolist() == [1.0, 0, 0, 0]
    assert ft.cond_input(att, "mslp").tolist() == [0, 2.0, 0, 0]
    assert ft.cond_input(att, "track").tolist() == [0, 0, 3.0, 4.0]


def test_window_features_match_direct_featurize(setup):
    enc, windows = setup
    x = ft.featurize_windows(enc, TINY, windows[:2], "msw")
    s = windows[1].inputs[3]
    direct = ft.featurize(enc, TINY, s.sat[None], s.era5[None], s.att[None], "msw").data[0]
    assert x.shape == (2, 5, 48) and np.allclose(x[1, 3], direct, rtol=0, atol=1e-12)


def test_forward_distributions_and_statelessness(setup):
    cfg = small_cfg(leads=(6, 24))
    p = ft.init_head_params(cfg, 48, 0)
    feats = np.random.default_rng(0).normal(size=(3, 5, 48))
    out = ft.forward_probs(p, cfg, feats)
    for lead in (6, 24):
        assert np.all(np.abs(out[lead][0].sum(axis=1) - 1) < 1e-9)
    again = ft.forward_probs(p, cfg, feats)
    assert all(np.array_equal(out[k][0], again[k][0]) for k in out)
    reversed_ = ft.forward_probs(p, cfg, feats[:, ::-1])
    assert not np.allclose(out[6][0], reversed_[6][0])


def test_forward_rejects_wrong_window_length():
    cfg = small_cfg()
    p = ft.init_head_params(cfg, 48, 0)
    with pytest.raises(ContractError):
        ft.forward_logits(p, cfg, np.zeros((2, 4, 48)))


def test_plateau_schedule():
    s = ft.PlateauSchedule(5e-4, 0.2, 10)
    s.step(1.0)
    lrs = [s.step(1.0) for _ in range(11)]
    assert lrs[9] == 5e-4 and lrs[10] == pytest.approx(1e-4, rel=1e-12)


def test_finetune_deterministic_and_frozen(setup, tmp_path):
    enc, windows = setup
    mae.save_mae(tmp_path / "enc", enc, TINY)
    before = hashlib.sha256((tmp_path / "enc" / "params.f64").read_bytes()).hexdigest()
    m1 = ft.finetune(enc, TINY, windows[:20], small_cfg(), windows[20:])
    m2 = ft.finetune(enc, TINY, windows[:20], small_cfg(), windows[20:])
    assert m1.history == m2.history
    assert m1.encoder_hash == ft.frozen_hash(enc)
    assert all(enc[k] is m1.encoders[k] for k in m1.encoders)
    assert set(m1.params).isdisjoint(mae.init_mae(TINY, 0))
    after = hashlib.sha256((tmp_path / "enc" / "params.f64").read_bytes()).hexdigest()
    assert before == after


def test_finetune_detects_frozen_drift(setup, monkeypatch):
    enc, windows = setup
    hashes = iter(["a", "b"])
    monkeypatch.setattr(ft, "frozen_hash", lambda params: next(hashes))
    with pytest.raises(FrozenWeightDrift):
        ft.finetune(enc, TINY, windows[:10], small_cfg(epochs=1))


def test_basin_filter(setup):
    enc, windows = setup
    with pytest.raises(ContractError):
        ft.finetune(enc, TINY, windows, small_cfg(basin="NOPE"))


def test_predict_single_forward_and_bounds(setup):
    enc, windows = setup
    model = ft.finetune(enc, TINY, windows[:20], small_cfg(leads=(6, 24)), windows[20:])
    out = ft.predict(model, windows[25])
    assert model.forward_calls == 1
    for lead, entry in out.items():
        spec = model.specs[lead]
        assert spec.v_min <= entry["value"] <= spec.v_max
        assert abs(sum(entry["probs"]) - 1) < 1e-9
        lo, hi = entry["intervals"]["0.05-0.95"]
        assert lo <= hi


def test_track_predictions_in_regime_box(setup):
    enc, windows = setup
    model = ft.finetune(enc, TINY, windows[:20], small_cfg(variable="track", leads=(24, 72), track_bins=8))
    preds = ft.predict_batch(model, windows[20:])
    assert model.forward_calls == len(windows[20:])
    for w, out in zip(windows[20:], preds):
        for lead, e in out.items():
            spec = pg.track_binspec(lead)
            assert spec.lat.v_min <= e["dlat"] <= spec.lat.v_max
            assert spec.lon.v_min <= e["dlon"] <= spec.lon.v_max
            assert e["lat"] == pytest.approx(w.targets[0]["lat"] + e["dlat"], abs=1e-9)


def test_saturated_one_hot_head_reproduces_target(setup):
    enc, windows = setup
    model = ft.finetune(enc, TINY, windows[:12], small_cfg(epochs=1))
    spec = model.specs[6]
    j = 5
    bias = np.full(spec.K, -1e3)
    bias[j] = 0.0
    model.params["head.6.w"] = Tensor(np.zeros_like(model.params["head.6.w"].data))
    model.params["head.6.b"] = Tensor(bias)
    assert ft.predict(model, windows[3])[6]["value"] == spec.centers[j]


def test_overfit_single_window_to_its_target(setup):
    enc, windows = setup
    cfg = small_cfg(epochs=1, bins=32, sigma_bins=0.25)
    w = windows[7]
    spec = pg.BinSpec(20.0, 60.0, 32, 0.25 * 40 / 32)
    x = ft.standardize(ft.featurize_windows(enc, TINY, [w], "msw"), 0.0, 1.0)
    q = {6: (pg.smooth_labels([w.targets[6]["msw"]], spec),)}
    p = ft.init_head_params(cfg, 48, 0)
    opt = ad.Adam(lr=5e-2)
    for _ in range(300):
        p = opt.step(p, ad.grad(ft.loss_fn(p, cfg, x, q, np.array([0])), p))
    decoded = ft.forward_probs(p, cfg, x)[6][0][0] @ spec.centers
    assert abs(decoded - w.targets[6]["msw"]) < spec.width / 2


def test_checkpoint_round_trip(setup, tmp_path):
    enc, windows = setup
    model = ft.finetune(enc, TINY, windows[:16], small_cfg(leads=(6, 24)))
    ft.save_finetuned(tmp_path / "ft", model)
    loaded = ft.load_finetuned(tmp_path / "ft", enc)
    assert ft.predict(loaded, windows[18]) == ft.predict(model, windows[18])
    other = mae.init_mae(TINY, 99)
    with pytest.raises(FrozenWeightDrift):
        ft.load_finetuned(tmp_path / "ft", other)


def test_persistence_baseline(setup):
    _, windows = setup
    w = windows[0]
    assert ft.persistence(w, 6, "msw") == w.targets[0]["msw"]
    assert ft.persistence(w, 24, "track") == (0.0, 0.0)
