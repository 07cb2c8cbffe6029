import numpy as np
import pytest
from hypothesis import given, strategies as st

from cyclonekit import attribution as at
from cyclonekit import autodiff as ad
from cyclonekit import data, mae
from cyclonekit import finetune as ft
from cyclonekit.autodiff import Tensor
from cyclonekit.errors import ContractError, NonFiniteError

from helpers import TINY, tiny_dataset


@pytest.fixture(scope="module")
def model_and_windows():
    tracks, series, _ = tiny_dataset(3, seed=4)
    enc = mae.init_mae(TINY, 8)
    # larger encoder weights make the target respond visibly to the fields
    for k, v in enc.items():
        if k.endswith(".w"):
            enc[k] = Tensor(v.data * 10, requires_grad=True)
    windows = [data.build_window(ss, k, leads=[6, 24], track=tr) for tr, ss in zip(tracks, series) for k in range(4, 10)]
    cfg = ft.FinetuneConfig(variable="msw", leads=(6, 24), hidden=8, bins=16, epochs=3, batch_size=8)
    return ft.finetune(enc, TINY, windows, cfg), windows


def linear_fn(w):
    return lambda leaves: ad.sum(ad.mul(leaves[0], Tensor(w)), axis=1)


@given(st.integers(1, 9), st.integers(0, 2 ** 32 - 1))
def test_linear_closed_form(steps, seed):
    rng = np.random.default_rng(seed)
    w, x = rng.normal(size=7), rng.normal(size=7)
    attr, fx, fb, res = at.integrated_gradients(linear_fn(w), [x], [np.zeros(7)], steps=steps, chunk=4)
    assert np.max(np.abs(attr[0] - w * x)) < 1e-10
    assert res < 1e-10 and fb == 0.0


def test_input_equal_to_baseline_gives_zero():
    x = np.random.default_rng(0).normal(size=5)
    quad = lambda leaves: ad.sum(ad.square(leaves[0]), axis=1)  # noqa: E731
    attr, fx, fb, res = at.integrated_gradients(quad, [x], [x], steps=16)
    assert np.all(attr[0] == 0) and fx == fb


def test_quadratic_midpoint_exact():
    # for F = sum x^2 the midpoint rule integrates the linear gradient exactly
    x = np.array([1.0, -2.0, 0.5])
    quad = lambda leaves: ad.sum(ad.square(leaves[0]), axis=1)  # noqa: E731
    attr, *_ = at.integrated_gradients(quad, [x], [np.zeros(3)], steps=3)
    assert np.allclose(attr[0], x ** 2, rtol=0, atol=1e-14)


def test_shape_mismatch():
    with pytest.raises(ContractError):
        at.integrated_gradients(linear_fn(np.ones(3)), [np.ones(3)], [np.ones(4)], steps=4)


def test_non_finite_gradient_names_alpha():
    def fn(leaves):
        return ad.sum(ad.mul(leaves[0], Tensor(np.array([np.nan, 1.0]))), axis=1)
    with pytest.raises(NonFiniteError, match="alpha=0.125"):
        at.integrated_gradients(fn, [np.ones(2)], [np.zeros(2)], steps=4)


def test_config_contract():
    with pytest.raises(ContractError):
        at.AttributionConfig(steps=1)
    with pytest.raises(ContractError):
        at.AttributionConfig(baseline="noise")


def test_model_completeness_and_convergence(model_and_windows):
    model, windows = model_and_windows
    w = windows[4]
    r256 = at.attribute(model, w, 6, at.AttributionConfig(steps=256, chunk=32))
    gap = abs(r256.f_input - r256.f_baseline)
    assert gap > 1e-3
    assert r256.residual < 0.01 * gap
    r8 = at.attribute(model, w, 6, at.AttributionConfig(steps=8))
    assert r256.residual < r8.residual
    assert abs(sum(r256.weights.values()) - 1) < 1e-9 and min(r256.weights.values()) >= 0
    assert r256.target == "decoded expectation"


def test_target_matches_predict(model_and_windows):
    model, windows = model_and_windows
    w = windows[2]
    sat, era5, att = at.window_arrays(w)
    fn = at.expectation_fn(model, 24, att)
    with ad.no_grad():
        f = fn([Tensor(sat[None]), Tensor(era5[None])]).data[0]
    assert f == pytest.approx(ft.predict(model, w)[24]["value"], abs=1e-10)


def test_ignored_channel_gets_zero(model_and_windows):
    model, windows = model_and_windows
    enc = dict(model.encoders)
    wts = enc["era5_enc.embed.w"].data.copy()
    c = data.ERA5_CHANNELS.index("q200")
    wts[c::len(data.ERA5_CHANNELS)] = 0.0  # rows of one channel in the channel-last patch vector
    enc["era5_enc.embed.w"] = Tensor(wts)
    blind = ft.FinetuneModel(model.config, model.mae_config, enc, model.params, model.specs,
                             model.feat_mean, model.feat_std)
    r = at.attribute(blind, windows[1], 6, at.AttributionConfig(steps=8))
    assert np.all(r.attributions[1][..., c] == 0.0)
    assert r.weights["q200"] == 0.0


def test_custom_baseline_equal_to_input(model_and_windows):
    model, windows = model_and_windows
    sat, era5, _ = at.window_arrays(windows[0])
    r = at.attribute(model, windows[0], 6, at.AttributionConfig(steps=4, baseline="custom"), (sat, era5))
    assert all(np.all(a == 0) for a in r.attributions) and r.residual == 0.0
    with pytest.raises(ContractError):
        at.attribute(model, windows[0], 6, at.AttributionConfig(steps=4, baseline="custom"))


def test_ir_only():
    w = at.group_and_normalize({"ir": np.array([0.5, -1.5])})
    assert w["IR"] == 1.0 and sum(v for k, v in w.items() if k != "IR") == 0.0


def test_equal_mass():
    w = at.group_and_normalize({p: -2.0 for p in at.PREDICTORS})
    assert all(v == 1 / 16 for v in w.values()) and len(w) == 16


@given(st.lists(st.floats(0.0, 10.0), min_size=16, max_size=16).filter(lambda v: sum(v) > 1e-3),
       st.floats(1e-3, 1e3))
def test_scale_invariance(values, c):
    raw = dict(zip(at.PREDICTORS, values))
    a = at.group_and_normalize(raw)
    b = at.group_and_normalize({k: c * v for k, v in raw.items()})
    assert all(abs(a[k] - b[k]) < 1e-12 for k in a)
    assert abs(sum(a.values()) - 1) < 1e-9


def test_unmapped_channel():
    with pytest.raises(ContractError):
        at.group_and_normalize({"olr": 1.0})


def test_groups_and_order():
    assert at.PREDICTORS[:3] == ("IR", "WV", "z850") and at.PREDICTORS[-1] == "msl"
    counts = {g: list(at.GROUPS.values()).count(g) for g in set(at.GROUPS.values())}
    assert counts == {"satellite": 2, "surface": 4, "850 hPa": 5, "200 hPa": 5}


def test_csv_layout(model_and_windows):
    model, windows = model_and_windows
    r = at.attribute(model, windows[0], 6, at.AttributionConfig(steps=4))
    lines = at.emit_csv([r]).splitlines()
    assert lines[0].startswith("#") and lines[1] == ",".join(at.CSV_COLUMNS)
    assert len(lines) == 2 + 16 and lines[2].startswith("msw,6,IR,satellite,")
