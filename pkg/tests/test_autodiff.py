import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from cyclonekit import autodiff as ad
from cyclonekit.autodiff import Tensor
from cyclonekit.errors import ContractError, DimensionError

from fd import max_rel_err, numeric_grad

rng = np.random.default_rng(0)


def check_grad(fn, *arrays, tol=1e-4):
    """Compare backward() against central differences for each input of a scalar fn."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    grads = ad.backward(fn(*leaves))
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [Tensor(b) for b in arrays]
            args[i] = Tensor(x)
            return fn(*args).item()
        expected = numeric_grad(f, a)
        assert max_rel_err(grads.of(leaves[i]), expected) < tol, f"input {i}"


def weighted(t, w=None):
    # contract to a scalar with fixed random weights so every output entry matters
    w = np.random.default_rng(t.size).normal(size=t.shape) if w is None else w
    return ad.sum(ad.mul(t, Tensor(w)))


def test_matmul_identity():
    x = rng.normal(size=(2, 3))
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)


def test_matmul_hand_arithmetic():
    out = ad.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    assert out.data.tolist() == [[3], [7]]


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_3x3():
    check_grad(lambda a, b: weighted(ad.matmul(a, b)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))


def test_batched_matmul_grad():
    check_grad(lambda a, b: weighted(ad.matmul(a, b)), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2)))
    check_grad(lambda a, b: weighted(ad.matmul(a, b)), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2)))


def test_softmax_values():
    assert np.allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    big = ad.softmax(Tensor([1000.0, 0.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert abs(big[0] - 1) < 1e-12 and big[1] < 1e-12
    assert np.allclose(ad.softmax(Tensor([1.0, 2.0, 3.0])).data, [0.09003, 0.24473, 0.66524], atol=5e-6)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    y = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(y >= 0)
    assert np.all(np.abs(y.sum(axis=-1) - 1) < 1e-12)


def test_backward_sum_gives_ones():
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    assert np.array_equal(ad.backward(ad.sum(x)).of(x), np.ones((2, 3, 4)))


def test_backward_mse_closed_form():
    xv, yv = rng.normal(size=7), rng.normal(size=7)
    x = Tensor(xv, requires_grad=True)
    loss = ad.mean(ad.square(ad.sub(x, Tensor(yv))))
    assert np.allclose(ad.backward(loss).of(x), 2 * (xv - yv) / 7, atol=1e-15)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(ad.scale(x, 2.0))


def test_backward_visits_shared_node_once():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.mul(x, x)
    loss = ad.sum(ad.add(y, y))
    assert np.allclose(ad.backward(loss).of(x), 4 * x.data)


def test_backward_deterministic():
    a = rng.normal(size=(4, 4))
    outs = []
    for _ in range(2):
        t = Tensor(a, requires_grad=True)
        outs.append(ad.backward(weighted(ad.gelu(ad.matmul(t, t)))).of(t))
    assert np.array_equal(outs[0], outs[1])


ELEMENTWISE = {
    "add": lambda a, b: weighted(ad.add(a, b)),
    "sub": lambda a, b: weighted(ad.sub(a, b)),
    "mul": lambda a, b: weighted(ad.mul(a, b)),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_binary_grad(name):
    check_grad(ELEMENTWISE[name], rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    check_grad(ELEMENTWISE[name], rng.normal(size=(2, 3, 4)), rng.normal(size=(4,)))


def test_trailing_broadcast_only():
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 1))))


UNARY = {
    "gelu": ad.gelu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "exp": ad.exp,
    "square": ad.square,
    "softmax": lambda x: ad.softmax(x, axis=-1),
    "softmax0": lambda x: ad.softmax(x, axis=0),
    "log_softmax": lambda x: ad.log_softmax(x, axis=-1),
    "transpose": lambda x: ad.transpose(x, (1, 0, 2)),
    "reshape": lambda x: ad.reshape(x, (6, 4)),
    "mean_axis": lambda x: ad.mean(x, axis=1),
    "sum_axis": lambda x: ad.sum(x, axis=(0, 2)),
    "take": lambda x: ad.take(x, [2, 0, 2], axis=1),
    "take_axis0_2d": lambda x: ad.take(x, [[0, 1], [1, 1]], axis=0),
    "expand": lambda x: ad.expand(x, (3,)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grad(name):
    check_grad(lambda x: weighted(UNARY[name](x)), rng.normal(size=(2, 3, 4)))


def test_log_grad():
    check_grad(lambda x: weighted(ad.log(x)), rng.uniform(0.5, 2.0, size=(3, 4)))


def test_layer_norm_grad():
    check_grad(lambda x, g, b: weighted(ad.layer_norm(x, g, b)),
               rng.normal(size=(2, 3, 5)), rng.normal(size=5), rng.normal(size=5))


def test_concat_grad():
    check_grad(lambda a, b: weighted(ad.concat([a, b], axis=1)), rng.normal(size=(2, 3)), rng.normal(size=(2, 5)))


def test_embedding_gather_repeats_accumulate():
    table = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    out = ad.embedding(table, [1, 1, 4])
    g = ad.backward(ad.sum(out)).of(table)
    assert g[1].tolist() == [2, 2, 2] and g[4].tolist() == [1, 1, 1] and g[0].tolist() == [0, 0, 0]


def test_tensors_are_immutable():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.scale(x, 3.0)
    assert not y.requires_grad


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([1.0, -1.0]), requires_grad=True)}
    opt = ad.Adam(lr=0.1)
    out = opt.step(p, {"w": np.array([3.0, -0.5])})
    # bias-corrected first step is lr * sign(g) up to eps
    assert np.allclose(out["w"].data, [0.9, -0.9], atol=1e-7)
    assert p["w"].data.tolist() == [1.0, -1.0]


def test_adam_zero_lr_is_identity():
    p = {"w": Tensor(rng.normal(size=3), requires_grad=True)}
    out = ad.Adam(lr=0.0).step(p, {"w": np.ones(3)})
    assert np.array_equal(out["w"].data, p["w"].data)


def test_checkpoint_round_trip(tmp_path):
    params = {"a.w": Tensor(rng.normal(size=(3, 2)), requires_grad=True), "b": Tensor(np.arange(4.0))}
    ad.save_checkpoint(tmp_path / "ck", params, meta={"k": 1})
    loaded, meta = ad.load_checkpoint(tmp_path / "ck")
    assert meta == {"k": 1}
    for k in params:
        assert np.array_equal(loaded[k].data, params[k].data)
        assert loaded[k].requires_grad == params[k].requires_grad
    blob = (tmp_path / "ck" / ad.BLOB).read_bytes()
    assert len(blob) == 8 * (6 + 4)
