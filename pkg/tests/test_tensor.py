import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import numeric_grad, rel_error
from povl.tensor import (
    Adam,
    NumericError,
    Tensor,
    UsageError,
    attention_bias,
    concat,
    gelu,
    layer_norm,
    linear,
    masked_softmax,
)


def check(build, *arrays, tol=1e-6, floor=1e-2):
    """Compare autograd against central differences for a scalar ``build(*tensors)``."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*ts).backward()
    for t in ts:
        num = numeric_grad(lambda: float(build(*[Tensor(u.data) for u in ts]).data), t.data)
        assert np.all(rel_error(t.grad, num, floor=floor) < tol)


rng = np.random.default_rng(3)


def test_elementwise_and_reductions():
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    check(lambda x, y: ((x * y - y / (x.square() + 1.0)).exp().mean() + (x + y).tanh().sum()), a, b)
    check(lambda x: (x.square() + 1.0).log().sum(axis=0).sum(), a)
    check(lambda x: x.reshape(4, 3)[1:, ::2].transpose(1, 0).sum(), a)


def test_fancy_index_accumulates():
    a = rng.normal(size=(5,))
    check(lambda x: (x[np.array([0, 0, 3])] * Tensor(np.array([1.0, 2.0, 3.0]))).sum(), a)


def test_matmul_linear_concat():
    x, w, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5,))
    check(lambda x, w, b: linear(x, w, b).square().sum(), x, w, b)
    check(lambda x, w: (x @ w).tanh().sum(), x, w)
    check(lambda x, y: concat([x, y], axis=-1).square().sum(), x, rng.normal(size=(2, 3, 2)))


def test_layer_norm_gelu():
    x, g, b = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    check(lambda x, g, b: (layer_norm(x, g, b) * Tensor(np.arange(6.0))).sum(), x, g, b)
    check(lambda x: gelu(x).sum(), 3 * x)


def test_softmax_masked_gradient():
    s = rng.normal(size=(2, 4))
    m = np.array([[True, True, False, True], [False, True, True, True]])
    w = Tensor(np.arange(4.0))
    check(lambda s: (masked_softmax(s, m) * w).sum(), s)
    t = Tensor(s.copy(), requires_grad=True)
    (masked_softmax(t, m) * w).sum().backward()
    assert np.all(t.grad[~m] == 0.0)


def test_softmax_single_key_and_uniform():
    s = Tensor(rng.normal(size=(1, 5)))
    m = np.array([[False, False, True, False, False]])
    p = masked_softmax(s, m).data
    assert p[0, 2] == 1.0 and np.all(p[0, [0, 1, 3, 4]] == 0.0)
    assert np.allclose(masked_softmax(Tensor(np.full((1, 4), 0.7)), None).data, 0.25, atol=0, rtol=1e-15)


def test_fully_masked_row_raises():
    with pytest.raises(NumericError):
        attention_bias(np.array([[True, False], [False, False]]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_sums_to_one(xs):
    p = masked_softmax(Tensor(np.array(xs)[None]), None).data
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0, abs=1e-12)


def test_zero_loss_zero_gradient():
    x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    (x * 0.0).sum().backward()
    assert np.all(x.grad == 0.0)


def test_backward_usage_errors():
    with pytest.raises(UsageError):
        Tensor(np.ones(3)).sum().backward()
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    y.backward()
    with pytest.raises(UsageError):
        y.backward()


def test_numpy_operands_defer_to_tensor():
    x = Tensor(np.ones(3), requires_grad=True)
    y = np.arange(3.0) - x
    assert isinstance(y, Tensor)


def test_adam_zero_gradient_keeps_parameters():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(lr=0.1)
    for _ in range(5):
        opt.step(p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = np.array([3.0, -0.01, 100.0])
    Adam(lr=1e-3).step(p, {"w": g})
    assert np.allclose(p["w"] - [1.0, -2.0, 0.5], -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_converges_on_quadratic():
    A = np.diag([1.0, 4.0, 9.0])
    p = {"w": np.array([2.0, -1.0, 0.5])}
    opt = Adam(lr=0.05)
    for _ in range(200):
        opt.step(p, {"w": A @ p["w"]})
    opt.lr = 0.005
    for _ in range(200):
        opt.step(p, {"w": A @ p["w"]})
    assert np.linalg.norm(A @ p["w"]) < 1e-3


def test_adam_deterministic_and_clipped():
    def run():
        p = {"w": np.ones(4)}
        opt = Adam(lr=0.01, clip_norm=1.0)
        for k in range(10):
            opt.step(p, {"w": np.full(4, 10.0 * (k + 1))})
        return p["w"]
    assert np.array_equal(run(), run())
