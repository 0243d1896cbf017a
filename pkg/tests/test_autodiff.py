"""Backward pass: hand-worked cases plus finite-difference checks per primitive."""

import numpy as np
import pytest

from tabmodal import tensor as T


@pytest.fixture(autouse=True)
def float64_mode():
    with T.precision("float64"):
        yield


def test_square_sum_gradient():
    w = T.tensor([1.0, 2.0])
    with T.Tape() as tape:
        wt = tape.param("w", w)
        loss = T.sum_(T.mul(wt, wt))
    grads = T.backward(tape, loss)
    np.testing.assert_array_equal(grads["w"].numpy(), [2.0, 4.0])


def test_sigmoid_times_constant():
    c = T.tensor([1.0])
    with T.Tape() as tape:
        ct = tape.param("c", c)
        loss = T.sum_(T.mul(T.sigmoid(T.tensor([0.0])), ct))
    grads = T.backward(tape, loss)
    np.testing.assert_allclose(grads["c"].numpy(), [0.5])


def test_lse_equal_logits_gradient():
    a = T.tensor([0.3, 0.3])
    with T.Tape() as tape:
        at = tape.param("a", a)
        loss = T.log_sum_exp(at, axis=0)
    grads = T.backward(tape, loss)
    np.testing.assert_allclose(grads["a"].numpy(), [0.5, 0.5], atol=1e-12)


def test_off_path_leaf_gets_zeros():
    with T.Tape() as tape:
        used = tape.param("used", T.tensor([2.0]))
        unused = tape.param("unused", T.tensor([[1.0, 2.0]]))
        loss = T.sum_(used)
    grads = T.backward(tape, loss)
    np.testing.assert_array_equal(grads["unused"].numpy(), [[0.0, 0.0]])
    assert grads["used"].numpy() == pytest.approx([1.0])


def test_non_scalar_loss_rejected():
    with T.Tape() as tape:
        x = tape.param("x", T.tensor([1.0, 2.0]))
        y = T.mul(x, x)
    with pytest.raises(T.ShapeError, match="scalar"):
        T.backward(tape, y)


def test_diamond_graph_accumulates():
    # loss = x*x + x  ->  d/dx = 2x + 1
    with T.Tape() as tape:
        x = tape.param("x", T.tensor([3.0]))
        loss = T.sum_(T.add(T.mul(x, x), x))
    grads = T.backward(tape, loss)
    np.testing.assert_allclose(grads["x"].numpy(), [7.0])


def test_grad_check_sum_is_exact():
    rng = np.random.default_rng(0)
    x = T.tensor(rng.normal(size=(3, 4)))
    assert T.grad_check(T.sum_, x) < 1e-10


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        T.grad_check(T.sum_, T.tensor([1.0]), eps=0.5)


def _random_input(rng, shape, positive=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    return T.tensor(x)


PRIMITIVE_CASES = {
    "add": lambda x: T.sum_(T.add(x, T.tensor(np.linspace(-1, 1, x.size).reshape(x.shape)))),
    "add_bcast": lambda x: T.sum_(T.add(T.broadcast_to(x, (3,) + x.shape), T.scalar(0.5))),
    "sub": lambda x: T.sum_(T.sub(T.scalar(1.0), x)),
    "mul": lambda x: T.sum_(T.mul(x, T.tensor(np.linspace(0.5, 2, x.size).reshape(x.shape)))),
    "mul_self": lambda x: T.sum_(T.mul(x, x)),
    "matmul": lambda x: T.sum_(T.matmul(x, x)) if x.ndim == 2 and x.shape[0] == x.shape[1]
    else T.sum_(x),
    "relu": lambda x: T.sum_(T.relu(x)),
    "sigmoid": lambda x: T.sum_(T.sigmoid(x)),
    "tanh": lambda x: T.sum_(T.tanh(x)),
    "exp": lambda x: T.sum_(T.exp(x)),
    "log": lambda x: T.sum_(T.log(x)),
    "sqrt": lambda x: T.sum_(T.sqrt(x)),
    "power": lambda x: T.sum_(T.power(x, 3.0)),
    "mean": lambda x: T.mean(x),
    "max": lambda x: T.sum_(T.max_(x, axis=-1)),
    "softmax": lambda x: T.sum_(T.mul(T.softmax(x, axis=-1),
                                      T.tensor(np.linspace(0, 1, x.size).reshape(x.shape)))),
    "log_sum_exp": lambda x: T.sum_(T.log_sum_exp(x, axis=-1)),
    "l2_normalize": lambda x: T.sum_(T.mul(T.l2_normalize(x, axis=-1),
                                           T.tensor(np.linspace(-1, 1, x.size).reshape(x.shape)))),
    "reshape": lambda x: T.sum_(T.mul(T.reshape(x, (-1,)),
                                      T.tensor(np.linspace(0, 2, x.size)))),
    "transpose": lambda x: T.sum_(T.mul(T.transpose(x),
                                        T.tensor(np.ones(tuple(reversed(x.shape)))))),
    "slice": lambda x: T.sum_(T.slice_(x, 0, 0, max(1, x.shape[0] - 1))),
    "concat": lambda x: T.sum_(T.mul(T.concat([x, x], axis=0),
                                     T.tensor(np.linspace(0, 1, 2 * x.size).reshape((2 * x.shape[0],) + x.shape[1:])))),
    "broadcast_to": lambda x: T.sum_(T.power(T.broadcast_to(x, (4,) + x.shape), 2.0)),
}

POSITIVE_ONLY = {"log", "sqrt"}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_every_primitive_grad_check(name):
    # >= 20 random shapes/seeds per primitive, rel err < 1e-5 at 64-bit
    fn = PRIMITIVE_CASES[name]
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        ndim = rng.integers(1, 4)
        shape = tuple(int(s) for s in rng.integers(2, 5, size=ndim))
        if name == "matmul":
            shape = (3, 3)
        x = _random_input(rng, shape, positive=name in POSITIVE_ONLY)
        worst = max(worst, T.grad_check(fn, x))
    assert worst < 1e-5, f"{name}: max rel error {worst}"


def test_conv1d_grad_check_both_args():
    for seed in range(20):
        rng = np.random.default_rng(2000 + seed)
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        x = rng.normal(size=(2, 3, 7))
        w = rng.normal(size=(2, 3, 3))
        err_x = T.grad_check(
            lambda t: T.sum_(T.conv1d(t, T.tensor(w), stride=stride, pad=pad)), T.tensor(x))
        err_w = T.grad_check(
            lambda t: T.sum_(T.conv1d(T.tensor(x), t, stride=stride, pad=pad)), T.tensor(w))
        assert err_x < 1e-5 and err_w < 1e-5


def test_composed_conv_relu_mean_grad_check():
    rng = np.random.default_rng(7)
    x = T.tensor(rng.normal(size=(2, 2, 8)))
    w = rng.normal(size=(3, 2, 3))

    def f(t):
        return T.mean(T.relu(T.conv1d(t, T.tensor(w), stride=1, pad=1)))

    assert T.grad_check(f, x) < 1e-5
