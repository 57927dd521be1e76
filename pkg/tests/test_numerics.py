import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freqdiff import numerics as nx
from freqdiff.errors import ConfigurationError, ContractError, DimensionError

GRAD_TOL = 1e-6


def direct_conv(x, w, b, padding="zero"):
    """Quadruple-loop cross-correlation in extended precision (NCHW)."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    p = k // 2
    mode = "constant" if padding == "zero" else "reflect"
    xp = np.pad(x.astype(np.longdouble), ((0, 0), (0, 0), (p, p), (p, p)), mode=mode)
    out = np.zeros((B, O, H, W), dtype=np.longdouble)
    for bb, o, i, j in itertools.product(range(B), range(O), range(H), range(W)):
        acc = np.longdouble(0 if b is None else b[o])
        for c, u, v in itertools.product(range(C), range(k), range(k)):
            acc += xp[bb, c, i + u, j + v] * w[o, c, u, v]
        out[bb, o, i, j] = acc
    return out.astype(np.float64)


def test_conv_identity_1x1():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = nx.conv2d(nx.Tensor(x), nx.Tensor(np.ones((1, 1, 1, 1))), nx.Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x)


def test_conv_impulse_response(rng):
    x = np.zeros((1, 1, 7, 7))
    x[0, 0, 3, 3] = 1.0
    w = rng.standard_normal((1, 1, 3, 3))
    out = nx.conv2d(nx.Tensor(x), nx.Tensor(w)).data[0, 0]
    # cross-correlation places the flipped kernel around the impulse
    assert np.allclose(out[2:5, 2:5], w[0, 0, ::-1, ::-1], atol=0)
    out[2:5, 2:5] = 0
    assert not out.any()


@pytest.mark.parametrize("padding", ["zero", "reflect"])
@pytest.mark.parametrize("layout", ["NCHW", "NHWC"])
def test_conv_matches_direct_summation(rng, padding, layout):
    x = rng.standard_normal((1, 2, 8, 8))
    w = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    expected = direct_conv(x, w, b, padding)
    xin = x if layout == "NCHW" else x.transpose(0, 2, 3, 1)
    out = nx.conv2d(nx.Tensor(xin), nx.Tensor(w), nx.Tensor(b), padding, layout).data
    if layout == "NHWC":
        out = out.transpose(0, 3, 1, 2)
    assert np.allclose(out, expected, rtol=0, atol=1e-12)


def test_conv_is_linear(rng):
    x, y = rng.standard_normal((2, 2, 3, 6, 6))
    w = nx.Tensor(rng.standard_normal((2, 3, 3, 3)))
    a, b = 1.7, -0.3

    def conv(z):
        return nx.conv2d(nx.Tensor(z), w).data

    assert np.allclose(conv(a * x + b * y), a * conv(x) + b * conv(y), rtol=0, atol=1e-12)


def test_conv_shape_errors():
    x = nx.Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(DimensionError):
        nx.conv2d(x, nx.Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        nx.conv2d(x, nx.Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ConfigurationError):
        nx.conv2d(x, nx.Tensor(np.zeros((1, 2, 3, 3))), padding="circular")


def test_maxpool_block_and_constant():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[None, None]
    assert nx.maxpool2(nx.Tensor(x)).data.item() == 4.0
    c = np.full((1, 2, 6, 6), 0.7)
    assert np.array_equal(nx.maxpool2(nx.Tensor(c)).data, np.full((1, 2, 3, 3), 0.7))


def test_maxpool_matches_direct(rng):
    x = rng.standard_normal((1, 1, 4, 4))
    out = nx.maxpool2(nx.Tensor(x)).data[0, 0]
    for i, j in itertools.product(range(2), range(2)):
        assert out[i, j] == max(x[0, 0, 2 * i + u, 2 * j + v] for u in range(2) for v in range(2))


def test_maxpool_tie_routes_to_first():
    x = nx.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    nx.sum_all(nx.maxpool2(x)).backward()
    assert x.grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_odd_size_rejected():
    with pytest.raises(DimensionError):
        nx.maxpool2(nx.Tensor(np.zeros((1, 1, 3, 4))))


def test_upsample_examples(rng):
    assert nx.upsample_nearest2(nx.Tensor(np.ones((1, 1, 1, 1)))).data[0, 0].tolist() == [[1, 1], [1, 1]]
    x = rng.standard_normal((1, 1, 3, 3))
    out = nx.upsample_nearest2(nx.Tensor(x)).data[0, 0]
    for i, j in itertools.product(range(6), range(6)):
        assert out[i, j] == x[0, 0, i // 2, j // 2]


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_pool_after_upsample_on_block_constant(h, w, seed):
    coarse = np.random.default_rng(seed).standard_normal((1, 2, h, w))
    block = np.repeat(np.repeat(coarse, 2, axis=2), 2, axis=3)
    once = nx.upsample_nearest2(nx.maxpool2(nx.Tensor(block))).data
    assert np.array_equal(once, block)


def test_batchnorm_identity_on_standardized_input(rng):
    x = rng.standard_normal((8, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    st_ = nx.BatchNormState.create(3, np.float64, eps=0.0)
    out = nx.batchnorm(nx.Tensor(x), nx.Tensor(np.ones(3)), nx.Tensor(np.zeros(3)), st_, True)
    assert np.allclose(out.data, x, atol=1e-12)


def test_batchnorm_inverse_transform(rng):
    x = 3.0 + 2.5 * rng.standard_normal((6, 2, 4, 4))
    mu, sd = x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))
    st_ = nx.BatchNormState.create(2, np.float64, eps=0.0)
    out = nx.batchnorm(nx.Tensor(x), nx.Tensor(sd), nx.Tensor(mu), st_, True)
    assert np.allclose(out.data, x, atol=1e-12)


def test_batchnorm_output_statistics(rng):
    x = rng.standard_normal((4, 3, 6, 6)) * 4 - 1
    gamma, beta = np.array([0.5, 1.0, 2.0]), np.array([-1.0, 0.0, 3.0])
    st_ = nx.BatchNormState.create(3, np.float64)
    out = nx.batchnorm(nx.Tensor(x), nx.Tensor(gamma), nx.Tensor(beta), st_, True).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-10)
    assert np.allclose(out.std(axis=(0, 2, 3)), gamma, rtol=1e-4)


def test_batchnorm_running_stats_and_eval(rng):
    x = rng.standard_normal((4, 2, 3, 3)) + 5.0
    st_ = nx.BatchNormState.create(2, np.float64, momentum=1.0)
    nx.batchnorm(nx.Tensor(x), nx.Tensor(np.ones(2)), nx.Tensor(np.zeros(2)), st_, True)
    assert np.allclose(st_.running_mean, x.mean(axis=(0, 2, 3)))
    assert np.allclose(st_.running_var, x.var(axis=(0, 2, 3), ddof=1))
    out = nx.batchnorm(nx.Tensor(x[:1]), nx.Tensor(np.ones(2)), nx.Tensor(np.zeros(2)), st_, False).data
    expected = (x[:1] - st_.running_mean[None, :, None, None]) / np.sqrt(st_.running_var[None, :, None, None] + st_.eps)
    assert np.allclose(out, expected)


def test_batchnorm_rejects_single_sample_training():
    st_ = nx.BatchNormState.create(1, np.float64)
    with pytest.raises(ConfigurationError):
        nx.batchnorm(nx.Tensor(np.zeros((1, 1, 2, 2))), nx.Tensor(np.ones(1)), nx.Tensor(np.zeros(1)), st_, True)


def test_mse_examples(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    assert nx.mse_mean(nx.Tensor(x), x).item() == 0.0
    assert nx.mse_mean(nx.Tensor(x), x + 0.25).item() == pytest.approx(0.0625, abs=1e-15)
    y = rng.standard_normal(x.shape)
    assert nx.mse_mean(nx.Tensor(x), y).item() == pytest.approx(sum((a - b) ** 2 for a, b in zip(x.ravel(), y.ravel())) / x.size, rel=1e-13)
    with pytest.raises(DimensionError):
        nx.mse_mean(nx.Tensor(x), y[:1])


def test_weighted_mse_zero_weight_has_zero_gradient(rng):
    pred = nx.Tensor(rng.standard_normal((2, 4, 3, 3)), requires_grad=True)
    w = np.zeros((2, 4, 1, 1))
    w[0, 1] = w[1, 3] = 1.0
    nx.weighted_mse(pred, rng.standard_normal(pred.shape), w).backward()
    dead = np.broadcast_to(w == 0, pred.shape)
    assert np.all(pred.grad[dead] == 0.0)
    assert np.all(pred.grad[~dead] != 0.0)


def test_relu_subgradient_at_zero():
    x = nx.Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    nx.sum_all(nx.relu(x)).backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_concat_shape_error():
    with pytest.raises(DimensionError):
        nx.concat_channels([nx.Tensor(np.zeros((1, 1, 2, 2))), nx.Tensor(np.zeros((1, 1, 4, 4)))])


def test_grad_check_trivial_cases(rng):
    x = nx.Tensor(rng.standard_normal((3, 4)))
    assert nx.grad_check(nx.sum_all, x) < 1e-9
    x.grad = None
    nx.mse_mean(x, np.zeros(x.shape)).backward()
    assert np.allclose(x.grad, 2 * x.data / x.size)
    assert nx.grad_check(lambda x: nx.mse_mean(x, np.zeros(x.shape)), x) < GRAD_TOL


def test_grad_check_rejects_non_scalar(rng):
    with pytest.raises(ContractError):
        nx.grad_check(nx.relu, nx.Tensor(rng.standard_normal(3)))


# every differentiable primitive, 10 random small instances each


def _targets(rng, shape):
    return rng.standard_normal(shape)


def _case_conv(rng, layout, padding):
    x = nx.Tensor(rng.standard_normal((2, 2, 5, 5) if layout == "NCHW" else (2, 5, 5, 2)))
    w = nx.Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = nx.Tensor(rng.standard_normal(3))
    tgt = _targets(rng, nx.conv2d(x, w, b, padding, layout).shape)
    return (lambda x, w, b: nx.mse_mean(nx.conv2d(x, w, b, padding, layout), tgt)), [x, w, b]


def _case_unary(op, shape):
    def make(rng, layout):
        x = nx.Tensor(rng.standard_normal(shape))
        tgt = _targets(rng, op(x, layout).shape)
        return (lambda x: nx.mse_mean(op(x, layout), tgt)), [x]

    return make


def _case_bn(rng, layout, training):
    x = nx.Tensor(rng.standard_normal((3, 2, 4, 4)) * 2 + 1)
    C = x.shape[1] if layout == "NCHW" else x.shape[3]
    g, b = nx.Tensor(rng.uniform(0.5, 1.5, C)), nx.Tensor(rng.standard_normal(C))
    state = nx.BatchNormState(rng.standard_normal(C), rng.uniform(0.5, 2, C), 0.1, 1e-5)
    tgt = _targets(rng, x.shape)
    return (lambda x, g, b: nx.mse_mean(nx.batchnorm(x, g, b, state, training, layout), tgt)), [x, g, b]


PRIMITIVES = {
    "conv2d-zero-NCHW": lambda r: _case_conv(r, "NCHW", "zero"),
    "conv2d-reflect-NCHW": lambda r: _case_conv(r, "NCHW", "reflect"),
    "conv2d-zero-NHWC": lambda r: _case_conv(r, "NHWC", "zero"),
    "conv2d-reflect-NHWC": lambda r: _case_conv(r, "NHWC", "reflect"),
    "maxpool2-NCHW": lambda r: _case_unary(nx.maxpool2, (2, 2, 4, 6))(r, "NCHW"),
    "maxpool2-NHWC": lambda r: _case_unary(nx.maxpool2, (2, 4, 6, 2))(r, "NHWC"),
    "upsample2-NCHW": lambda r: _case_unary(nx.upsample_nearest2, (2, 2, 3, 2))(r, "NCHW"),
    "upsample2-NHWC": lambda r: _case_unary(nx.upsample_nearest2, (2, 3, 2, 2))(r, "NHWC"),
    "batchnorm-train": lambda r: _case_bn(r, "NCHW", True),
    "batchnorm-eval": lambda r: _case_bn(r, "NCHW", False),
    "batchnorm-train-NHWC": lambda r: _case_bn(r, "NHWC", True),
    "relu": lambda r: _case_unary(lambda x, _: nx.relu(x), (3, 7))(r, None),
    "add-broadcast": lambda r: (lambda a, b: nx.mse_mean(nx.add(a, b), np.ones((2, 3, 4)))),
    "mul-broadcast": None,
    "concat": None,
    "linear": None,
    "reshape": None,
    "transpose": None,
    "weighted_mse": None,
}


def _instance(name, rng):
    if name == "add-broadcast":
        a, b = nx.Tensor(rng.standard_normal((2, 3, 4))), nx.Tensor(rng.standard_normal((3, 1)))
        tgt = rng.standard_normal((2, 3, 4))
        return (lambda a, b: nx.mse_mean(nx.add(a, b), tgt)), [a, b]
    if name == "mul-broadcast":
        a, b = nx.Tensor(rng.standard_normal((2, 3, 4))), nx.Tensor(rng.standard_normal((1, 4)))
        tgt = rng.standard_normal((2, 3, 4))
        return (lambda a, b: nx.mse_mean(nx.mul(a, b), tgt)), [a, b]
    if name == "concat":
        a, b = nx.Tensor(rng.standard_normal((2, 1, 3, 3))), nx.Tensor(rng.standard_normal((2, 2, 3, 3)))
        tgt = rng.standard_normal((2, 3, 3, 3))
        return (lambda a, b: nx.mse_mean(nx.concat_channels([a, b]), tgt)), [a, b]
    if name == "linear":
        x, w, b = (nx.Tensor(rng.standard_normal(s)) for s in ((3, 4), (4, 5), (5,)))
        tgt = rng.standard_normal((3, 5))
        return (lambda x, w, b: nx.mse_mean(nx.linear(x, w, b), tgt)), [x, w, b]
    if name == "reshape":
        x = nx.Tensor(rng.standard_normal((2, 6)))
        tgt = rng.standard_normal((3, 4))
        return (lambda x: nx.mse_mean(nx.reshape(x, (3, 4)), tgt)), [x]
    if name == "transpose":
        x = nx.Tensor(rng.standard_normal((2, 3, 4, 5)))
        tgt = rng.standard_normal((2, 4, 5, 3))
        return (lambda x: nx.mse_mean(nx.to_channels_last(x), tgt)), [x]
    if name == "weighted_mse":
        p, q = nx.Tensor(rng.standard_normal((2, 4, 3, 3))), nx.Tensor(rng.standard_normal((2, 4, 3, 3)))
        w = rng.integers(0, 2, size=(2, 4, 1, 1)).astype(float)
        w[0, 0] = 1.0
        return (lambda p, q: nx.weighted_mse(p, q, w)), [p, q]
    return PRIMITIVES[name](rng)


@pytest.mark.parametrize("name", list(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(10):
        f, points = _instance(name, np.random.default_rng(seed))
        worst = max(worst, nx.grad_check(f, points, step=1e-5))
    assert worst <= GRAD_TOL, f"{name}: max relative error {worst:.3e}"


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    a = nx.conv2d(nx.Tensor(x), nx.Tensor(w)).data
    b = nx.conv2d(nx.Tensor(x.copy()), nx.Tensor(w.copy())).data
    assert a.tobytes() == b.tobytes()


def test_backward_visits_shared_nodes_once(rng):
    x = nx.Tensor(rng.standard_normal(4), requires_grad=True)
    y = nx.add(x, x)
    z = nx.add(y, y)
    nx.sum_all(z).backward()
    assert np.array_equal(x.grad, np.full(4, 4.0))
