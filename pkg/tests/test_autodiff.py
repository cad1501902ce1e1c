import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nern import autodiff as ad
from oracles import central_diff, kl_closed_form, naive_conv2d, rel_err

F64 = np.float64


def T(a, grad=True):
    return ad.Tensor(np.asarray(a, dtype=F64), requires_grad=grad)


def grad_check(build, arrays, tol):
    """build(*tensors) -> scalar Tensor; compares every input's gradient against central differences."""
    tensors = [T(a) for a in arrays]
    loss = build(*tensors)
    grads = ad.backward(loss, tensors)

    def value():
        return build(*[ad.Tensor(a) for a in arrays]).item()

    for a, g in zip(arrays, grads):
        num = central_diff(value, a)
        assert rel_err(g, num) < tol, (rel_err(g, num), g, num)


# -- conv2d ---------------------------------------------------------------------
def test_conv_all_ones_padded():
    x = ad.Tensor(np.ones((1, 1, 2, 2)))
    w = ad.Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w, None, 1, 1)
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out.data == 4.0)


def test_conv_identity_kernel_selects_channel_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 5, 4))
    w = np.zeros((1, 3, 1, 1))
    w[0, 0] = 1.0
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w))
    np.testing.assert_array_equal(out.data[:, 0], x[:, 0])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride, pad)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_weight_gradient_of_sum_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    xt, wt = ad.Tensor(x), T(w)
    g = ad.backward(ad.tsum(ad.conv2d(xt, wt, None, 1, 1)), [wt])[0]
    num = central_diff(lambda: ad.conv2d(ad.Tensor(x), ad.Tensor(w), None, 1, 1).data.sum(), w)
    assert rel_err(g, num) < 1e-6


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv_all_gradients(stride, pad):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    proj = rng.normal(size=(2, 3, (5 + 2 * pad - 3) // stride + 1, (5 + 2 * pad - 3) // stride + 1))
    grad_check(lambda xx, ww, bb: ad.tsum(ad.mul(ad.conv2d(xx, ww, bb, stride, pad), ad.Tensor(proj))), [x, w, b], 1e-6)


def test_conv_errors():
    x = ad.Tensor(np.ones((1, 2, 4, 4)))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(x, ad.Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(x, ad.Tensor(np.ones((1, 2, 5, 5))))
    assert ad.conv_output_size(4, 3, 2, 1) == 2


# -- dense --------------------------------------------------------------------------
def test_dense_identity_and_zero_input():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    out = ad.dense(ad.Tensor(x), ad.Tensor(np.eye(5)), ad.Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, x)
    b = rng.normal(size=3)
    out = ad.dense(ad.Tensor(np.zeros((2, 5))), ad.Tensor(rng.normal(size=(3, 5))), ad.Tensor(b))
    np.testing.assert_array_equal(out.data, np.broadcast_to(b, (2, 3)))


def test_dense_gradients():
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5)
    proj = rng.normal(size=(3, 5))
    grad_check(lambda xx, ww, bb: ad.tsum(ad.mul(ad.dense(xx, ww, bb), ad.Tensor(proj))), [x, w, b], 1e-6)


def test_dense_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.dense(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 5))), ad.Tensor(np.ones(4)))


# -- single-op gradient suite --------------------------------------------------------
_RNG = np.random.default_rng(5)
_A = _RNG.normal(size=(3, 4))
_B = _RNG.normal(size=(3, 4))
_POS = _RNG.uniform(0.5, 2.0, size=(3, 4))
_P = _RNG.normal(size=(3, 4))

SINGLE_OPS = {
    "add": (lambda a, b: ad.tsum(ad.mul(ad.add(a, b), ad.Tensor(_P))), [_A, _B]),
    "mul": (lambda a, b: ad.tsum(ad.mul(a, b)), [_A, _B]),
    "div": (lambda a, b: ad.tsum(ad.div(a, b)), [_A, _POS]),
    "neg": (lambda a: ad.tsum(ad.mul(ad.neg(a), ad.Tensor(_P))), [_A]),
    "relu": (lambda a: ad.tsum(ad.mul(ad.relu(a), ad.Tensor(_P))), [_A + np.sign(_A) * 0.1]),
    "exp": (lambda a: ad.tsum(ad.exp(a)), [_A]),
    "log": (lambda a: ad.tsum(ad.log(a)), [_POS]),
    "sqrt": (lambda a: ad.tsum(ad.sqrt(a)), [_POS]),
    "square": (lambda a: ad.tsum(ad.mul(ad.square(a), ad.Tensor(_P))), [_A]),
    "mean_axis": (lambda a: ad.tsum(ad.mul(ad.mean(a, axis=1), ad.Tensor(_P[:, 0]))), [_A]),
    "sum_keepdims": (lambda a: ad.tsum(ad.mul(ad.tsum(a, axis=0, keepdims=True), ad.Tensor(_P[:1]))), [_A]),
    "reshape": (lambda a: ad.tsum(ad.mul(ad.reshape(a, (4, 3)), ad.Tensor(_P.reshape(4, 3)))), [_A]),
    "transpose": (lambda a: ad.tsum(ad.mul(ad.transpose(a), ad.Tensor(_P.T))), [_A]),
    "getitem_basic": (lambda a: ad.tsum(ad.mul(a[1:, ::2], ad.Tensor(_P[1:, ::2]))), [_A]),
    "getitem_fancy": (lambda a: ad.tsum(ad.mul(ad.getitem(a, (np.array([[0], [2], [0]]), np.array([[1, 3]]))), ad.Tensor(_P[:3, :2]))), [_A]),
    "concat": (lambda a, b: ad.tsum(ad.mul(ad.concat([a, b], axis=1), ad.Tensor(np.hstack([_P, _P])))), [_A, _B]),
    "l2_norm_rows": (lambda a: ad.tsum(ad.mul(ad.l2_norm(a, axis=1), ad.Tensor(_P[:, 0]))), [_A]),
    "l2_norm_all": (lambda a: ad.l2_norm(a), [_A]),
    "matmul": (lambda a, b: ad.tsum(ad.mul(ad.matmul(a, ad.transpose(b)), ad.Tensor(_P[:, :3]))), [_A, _B]),
    "softmax": (lambda a: ad.tsum(ad.mul(ad.softmax(a), ad.Tensor(_P))), [_A]),
    "log_softmax": (lambda a: ad.tsum(ad.mul(ad.log_softmax(a), ad.Tensor(_P))), [_A]),
    "cross_entropy": (lambda a: ad.cross_entropy(a, np.array([0, 3, 1])), [_A]),
    "kl_div_logits": (lambda a: ad.kl_div_logits(ad.Tensor(_B), a), [_A]),
    "clamp_min": (lambda a: ad.tsum(ad.mul(ad.clamp_min(a, 0.05), ad.Tensor(_P))), [_A]),
}


@pytest.mark.parametrize("name", sorted(SINGLE_OPS))
def test_single_op_gradients(name):
    fn, arrays = SINGLE_OPS[name]
    grad_check(fn, [a.copy() for a in arrays], 1e-6)


def test_kl_div_distribution_gradient():
    rng = np.random.default_rng(6)
    p = rng.dirichlet(np.ones(4), size=3)
    logits = rng.normal(size=(3, 4))
    grad_check(lambda z: ad.kl_div(ad.Tensor(p), ad.softmax(z)), [logits], 1e-6)


def test_composed_pipeline_gradient():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 2, 5, 5))
    w1 = rng.normal(size=(3, 2, 3, 3))
    b1 = rng.normal(size=3) * 0.1 + 0.1
    hw = rng.normal(size=(4, 3))
    hb = rng.normal(size=4)
    target = rng.normal(size=(2, 4))

    def build(ww, bb, hww, hbb):
        h = ad.relu(ad.conv2d(ad.Tensor(x), ww, bb, 2, 1))
        pooled = ad.mean(h, axis=(2, 3))
        return ad.kl_div_logits(ad.Tensor(target), ad.dense(pooled, hww, hbb))

    grad_check(build, [w1, b1, hw, hb], 1e-4)


# -- probabilities ------------------------------------------------------------------------
def test_softmax_of_zeros_is_uniform():
    p = ad.softmax(ad.Tensor(np.zeros((2, 5))))
    np.testing.assert_allclose(p.data, 0.2)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    p = ad.softmax(ad.Tensor(np.array([vals], dtype=F64)))
    assert abs(p.data.sum() - 1.0) < 1e-6


def test_kl_examples():
    p = ad.Tensor(np.array([[2 / 3, 1 / 3]]))
    q = ad.Tensor(np.array([[0.5, 0.5]]))
    want = (2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3)
    assert abs(ad.kl_div(p, q).item() - want) < 1e-12
    assert abs(want - 0.05663) < 1e-5
    assert ad.kl_div(p, p).item() == pytest.approx(0.0, abs=1e-12)
    # logits (ln 2, 0) are the distribution (2/3, 1/3)
    kd = ad.kl_div_logits(ad.Tensor(np.array([[math.log(2), 0.0]])), ad.Tensor(np.zeros((1, 2))))
    assert abs(kd.item() - want) < 1e-9


def test_kl_zero_convention_and_errors():
    p = ad.Tensor(np.array([[1.0, 0.0]]))
    q = ad.Tensor(np.array([[0.5, 0.5]]))
    assert ad.kl_div(p, q).item() == pytest.approx(math.log(2))
    with pytest.raises(ad.AutodiffError):
        ad.kl_div(q, p)  # q has a zero where p is positive
    with pytest.raises(ad.AutodiffError):
        ad.kl_div(ad.Tensor(np.array([[0.7, 0.7]])), q)


@given(st.integers(0, 10_000))
def test_kl_nonnegative_and_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3), size=1)
    q = rng.dirichlet(np.ones(3), size=1)
    v = ad.kl_div(ad.Tensor(p), ad.Tensor(q)).item()
    assert v >= -1e-12
    assert v == pytest.approx(kl_closed_form(p[0], q[0]), rel=1e-9, abs=1e-12)


# -- backward contract ------------------------------------------------------------------------
def test_sum_of_squares_gradient_exact():
    w = np.array([0.5, -1.25, 3.0])
    t = T(w)
    g = ad.backward(ad.tsum(ad.mul(t, t)), [t])[0]
    np.testing.assert_array_equal(g, 2 * w)


def test_detached_parameter_gets_zero_gradient():
    a, b = T([1.0, 2.0]), T([3.0, 4.0])
    g = ad.backward(ad.tsum(ad.square(a)), [a, b])
    np.testing.assert_array_equal(g[1], np.zeros(2))
    c = T([1.0, 2.0])
    g = ad.backward(ad.tsum(ad.mul(c.detach(), a)), [c])
    np.testing.assert_array_equal(g[0], np.zeros(2))


def test_backward_errors():
    a = T([1.0, 2.0])
    with pytest.raises(ad.GraphError):
        ad.backward(ad.mul(a, a))
    loss = ad.tsum(ad.square(a))
    ad.backward(loss)
    with pytest.raises(ad.GraphError):
        ad.backward(loss)


def test_shared_subexpression_accumulates():
    a = T([2.0])
    y = ad.mul(a, a)
    g = ad.backward(ad.tsum(ad.add(y, y)), [a])[0]
    np.testing.assert_array_equal(g, [8.0])


def test_deterministic_gradients():
    def run():
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 2, 6, 6)).astype(np.float32)
        w = ad.Tensor(rng.normal(size=(3, 2, 3, 3)).astype(np.float32), requires_grad=True)
        loss = ad.tsum(ad.relu(ad.conv2d(ad.Tensor(x), w, None, 1, 1)))
        return loss.data.copy(), ad.backward(loss, [w])[0]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_tensor_invariants():
    with pytest.raises(ad.ShapeError):
        ad.Tensor(np.zeros((0, 3)))
    t = ad.Tensor([1, 2, 3])
    assert t.dtype == np.float32
    assert ad.Tensor(np.zeros(2), dtype=np.float64).dtype == np.float64


# -- dump format ------------------------------------------------------------------------------
@given(
    st.sampled_from([np.float32, np.float64]),
    st.lists(st.integers(1, 4), min_size=0, max_size=4),
    st.integers(0, 1000),
)
def test_tensor_dump_roundtrip(dtype, shape, seed):
    a = np.random.default_rng(seed).normal(size=shape).astype(dtype)
    b = ad.loads_tensor(ad.dumps_tensor(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert b.tobytes() == a.tobytes()


def test_tensor_dump_layout():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    buf = ad.dumps_tensor(a)
    assert buf[:4] == b"NRT1" and buf[4] == 0 and buf[5] == 2
    assert int.from_bytes(buf[6:14], "little") == 2 and int.from_bytes(buf[14:22], "little") == 3
    assert len(buf) == 22 + 6 * 4
    with pytest.raises(ad.AutodiffError):
        ad.loads_tensor(buf[:-1])
    with pytest.raises(ad.AutodiffError):
        ad.loads_tensor(b"XXXX" + buf[4:])
