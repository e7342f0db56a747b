import numpy as np
import pytest

from hsvt import autodiff as ad
from hsvt.autodiff import NonFiniteError, Parameter, Tensor, backward, grad_check


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# -- tensor basics ------------------------------------------------------------------


def test_tensor_shape_and_default_dtype():
    t = Tensor([[1, 2, 3], [4, 5, 6]])
    assert t.shape == (2, 3) and t.size == 6 and t.dtype == np.float64


def test_float32_allowed():
    t = Tensor(np.ones(3), dtype=np.float32)
    assert t.dtype == np.float32
    assert (t * 2.0).dtype == np.float32


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_is_raised():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([-1.0]))
    with pytest.raises(NonFiniteError):
        ad.div(Tensor([1.0]), Tensor([0.0]))


def test_mismatched_shapes_rejected():
    with pytest.raises(ValueError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_matmul_examples():
    eye = Tensor(np.eye(3))
    a = rnd(3, 4)
    np.testing.assert_array_equal(ad.matmul(eye, Tensor(a)).data, a)
    np.testing.assert_array_equal(ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_inner_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv2d_examples():
    x = rnd(1, 1, 5, 5)
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)
    y = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert y.shape == (1, 1, 1, 1) and y.item() == 9.0


def test_conv2d_matches_direct_loop():
    # independent oracle: explicit quadruple loop
    x, w, b = rnd(2, 3, 7, 6, seed=1), rnd(4, 3, 3, 3, seed=2), rnd(4, seed=3)
    stride, pad = 2, 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[n, o, i, j] = np.sum(xp[n, :, i * 2:i * 2 + 3, j * 2:j * 2 + 3] * w[o]) + b[o]
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_kernel_too_large():
    with pytest.raises(ValueError):
        ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_batchnorm_train_and_eval():
    x = Tensor(rnd(4, 3, 5, 5) * 3 + 2)
    st = ad.BatchNormState(3)
    y = ad.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), st, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-5)
    fresh = ad.BatchNormState(3)
    z = ad.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), fresh, training=False).data
    np.testing.assert_allclose(z, x.data / np.sqrt(1 + 1e-5), rtol=1e-12)


def test_layernorm_examples():
    g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(ad.layernorm(Tensor([[3.0, 3.0]]), g, b).data, 0.0)
    np.testing.assert_allclose(ad.layernorm(Tensor([[1.0, -1.0]]), g, b).data, [[1, -1]], atol=1e-5)


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    x = rnd(3, 5)
    np.testing.assert_allclose(ad.softmax(Tensor(x)).data, ad.softmax(Tensor(x + 7.5)).data, atol=1e-15)


def test_elementwise_values():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    assert ad.tanh(Tensor(0.0)).item() == 0.0


# -- backward ------------------------------------------------------------------------


def test_sum_gradient_is_ones():
    p = Parameter(rnd(3, 4))
    backward(ad.tsum(p))
    np.testing.assert_array_equal(p.grad, np.ones((3, 4)))


def test_zero_scaled_gradient_is_zero():
    p = Parameter(rnd(3, 4))
    backward(ad.tsum(p * 0.0))
    np.testing.assert_array_equal(p.grad, np.zeros((3, 4)))


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        backward(T(np.ones(3)) * 2.0)


def test_tape_visits_each_node_once_in_reverse_topological_order():
    a = T(rnd(3))
    b = ad.exp(a)
    c = b * b + b  # diamond
    loss = ad.tsum(c)
    tape = ad.Tape.build(loss)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    backward(loss)
    e = np.exp(a.data)
    np.testing.assert_allclose(a.grad, (2 * e + 1) * e, rtol=1e-12)


def test_gradient_accumulates_over_shared_use():
    p = Parameter(np.array([2.0]))
    backward(ad.tsum(p * p * p))
    np.testing.assert_allclose(p.grad, [12.0])


def test_broadcast_gradient_reduces_leading_axes():
    p = Parameter(np.array([1.0, 2.0, 3.0]))
    x = Tensor(rnd(4, 3))
    backward(ad.tsum(x * p))
    np.testing.assert_allclose(p.grad, x.data.sum(axis=0), rtol=1e-12)


# -- finite differences --------------------------------------------------------------


UNARY = {
    "exp": ad.exp, "tanh": ad.tanh, "sigmoid": ad.sigmoid, "gelu": ad.gelu,
    "sqrt": lambda x: ad.sqrt(x * x + 1.0), "log": lambda x: ad.log(x * x + 1.0),
    "power": lambda x: ad.power(x * x + 1.0, 1.5), "relu": ad.relu,
    "clip": lambda x: ad.clip(x, -0.5, 0.5), "neg": lambda x: -x,
    "mean": lambda x: ad.mean(x, axis=1), "sum": lambda x: ad.tsum(x, axis=0, keepdims=True),
    "reshape": lambda x: ad.reshape(x, (5, 4)), "transpose": lambda x: ad.transpose(x, (1, 0)),
    "getitem": lambda x: x[1:3, ::2], "fancy": lambda x: x[np.array([0, 0, 3]), np.array([1, 1, 2])],
    "pad": lambda x: ad.pad(x, ((1, 0), (0, 2))), "softmax": ad.softmax,
    "upsample": lambda x: ad.upsample_nearest(ad.reshape(x, (1, 1, 4, 5)), 2),
}


def _away_from_kinks(x):
    # shift values off the relu / clip corners so central differences are valid
    x = x.copy()
    for k in (0.0, 0.5, -0.5):
        near = np.abs(x - k) < 1e-3
        x[near] += 0.01
    return x


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grad_check(name):
    x = T(_away_from_kinks(rnd(4, 5, seed=len(name))))
    assert grad_check(UNARY[name], [x]) < 1e-6


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul,
    "div": lambda a, b: ad.div(a, b * b + 1.0),
    "max": ad.maximum, "min": ad.minimum,
    "bcast": lambda a, b: a * b[0],
    "concat": lambda a, b: ad.concat([a, b], axis=1), "stack": lambda a, b: ad.stack([a, b], axis=0),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b, (1, 0))),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_grad_check(name):
    a, b = T(rnd(4, 5, seed=1)), T(rnd(4, 5, seed=2))
    assert grad_check(BINARY[name], [a, b]) < 1e-6


def test_matmul_grad_check_4x5_5x3():
    assert grad_check(ad.matmul, [T(rnd(4, 5)), T(rnd(5, 3, seed=1))]) < 1e-6


def test_batched_matmul_grad_check():
    assert grad_check(ad.matmul, [T(rnd(2, 3, 4, 5)), T(rnd(2, 3, 5, 2, seed=1))]) < 1e-6
    assert grad_check(ad.matmul, [T(rnd(2, 3, 4, 5)), T(rnd(5, 2, seed=1))]) < 1e-6


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 4, 3)])
def test_conv2d_grad_check(k, stride, pad):
    x = T(rnd(2, 3, 8, 8))
    w = T(rnd(4, 3, k, k, seed=1) * 0.3)
    b = T(rnd(4, seed=2))
    assert grad_check(lambda x, w, b: ad.conv2d(x, w, b, stride, pad), [x, w, b]) < 1e-6


def test_batchnorm_grad_check():
    st = ad.BatchNormState(3)
    fn = lambda x, g, b: ad.batchnorm2d(x, g, b, st, training=True)
    assert grad_check(fn, [T(rnd(2, 3, 4, 4, seed=7)), T(rnd(3, seed=1)), T(rnd(3, seed=2))]) < 1e-5


def test_layernorm_grad_check():
    fn = lambda x, g, b: ad.layernorm(x, g, b)
    assert grad_check(fn, [T(rnd(3, 4, 6, seed=7)), T(rnd(6, seed=1)), T(rnd(6, seed=2))]) < 1e-5


def test_bce_with_logits_grad_and_value():
    z = rnd(10)
    y = (np.random.default_rng(5).random(10) > 0.5).astype(float)
    ref = -(y * np.log(1 / (1 + np.exp(-z))) + (1 - y) * np.log(1 - 1 / (1 + np.exp(-z))))
    np.testing.assert_allclose(ad.bce_with_logits(Tensor(z), y).data, ref, rtol=1e-10)
    assert grad_check(lambda z: ad.bce_with_logits(z, y), [T(z)]) < 1e-6


def test_two_layer_net_grad_check():
    w1, w2 = T(rnd(4, 6, seed=1)), T(rnd(6, 2, seed=2))
    x = Tensor(rnd(5, 4))
    fn = lambda a, b: ad.tsum(ad.tanh(ad.matmul(ad.tanh(ad.matmul(x, a)), b)) ** 2)
    assert grad_check(fn, [w1, w2]) < 1e-5


# -- oracle self-tests ---------------------------------------------------------------


def test_grad_check_linear_map_is_exact():
    A = rnd(3, 4)
    assert grad_check(lambda x: ad.matmul(Tensor(A), x), [T(rnd(4, 2))]) < 1e-9


def test_grad_check_sigmoid_chain():
    assert grad_check(lambda x: ad.sigmoid(ad.sigmoid(x) * 3.0 - 1.0), [T(rnd(6))]) < 1e-6


def corrupted_tanh(x, factor=1.1):
    y = np.tanh(x.data)
    return ad.record(y, (x,), lambda g: (g * (1 - y * y) * factor,), "tanh_corrupt")


def test_grad_check_detects_corrupted_vjp():
    x = T(rnd(5))
    assert grad_check(corrupted_tanh, [x]) > 1e-2
    assert grad_check(lambda x: corrupted_tanh(x, 1.0), [x]) < 1e-6
