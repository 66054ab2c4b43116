import numpy as np
import pytest

from hcpl import autodiff as ad
from hcpl import kernels
from hcpl.autodiff import Tensor


def naive_conv(x, w, stride=1, padding=0):
    """Nested-loop sliding-window sum, the reference for conv2d."""
    N, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((N, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                s += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = s
    return out


def test_exp_values():
    out = ad.primitive_forward("exp", [Tensor([0.0, 1.0])])
    np.testing.assert_allclose(out.data, [1.0, np.e])


def test_reduce_mean_constant():
    assert ad.reduce_mean(Tensor(np.full((4, 4), 3.0))).item() == 3.0


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_sliding_window(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(1, 8, 8))
    w = rng.normal(size=(1, 1, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding)
    ref = naive_conv(x[None], w, stride, padding)[0]
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_kernel_backends_agree(backend):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4, 11, 11))
    w = rng.normal(size=(5, 4, 3, 3))
    prev = kernels.BACKEND
    try:
        kernels.use_backend(backend)
    except ImportError:
        pytest.skip("compiled kernels not built")
    try:
        out = kernels.conv2d_forward(x, w, 2)
        np.testing.assert_allclose(out, naive_conv(x, w, 2), atol=1e-10)
        g = rng.normal(size=out.shape)
        gx, gw = kernels.conv2d_backward(x, w, g, 2)
        # adjoint identity: <conv(x), g> is bilinear in x and w
        np.testing.assert_allclose(np.sum(gx * x), np.sum(out * g), rtol=1e-10)
        np.testing.assert_allclose(np.sum(gw * w), np.sum(out * g), rtol=1e-10)
    finally:
        kernels.use_backend(prev)


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.reduce_sum(x * x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_exp():
    x = Tensor([0.0], requires_grad=True)
    ad.reduce_sum(ad.exp(x)).backward()
    np.testing.assert_allclose(x.grad, [1.0])


def test_conv_relu_mean_matches_finite_differences():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 2, 7, 7)), requires_grad=True)
        w1 = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b1 = Tensor(rng.normal(size=3), requires_grad=True)
        w2 = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)

        def f():
            h = ad.relu(ad.conv2d(x, w1, b1, padding=1))
            return ad.reduce_mean(ad.relu(ad.conv2d(h, w2, stride=2)))

        assert ad.gradient_check(f, [x, w1, b1, w2]) <= 1e-4


def test_fd_sum_is_ones():
    x = np.random.default_rng(0).normal(size=(3, 2))
    g = ad.finite_difference_gradient(ad.reduce_sum, x)
    np.testing.assert_allclose(g.data, 1.0, atol=1e-9)


def test_fd_square():
    g = ad.finite_difference_gradient(lambda t: ad.reduce_sum(t * t), np.array([3.0]))
    np.testing.assert_allclose(g.data, [6.0], atol=1e-6)


def test_fd_rejects_nondeterministic_fn():
    rng = np.random.default_rng(0)
    with pytest.raises(ad.GraphError):
        ad.finite_difference_gradient(lambda t: ad.reduce_sum(t) + rng.normal(), np.zeros(2))


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.finite_difference_gradient(ad.reduce_sum, np.zeros(2), h=0.0)


def _positive(rng, shape):
    return rng.uniform(0.1, 2.0, size=shape)


PRIMITIVE_CASES = {
    "add": lambda r: (lambda a, b: ad.add(a, b), [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": lambda r: (lambda a, b: ad.sub(a, b), [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
    "mul": lambda r: (lambda a, b: ad.mul(a, b), [r.normal(size=(3, 4)), r.normal(size=(1, 4))]),
    "div": lambda r: (lambda a, b: ad.div(a, b), [r.normal(size=(3, 4)), _positive(r, (3, 4))]),
    "pow-const": lambda r: (lambda a: ad.pow_const(a, 1.7), [_positive(r, (5,))]),
    "exp": lambda r: (ad.exp, [r.normal(size=(2, 3))]),
    "log": lambda r: (ad.log, [_positive(r, (2, 3))]),
    "relu": lambda r: (ad.relu, [r.choice([-1, 1], size=(3, 3)) * _positive(r, (3, 3))]),
    "matmul": lambda r: (ad.matmul, [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    "conv2d": lambda r: (lambda a, b: ad.conv2d(a, b, padding=1),
                         [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3))]),
    "reduce_mean": lambda r: (lambda a: ad.reduce_mean(a, axis=(1, 2)), [r.normal(size=(2, 3, 4))]),
    "reduce_max": lambda r: (lambda a: ad.reduce_max(a, axis=0), [r.permutation(12).reshape(3, 4) * 0.3]),
    "reduce_sum": lambda r: (lambda a: ad.reduce_sum(a, axis=1), [r.normal(size=(3, 4))]),
    "concat": lambda r: (lambda a, b: ad.concat([a, b], axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
    "reshape": lambda r: (lambda a: ad.reshape(a, (6, 2)), [r.normal(size=(3, 4))]),
    "sigmoid": lambda r: (ad.sigmoid, [r.normal(size=(4,))]),
    "softmax": lambda r: (lambda a: ad.softmax(a, axis=1), [r.normal(size=(3, 5))]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_over_seeds(name):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        fn, arrays = PRIMITIVE_CASES[name](rng)
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        proj = Tensor(rng.normal(size=fn(*[Tensor(a) for a in arrays]).shape))

        def loss():
            return ad.reduce_sum(fn(*leaves) * proj)

        assert ad.gradient_check(loss, leaves) <= 1e-4, (name, seed)


def test_linearity_of_backward():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(0.1, 2.0, size=6), requires_grad=True)
    f = lambda: ad.reduce_sum(ad.exp(x) * 0.3)
    g = lambda: ad.reduce_sum(ad.log(x))
    a, b = 1.5, -0.7
    f().backward()
    gf = x.grad
    x.grad = None
    g().backward()
    gg = x.grad
    x.grad = None
    (f() * a + g() * b).backward()
    np.testing.assert_allclose(x.grad, a * gf + b * gg, rtol=1e-12)


def test_reduce_max_tie_goes_to_lowest_index():
    x = Tensor([[1.0, 3.0, 3.0], [2.0, 2.0, 0.0]], requires_grad=True)
    ad.reduce_sum(ad.reduce_max(x, axis=1)).backward()
    np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])
    y = Tensor(np.full((2, 2), 5.0), requires_grad=True)
    ad.reduce_max(y).backward()
    np.testing.assert_array_equal(y.grad, [[1, 0], [0, 0]])


def test_double_backward_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.reduce_sum(x * x)
    loss.backward()
    with pytest.raises(ad.GraphError):
        loss.backward()


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.GraphError):
        (x * 2.0).backward()


def test_errors():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([np.nan]))
    with pytest.raises(ad.UnsupportedOpError):
        ad.primitive_forward("tanh", [Tensor([0.0])])
    with pytest.raises(ad.DomainError):
        ad.pow_const(Tensor([-1.0]), 0.5)
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([0.0]))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_pow_integer_exponent_allows_negative_base():
    np.testing.assert_allclose(ad.pow_const(Tensor([-2.0]), 2).data, [4.0])


def test_no_grad_skips_recording():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    ad.reduce_sum(y + y).backward()
    np.testing.assert_allclose(x.grad, [12.0])
