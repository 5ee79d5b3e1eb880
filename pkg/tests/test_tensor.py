import math
import zlib

import numpy as np
import pytest

from weightaug import tensor as T
from weightaug.errors import ConfigError, DataError, UsageError

from conftest import rel_err


def _grad_of(fn, *arrays):
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    T.backward(out)
    return out.data.item(), [l.grad for l in leaves]


# --- float64 references, written independently of the engine --------------

def conv_ref(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out + b[None, :, None, None]


def pool_ref(x, k, s):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.empty((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = x[:, :, i * s:i * s + k, j * s:j * s + k].max(axis=(2, 3))
    return out


def xent_ref(z, y):
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y].mean()


def central_diff(f, arrays, which, idx, eps=1e-3):
    plus = [a.astype(np.float64).copy() for a in arrays]
    minus = [a.astype(np.float64).copy() for a in arrays]
    plus[which].flat[idx] += eps
    minus[which].flat[idx] -= eps
    return (f(*plus) - f(*minus)) / (2 * eps)


def check_op(engine_fn, ref_fn, arrays, n_coords=120, seed=0, floor=1e-3):
    """Engine gradient of ``sum(out * R)`` vs. float64 central differences (eps = 1e-3)."""
    rng = np.random.default_rng(seed)
    probe = engine_fn(*[T.Tensor(a) for a in arrays])
    r = rng.normal(size=probe.shape)
    _, grads = _grad_of(lambda *ts: T.tensor_sum(T.mul(engine_fn(*ts), T.Tensor(r))), *arrays)
    sizes = [a.size for a in arrays]
    offsets = np.cumsum([0] + sizes)
    worst, checked = 0.0, 0
    for flat in rng.choice(offsets[-1], size=min(n_coords, offsets[-1]), replace=False):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[k])
        num = central_diff(lambda *xs: float((ref_fn(*xs) * r).sum()), arrays, k, idx)
        worst = max(worst, float(rel_err(grads[k].flat[idx], num, floor)))
        checked += 1
    return worst, checked


def test_conv_zero_input_gives_zero_output():
    w = np.random.default_rng(0).normal(size=(4, 2, 3, 3))
    out = T.conv2d(T.Tensor(np.zeros((1, 2, 5, 5))), T.Tensor(w), T.Tensor(np.zeros(4)))
    assert np.all(out.data == 0)


def test_conv_all_ones_kernel_sums_entries():
    x = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
    out = T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 45.0


def test_conv_identity_kernel_with_padding():
    x = np.random.default_rng(1).normal(size=(2, 1, 5, 6)).astype(np.float32)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    out = T.conv2d(T.Tensor(x), T.Tensor(k), padding=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_reference_with_stride():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(2, 3, 7, 7)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=2, padding=1)
    np.testing.assert_allclose(out.data, conv_ref(x, w, b, 2, 1), rtol=1e-5, atol=1e-5)


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ConfigError, match=r"\(1, 2, 5, 5\).*\(3, 3, 3, 3\)|\(3, 3, 3, 3\).*\(1, 2, 5, 5\)"):
        T.conv2d(T.Tensor(np.zeros((1, 2, 5, 5))), T.Tensor(np.zeros((3, 3, 3, 3))))


def test_conv_output_size_must_be_positive():
    with pytest.raises(ConfigError):
        T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 3))))


def test_backward_sum_gives_ones():
    _, (g,) = _grad_of(T.tensor_sum, np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_array_equal(g, np.ones((3, 4)))


def test_backward_half_square_norm_gives_w():
    w = np.random.default_rng(0).normal(size=(5,)).astype(np.float32)
    _, (g,) = _grad_of(lambda t: T.mul(T.tensor_sum(T.mul(t, t)), 0.5), w)
    np.testing.assert_allclose(g, w, rtol=1e-6)


def test_backward_rejects_non_scalar():
    with pytest.raises(UsageError):
        T.backward(T.Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_relu_values():
    out = T.relu(T.Tensor(np.array([-1.0, 2.0])))
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_uniform_logits_cross_entropy_is_log_k():
    for k in (2, 10, 100):
        loss = T.softmax_cross_entropy(T.Tensor(np.zeros((3, k))), np.array([0, 1, k - 1]))
        assert math.isclose(loss.data.item(), math.log(k), rel_tol=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(DataError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_maxpool_picks_max():
    out = T.maxpool2d(T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2)
    assert out.data.item() == 4.0


def test_maxpool_tie_routes_to_first_row_major():
    x = T.Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
    T.backward(T.tensor_sum(T.maxpool2d(x, 2)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


@pytest.mark.parametrize("name", ["conv", "conv_stride_pad", "linear", "relu", "maxpool", "xent", "add_mul"])
def test_gradcheck_per_operation(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    if name == "conv":
        arrays = [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]
        fn = lambda x, w, b: T.conv2d(x, w, b)
        ref = lambda x, w, b: conv_ref(x, w, b, 1, 0)
    elif name == "conv_stride_pad":
        arrays = [rng.normal(size=(2, 2, 7, 7)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]
        fn = lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1)
        ref = lambda x, w, b: conv_ref(x, w, b, 2, 1)
    elif name == "linear":
        arrays = [rng.normal(size=(8, 10)), rng.normal(size=(6, 10)), rng.normal(size=6)]
        fn = T.linear
        ref = lambda x, w, b: x @ w.T + b
    elif name == "relu":
        x = rng.normal(size=(4, 40))
        x[np.abs(x) < 0.05] += 0.1  # keep the eps stencil away from the kink
        arrays = [x]
        fn, ref = T.relu, lambda x: np.maximum(x, 0)
    elif name == "maxpool":
        arrays = [rng.permutation(200).reshape(2, 2, 5, 10) * 0.01]  # distinct values, gaps >> eps
        fn = lambda x: T.maxpool2d(x, 2)
        ref = lambda x: pool_ref(x, 2, 2)
    elif name == "xent":
        y = rng.integers(0, 7, size=16)
        arrays = [rng.normal(size=(16, 7))]
        fn = lambda z: T.softmax_cross_entropy(z, y)
        ref = lambda z: np.array(xent_ref(z, y))
    else:
        arrays = [rng.normal(size=(6, 10)), rng.normal(size=(6, 10))]
        fn = lambda a, b: T.mul(T.add(a, b), a)
        ref = lambda a, b: (a + b) * a
    worst, checked = check_op(fn, ref, [a.astype(np.float32) for a in arrays], n_coords=120)
    assert checked >= 100
    assert worst <= 1e-3, f"{name}: worst relative error {worst:.2e}"


def test_gradcheck_small_net():
    from weightaug.models import forward, init_params, smallcnn
    from weightaug.shadow import reference_loss

    arch = smallcnn(1, 8, 4)
    rng = np.random.default_rng(5)
    params = init_params(arch, 3)
    x = rng.normal(size=(3, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 4, size=3)
    leaves = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
    T.backward(T.softmax_cross_entropy(forward(arch, leaves, T.Tensor(x)), y))
    names = sorted(params)
    worst = 0.0
    for k in range(120):
        name = names[k % len(names)]
        idx = int(rng.integers(params[name].size))
        plus = {n: v.astype(np.float64) for n, v in params.items()}
        minus = {n: v.copy() for n, v in plus.items()}
        plus[name] = plus[name].copy()
        plus[name].flat[idx] += 1e-3
        minus[name] = minus[name].copy()
        minus[name].flat[idx] -= 1e-3
        num = (reference_loss(arch, plus, x, y) - reference_loss(arch, minus, x, y)) / 2e-3
        worst = max(worst, float(rel_err(leaves[name].grad.flat[idx], num, 1e-3)))
    assert worst <= 1e-3, worst


def test_conv_is_linear_in_weight():
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.normal(size=(2, 3, 6, 6)))
    w1, w2 = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=(4, 3, 3, 3))
    a, b = 0.7, -1.3
    lhs = T.conv2d(x, T.Tensor(a * w1 + b * w2), padding=1).data
    rhs = a * T.conv2d(x, T.Tensor(w1), padding=1).data + b * T.conv2d(x, T.Tensor(w2), padding=1).data
    assert np.abs(lhs - rhs).max() <= 1e-4 * np.abs(rhs).max()


def test_forward_and_backward_are_deterministic():
    rng = np.random.default_rng(4)
    arrays = [rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)]
    runs = [_grad_of(lambda x, w, b: T.tensor_sum(T.relu(T.conv2d(x, w, b, padding=1))), *arrays)
            for _ in range(2)]
    assert runs[0][0] == runs[1][0]
    for g0, g1 in zip(runs[0][1], runs[1][1]):
        assert g0.tobytes() == g1.tobytes()


def test_gradient_accumulates_over_reuse():
    w = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    _, (g,) = _grad_of(lambda t: T.tensor_sum(T.add(t, t)), w)
    np.testing.assert_array_equal(g, [2, 2, 2])
