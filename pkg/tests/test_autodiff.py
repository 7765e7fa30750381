import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionedit import autodiff as ad
from regionedit.autodiff import Tensor
from regionedit.errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    GraphError,
    NonFiniteError,
)

TRIALS = 20


def rand(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    return Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)


# Each entry: (name, builder(rng) -> (fn, params)). fn reduces to a scalar with a
# fixed random weighting so every output entry contributes.
def _weighted(out, w):
    return ad.sum_(ad.mul(out, Tensor(w)))


def _case_matmul(rng):
    a, b = rand(rng, 3, 4), rand(rng, 4, 5)
    w = rng.standard_normal((3, 5))
    return (lambda: _weighted(ad.matmul(a, b), w)), [a, b]


def _case_batched_matmul(rng):
    a, b = rand(rng, 2, 3, 4), rand(rng, 4, 2)
    w = rng.standard_normal((2, 3, 2))
    return (lambda: _weighted(a @ b, w)), [a, b]


def _case_softmax(rng):
    x = rand(rng, 4, 6)
    w = rng.standard_normal((4, 6))
    return (lambda: _weighted(ad.softmax_rows(x), w)), [x]


def _case_masked_softmax(rng):
    x = rand(rng, 3, 5)
    mask = np.array([True, True, False, True, False])
    w = rng.standard_normal((3, 5))
    return (lambda: _weighted(ad.softmax_rows(x, mask), w)), [x]


def _case_log_softmax(rng):
    x = rand(rng, 3, 5)
    w = rng.standard_normal((3, 5))
    return (lambda: _weighted(ad.log_softmax_rows(x), w)), [x]


def _case_sigmoid(rng):
    x = rand(rng, 7)
    w = rng.standard_normal(7)
    return (lambda: _weighted(ad.sigmoid(x), w)), [x]


def _case_gelu(rng):
    x = rand(rng, 3, 4)
    w = rng.standard_normal((3, 4))
    return (lambda: _weighted(ad.gelu(x), w)), [x]


def _case_cosine(rng):
    a, b = rand(rng, 6), rand(rng, 6)
    return (lambda: ad.cosine(a, b)), [a, b]


def _case_cosine_batched(rng):
    a, b = rand(rng, 3, 5), rand(rng, 3, 5)
    w = rng.standard_normal(3)
    return (lambda: _weighted(ad.cosine(a, b), w)), [a, b]


def _case_l2norm(rng):
    x = rand(rng, 3, 4)
    w = rng.standard_normal((3, 4))
    return (lambda: _weighted(ad.l2_normalize_rows(x), w)), [x]


def _case_layernorm(rng):
    x = rand(rng, 3, 5)
    w = rng.standard_normal((3, 5))
    return (lambda: _weighted(ad.layernorm_rows(x, eps=1e-6), w)), [x]


def _case_affine(rng):
    x, g, b = rand(rng, 2, 3, 4), rand(rng, 4), rand(rng, 4)
    w = rng.standard_normal((2, 3, 4))
    return (lambda: _weighted(ad.affine_rows(x, g, b), w)), [x, g, b]


def _case_elementwise(rng):
    a, b = rand(rng, 3, 3), rand(rng, 3, 3)
    s = rand(rng)
    w = rng.standard_normal((3, 3))
    return (lambda: _weighted(ad.mul(ad.sub(ad.add(a, b), ad.scale(b, 0.3)), a) * s, w)), [a, b, s]


def _case_exp(rng):
    x = rand(rng, 5)
    return (lambda: ad.sum_(ad.exp(x))), [x]


def _case_sqrt(rng):
    x = rand(rng, 5, positive=True)
    return (lambda: ad.sum_(ad.sqrt(x))), [x]


def _case_shapes(rng):
    x = rand(rng, 2, 3, 4)
    y = rand(rng, 2, 3, 2)
    w = rng.standard_normal((6, 3))
    def fn():
        c = ad.concat_channels(x, y)
        t = ad.transpose(c)[:, 1:4, :]
        return _weighted(ad.reshape(t, (6, 3)), w)
    return fn, [x, y]


def _case_permute(rng):
    x = rand(rng, 2, 3, 4)
    w = rng.standard_normal((4, 2, 3))
    return (lambda: _weighted(ad.permute(x, (2, 0, 1)), w)), [x]


def _case_pool_mse(rng):
    x, y = rand(rng, 5, 4), rand(rng, 4)
    return (lambda: ad.mse(ad.mean_pool_rows(x), y)), [x, y]


def _case_take(rng):
    x = rand(rng, 4, 3)
    w = rng.standard_normal((3, 3))
    return (lambda: _weighted(ad.take_rows(x, [2, 0, 2]), w)), [x]


def _case_upsample(rng):
    x = rand(rng, 2, 3, 3)
    w = rng.standard_normal((2, 6, 6, 3))
    return (lambda: _weighted(ad.expand_channels(ad.upsample_nearest(x, 2), 3), w)), [x]


def _case_conv(rng):
    x, k, b = rand(rng, 2, 6, 5, 3), rand(rng, 3, 3, 3, 2), rand(rng, 2)
    w = rng.standard_normal((2, 6, 5, 2))
    return (lambda: _weighted(ad.conv2d(x, k, b, dilation=2), w)), [x, k, b]


def _case_conv_frozen_kernel(rng):
    x = rand(rng, 1, 7, 7, 2)
    k = Tensor(rng.standard_normal((3, 3, 2, 3)))
    w = rng.standard_normal((1, 7, 7, 3))
    return (lambda: _weighted(ad.conv2d(x, k, dilation=4), w)), [x]


def _case_modulate(rng):
    x, s, t = rand(rng, 2, 3, 3, 4), rand(rng, 2, 4), rand(rng, 2, 4)
    w = rng.standard_normal((2, 3, 3, 4))
    return (lambda: _weighted(ad.modulate(x, s, t), w)), [x, s, t]


KERNELS = {name[6:]: fn for name, fn in globals().items() if name.startswith("_case_")}


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_kernel_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(TRIALS):
        fn, params = KERNELS[name](rng)
        worst = max(worst, ad.gradcheck(fn, params, h=1e-5))
    assert worst < 1e-4, f"{name}: {worst:.2e}"


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(ad.matmul(eye, eye).data, np.eye(2))

    def test_permutation(self):
        a = Tensor([[1, 2], [3, 4]])
        p = Tensor([[0, 1], [1, 0]])
        np.testing.assert_array_equal((a @ p).data, [[2, 1], [4, 3]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform_row(self):
        np.testing.assert_allclose(ad.softmax_rows(Tensor([[0, 0, 0]])).data, [[1 / 3] * 3], atol=1e-15)

    def test_no_overflow(self):
        out = ad.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_empty(self):
        assert ad.softmax_rows(Tensor(np.zeros((0, 3)))).shape == (0, 3)

    def test_rows_sum_to_one(self):
        x = np.random.default_rng(1).standard_normal((4, 6))
        np.testing.assert_allclose(ad.softmax_rows(Tensor(x)).data.sum(axis=1), 1.0, atol=1e-12)

    def test_fully_masked_row_is_rejected(self):
        with pytest.raises(ContractError):
            ad.softmax_rows(Tensor(np.zeros((2, 3))), np.zeros(3, dtype=bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, c):
    x = np.random.default_rng(seed).standard_normal((3, 5))
    a = ad.softmax_rows(Tensor(x)).data
    b = ad.softmax_rows(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-10)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


class TestSigmoid:
    def test_zero(self):
        assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_saturation(self):
        out = ad.sigmoid(Tensor([40.0, -40.0])).data
        assert abs(out[0] - 1) < 1e-12 and abs(out[1]) < 1e-12
        assert 0 < out[1] and out[0] <= 1


class TestCosine:
    def test_self(self):
        v = Tensor([0.3, -2.0, 5.0])
        assert ad.cosine(v, v).item() == pytest.approx(1.0, abs=1e-15)

    def test_opposite(self):
        v = np.array([0.3, -2.0, 5.0])
        assert ad.cosine(Tensor(v), Tensor(-v)).item() == pytest.approx(-1.0, abs=1e-15)

    def test_orthogonal(self):
        assert ad.cosine(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_zero_norm_raises(self):
        with pytest.raises(DegenerateInputError):
            ad.cosine(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(seed, lam, mu):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(8), rng.standard_normal(8)
    c1 = ad.cosine(Tensor(a), Tensor(b)).item()
    c2 = ad.cosine(Tensor(lam * a), Tensor(mu * b)).item()
    assert abs(c1 - c2) < 1e-12


class TestOtherKernels:
    def test_mean_pool_rows(self):
        np.testing.assert_array_equal(ad.mean_pool_rows(Tensor([[1, 1], [3, 3]])).data, [2, 2])

    def test_concat_channels(self):
        out = ad.concat_channels(Tensor(np.zeros((4, 5, 2))), Tensor(np.ones((4, 5, 3))))
        assert out.shape == (4, 5, 5)

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            ad.concat_channels(Tensor(np.zeros((4, 5, 2))), Tensor(np.ones((4, 4, 3))))

    def test_layernorm_moments(self):
        x = np.random.default_rng(3).standard_normal((6, 32)) * 4 + 2
        out = ad.layernorm_rows(Tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-9)

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_scalar_broadcast(self):
        out = Tensor(np.ones((2, 2))) * Tensor(3.0)
        np.testing.assert_array_equal(out.data, 3 * np.ones((2, 2)))

    def test_non_finite_is_an_error(self):
        with pytest.raises(NonFiniteError):
            ad.exp(Tensor([1000.0]))
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
        ad.sum_(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_second_backward_is_an_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = ad.sum_(x * x)
        loss.backward()
        with pytest.raises(GraphError):
            loss.backward()

    def test_cosine_gradient_is_orthogonal_to_input(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal(6), requires_grad=True)
        c = Tensor(rng.standard_normal(6))
        fn = lambda: ad.cosine(x, c)
        assert ad.gradcheck(fn, [x]) < 1e-4
        x.zero_grad()
        fn().backward()
        # cosine is scale invariant in x, so its gradient has no radial part
        assert abs(np.dot(x.grad, x.data)) < 1e-12

    def test_replay_is_deterministic(self):
        rng = np.random.default_rng(9)
        a = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 4)))
        grads = []
        for _ in range(2):
            a.zero_grad()
            ad.sum_(ad.softmax_rows(a @ b)[:, 0]).backward()
            grads.append(a.grad.copy())
        np.testing.assert_array_equal(grads[0], grads[1])

    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        ad.sum_(y + y).backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([2.0], requires_grad=True)
        with ad.no_grad():
            y = x * x
        assert not y.requires_grad


class TestAdam:
    def test_zero_grads_leave_params(self):
        p = Tensor(np.arange(4.0), requires_grad=True)
        state = ad.OptimizerState.for_params([p])
        before = p.data.copy()
        ad.adam_step([p], [np.zeros(4)], state)
        assert np.max(np.abs(p.data - before)) < 1e-12
        assert state.step == 1

    def test_first_step_magnitude_is_lr(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        state = ad.OptimizerState.for_params([p], lr=1e-3)
        g = np.array([0.5, -2.0, 7.0])
        ad.adam_step([p], [g], state)
        # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
        expected = -1e-3 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        state = ad.OptimizerState.for_params([p])
        with pytest.raises(DimensionError):
            ad.adam_step([p], [np.zeros(4)], state)

    def test_quadratic_bowl(self):
        x = Tensor(np.array([1.0, -0.5, 0.25]), requires_grad=True)
        opt = ad.Adam([x], lr=0.05)
        for _ in range(500):
            opt.zero_grad()
            ad.sum_(x * x).backward()
            opt.step()
        assert np.linalg.norm(x.data) < 1e-3
        assert opt.state.step == 500
