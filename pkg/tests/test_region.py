import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionedit import autodiff as ad
from regionedit.autodiff import Tensor
from regionedit.errors import ContractError, DimensionError
from regionedit.region import (
    FusionWeights,
    cross_attend,
    harden,
    predict_region,
    region_probabilities,
    self_attend,
    soft_pixel_mask,
)

D = 8


@pytest.fixture
def fw():
    w = FusionWeights(D, seed=3)
    rng = np.random.default_rng(3)
    # non-zero head so the region output depends on its input
    w.mlp.fc2.w.data[:] = rng.standard_normal(w.mlp.fc2.w.shape)
    return w


def test_trainable_set():
    w = FusionWeights(D)
    names = [n for n, _ in w.named_parameters()]
    assert names[:6] == list(FusionWeights.NAMES)
    assert all(w._params[n].shape == (D, D) for n in FusionWeights.NAMES)
    assert {n for n in names[6:]} == {"mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w", "mlp.fc2.b"}
    assert w.mlp.fc1.w.shape == (D, 2 * D) and w.mlp.fc2.w.shape == (2 * D, 1)


def test_cross_attend_single_key(fw):
    rng = np.random.default_rng(0)
    F_img = rng.standard_normal((5, D))
    F_ins = rng.standard_normal((4, D))
    keep = np.array([False, True, False, False])
    out = cross_attend(fw, F_img, F_ins, keep).data
    want = F_ins[1] @ fw.cross_v.data
    np.testing.assert_allclose(out, np.broadcast_to(want, out.shape), atol=1e-12)


def test_cross_attend_rows_sum_to_one_and_ignore_pad(fw):
    rng = np.random.default_rng(1)
    F_img = rng.standard_normal((2, 6, D))
    F_ins = rng.standard_normal((2, 5, D))
    keep = np.array([[1, 1, 1, 0, 0], [1, 1, 0, 0, 0]], dtype=bool)
    weights = []
    out = cross_attend(fw, F_img, F_ins, keep, weights_out=weights)
    att = weights[0]
    np.testing.assert_allclose(att.sum(-1), 1.0, atol=1e-10)
    assert np.all(att[~np.broadcast_to(keep[:, None, :], att.shape)] == 0)
    # altering PAD rows changes nothing
    F_ins2 = F_ins.copy()
    F_ins2[~keep] = 99.0
    np.testing.assert_array_equal(cross_attend(fw, F_img, F_ins2, keep).data, out.data)


def test_cross_attend_token_permutation(fw):
    rng = np.random.default_rng(2)
    F_img = rng.standard_normal((6, D))
    F_ins = rng.standard_normal((5, D))
    perm = rng.permutation(5)
    a = cross_attend(fw, F_img, F_ins).data
    b = cross_attend(fw, F_img, F_ins[perm]).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_cross_attend_all_pad(fw):
    with pytest.raises(ContractError):
        cross_attend(fw, np.ones((3, D)), np.ones((2, D)), np.zeros(2, dtype=bool))


def test_cross_attend_width(fw):
    with pytest.raises(DimensionError):
        cross_attend(fw, np.ones((3, D + 1)), np.ones((2, D)))


def test_self_attend_single_token(fw):
    F = np.random.default_rng(3).standard_normal((1, D))
    np.testing.assert_allclose(self_attend(fw, F).data, F @ fw.self_v.data, atol=1e-12)


def test_self_attend_identical_rows(fw):
    F = np.tile(np.random.default_rng(4).standard_normal(D), (7, 1))
    out = self_attend(fw, F).data
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)


def test_self_attend_rows_sum_to_one(fw):
    w = []
    self_attend(fw, np.random.default_rng(5).standard_normal((3, 9, D)), weights_out=w)
    np.testing.assert_allclose(w[0].sum(-1), 1.0, atol=1e-10)


def test_zero_head_gives_half():
    w = FusionWeights(D)
    P = predict_region(w, np.random.default_rng(6).standard_normal((10, D))).data
    assert np.all(P == 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_predict_region_equivariant_and_open_interval(seed):
    rng = np.random.default_rng(seed)
    w = FusionWeights(D, seed=seed % 7)
    w.mlp.fc2.w.data[:] = rng.standard_normal(w.mlp.fc2.w.shape)
    F = rng.standard_normal((6, D))
    perm = rng.permutation(6)
    P = predict_region(w, F).data
    np.testing.assert_allclose(predict_region(w, F[perm]).data, P[perm], atol=1e-14)
    assert np.all((P > 0) & (P < 1))


def _chain_case(rng, fw):
    F_img = rng.standard_normal((2, 4, D))
    F_ins = rng.standard_normal((2, 3, D))
    keep = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
    target = rng.standard_normal((2, 4))

    def fn():
        return ad.sum_(ad.mul(region_probabilities(fw, F_img, F_ins, keep), Tensor(target)))

    return fn


def test_full_region_gradient(fw):
    rng = np.random.default_rng(7)
    for _ in range(5):
        assert ad.gradcheck(_chain_case(rng, fw), fw.parameters(), max_entries=6, rng=rng) < 1e-4


def test_self_attend_gradient(fw):
    rng = np.random.default_rng(8)
    F = Tensor(rng.standard_normal((5, D)), requires_grad=True)
    w = rng.standard_normal((5, D))

    def fn():
        return ad.sum_(ad.mul(self_attend(fw, F), Tensor(w)))

    assert ad.gradcheck(fn, [F, fw.self_q, fw.self_k, fw.self_v], max_entries=8, rng=rng) < 1e-4


def test_harden_tie_and_upsample():
    pred = harden(np.full(64, 0.5), 0.5)
    assert pred.grid_mask.shape == (8, 8) and pred.grid_mask.all()
    assert pred.pixel_mask.shape == (64, 64) and pred.pixel_mask.all()


def test_harden_invariants():
    rng = np.random.default_rng(9)
    P = rng.random(64)
    lo, hi = harden(P, 0.3), harden(P, 0.7)
    assert np.all(hi.grid_mask <= lo.grid_mask)
    np.testing.assert_array_equal(lo.grid_mask.ravel(), P >= 0.3)
    np.testing.assert_array_equal(lo.pixel_mask, np.repeat(np.repeat(lo.grid_mask, 8, 0), 8, 1))
    assert lo.area == pytest.approx(lo.grid_mask.mean())


def test_harden_empty_allowed():
    assert harden(np.zeros(16), 0.5, patch=4).pixel_mask.sum() == 0


@pytest.mark.parametrize("t", [0.0, 1.0, -0.2])
def test_harden_threshold_range(t):
    with pytest.raises(ContractError):
        harden(np.zeros(4), t)


def test_harden_non_square():
    with pytest.raises(ContractError):
        harden(np.zeros(10))


def test_soft_pixel_mask_matches_hard_upsample():
    P = np.random.default_rng(10).random((2, 16))
    soft = soft_pixel_mask(Tensor(P), patch=4).data
    assert soft.shape == (2, 16, 16)
    np.testing.assert_array_equal(soft[0] >= 0.5, harden(P[0], 0.5, patch=4).pixel_mask.astype(bool))
