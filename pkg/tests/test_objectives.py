import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionedit import autodiff as ad
from regionedit.autodiff import Tensor
from regionedit.diffusion import DiffusionSchedule, GuidanceConfig, TinyNet
from regionedit.encoders import SemanticProjector, VisionEncoder, encode_image
from regionedit.errors import (
    ContractError,
    DegenerateDirectionError,
    DegenerateInputError,
)
from regionedit.objectives import (
    EditBundle,
    EditorTrainer,
    LossReport,
    LossWeights,
    combine,
    editing_terms,
    loss_clip_d,
    loss_clip_g,
    loss_clip_s,
    loss_sem_align,
    similarity_matrix,
    stack_bundles,
    total_loss,
)

D = 8


def vec(rng, *shape):
    return rng.standard_normal(shape)


# ----------------------------------------------------------------------------
# loss terms


def test_sem_align_zero_and_upper_bound():
    rng = np.random.default_rng(0)
    f = SemanticProjector(D, seed=1)
    Fe, Fi = vec(rng, 5, D), vec(rng, 7, D)
    Te, To = f(Tensor(Fe)).data, f(Tensor(Fi)).data
    e, _, s = loss_sem_align(Fe, Fi, Te, To, f)
    assert abs(s.item()) < 1e-15 and abs(e.item()) < 1e-15
    _, _, s = loss_sem_align(Fe, Fi, -Te, -To, f)
    assert s.item() == pytest.approx(4.0, abs=1e-12)


def test_sem_align_gradient_on_projector():
    rng = np.random.default_rng(1)
    f = SemanticProjector(D, seed=2)
    Fe, Fi, Te, To = vec(rng, 2, 5, D), vec(rng, 2, 5, D), vec(rng, 2, D), vec(rng, 2, D)
    for _ in range(20):
        err = ad.gradcheck(lambda: ad.sum_(loss_sem_align(Fe, Fi, Te, To, f)[2]), f.parameters(),
                           max_entries=4, rng=rng)
        assert err < 1e-4


def test_clip_g_cases():
    t = np.array([1.0, 2.0, -1.0])
    assert loss_clip_g(3 * t, t).item() == pytest.approx(0.0, abs=1e-15)
    assert loss_clip_g(np.array([2.0, -1.0, 0.0]), t).item() == pytest.approx(1.0, abs=1e-15)
    assert loss_clip_g(-t, t).item() == pytest.approx(2.0, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        loss_clip_g(np.zeros(3), t)


def test_clip_d_cases():
    rng = np.random.default_rng(2)
    Io, To, Te = vec(rng, D), vec(rng, D), vec(rng, D)
    assert loss_clip_d(Io + 0.5 * (Te - To), Io, Te, To).item() == pytest.approx(0.0, abs=1e-12)
    assert loss_clip_d(Io - (Te - To), Io, Te, To).item() == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(DegenerateDirectionError):
        loss_clip_d(vec(rng, D), Io, To, To)
    with pytest.raises(DegenerateDirectionError):
        loss_clip_d(Io, Io, Te, To)


def test_clip_s_cases():
    rng = np.random.default_rng(3)
    F = vec(rng, 6, D)
    assert loss_clip_s(F, F).item() == 0.0
    assert loss_clip_s(F, 2 * F).item() == pytest.approx(0.0, abs=1e-24)
    S = similarity_matrix(F).data
    np.testing.assert_allclose(S, S.T, atol=1e-15)
    np.testing.assert_allclose(np.diag(S), 1.0, atol=1e-15)
    G = vec(rng, 6, D)
    assert loss_clip_s(F, G).item() == pytest.approx(loss_clip_s(G, F).item(), rel=1e-13)
    assert loss_clip_s(F, G).item() == pytest.approx(((S - similarity_matrix(G).data) ** 2).mean(), rel=1e-12)
    # entries of each similarity matrix lie in [-1, 1], so the mean squared gap is at most 4
    assert 0.0 < loss_clip_s(F, G).item() <= 4.0


def test_clip_s_zero_row():
    F = np.ones((3, D))
    G = F.copy()
    G[1] = 0
    with pytest.raises(DegenerateInputError):
        loss_clip_s(F, G)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_terms_are_scale_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    f = SemanticProjector(D, seed=seed % 5)
    Fe, Fi, Te, To = vec(rng, 4, D), vec(rng, 4, D), vec(rng, D), vec(rng, D)
    I, Io = vec(rng, D), vec(rng, D)
    _, _, s1 = loss_sem_align(Fe, Fi, Te, To, f)
    _, _, s2 = loss_sem_align(Fe, Fi, a * Te, b * To, f)
    assert abs(s1.item() - s2.item()) < 1e-12
    assert abs(loss_clip_g(I, Te).item() - loss_clip_g(a * I, b * Te).item()) < 1e-12
    d1 = loss_clip_d(I, Io, Te, To).item()
    d2 = loss_clip_d(a * I, a * Io, b * Te, b * To).item()
    assert abs(d1 - d2) < 1e-10
    s1, s2 = loss_clip_s(Fi, Fe).item(), loss_clip_s(a * Fi, b * Fe).item()
    assert abs(s1 - s2) < 1e-10 * max(1.0, s1)
    for v in (s1, loss_clip_g(I, Te).item(), d1):
        assert v >= 0
    assert 0 <= d1 <= 2


# ----------------------------------------------------------------------------
# report


def test_total_alpha_zero():
    w = LossWeights(alpha=0.0, beta=2.0)
    r = total_loss(0.3, 0.4, 0.5, 0.6, 0.7, w)
    assert r.total == 2.0 * r.clip


def test_total_zero_components():
    assert total_loss(0, 0, 0, 0, 0).total == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 2), min_size=5, max_size=5), st.lists(st.floats(0, 5), min_size=5, max_size=5))
def test_report_identities(vals, ws):
    w = LossWeights(*ws)
    r = total_loss(*vals, w)
    assert abs(r.sem_align - (r.sem_edited + r.sem_original)) <= 1e-15
    assert abs(r.clip - (w.lambda_g * r.clip_g + w.lambda_d * r.clip_d + w.lambda_s * r.clip_s)) <= 1e-15 * max(1, r.clip)
    assert abs(r.total - (w.alpha * r.sem_align + w.beta * r.clip)) <= 1e-15 * max(1, r.total)


def test_negative_weight_rejected():
    with pytest.raises(ContractError):
        LossWeights(lambda_s=-1.0)


def test_combine_on_batches_matches_scalars():
    rng = np.random.default_rng(4)
    parts = [Tensor(rng.random(3)) for _ in range(5)]
    w = LossWeights(0.5, 2.0, 0.1, 3.0, 0.7)
    terms = combine(*parts, w)
    for i in range(3):
        r = total_loss(*(p.data[i] for p in parts), w)
        assert terms["total"].data[i] == r.total


# ----------------------------------------------------------------------------
# end to end


@pytest.fixture(scope="module")
def frozen():
    vision = VisionEncoder(D, patch=4, image=16, depth=1, seed=0).freeze()
    net = TinyNet(3, hidden=4, cond_dim=D, seed=0)
    rng = np.random.default_rng(0)
    for p in net.parameters():
        p.data[...] = rng.standard_normal(p.shape) * 0.2
    return vision, net.freeze()


def make_bundles(vision, n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        X = np.full((16, 16, 3), 0.9)
        r, c = rng.integers(0, 12, size=2)
        X[r:r + 4, c:c + 4] = rng.random(3)
        I, F = encode_image(vision, X)
        keep = np.array([True] * 4 + [False] * 2)
        out.append(EditBundle(X, "change", "a", "b", F, I, rng.standard_normal((6, D)), keep,
                              rng.standard_normal(D), rng.standard_normal(D)))
    return out


def micro_trainer(**kw):
    base = dict(d=D, patch=4, K=2, epochs=1, batch_size=2, w_cfg=2.0, lr=1e-2, seed=0)
    base.update(kw)
    return EditorTrainer(**base)


def test_end_to_end_gradient(frozen):
    vision, net = frozen
    tr = micro_trainer().init_modules()
    rng = np.random.default_rng(5)
    for p in tr.trainable():
        p.data[...] = rng.standard_normal(p.shape) * 0.4
    batch = stack_bundles(make_bundles(vision, 2))
    z_T = rng.standard_normal((2, 16, 16, 3))
    sched = tr.schedule
    g = GuidanceConfig(2.0, np.zeros(D))

    def fn():
        terms, _, dropped = editing_terms(tr.weights_, tr.f_sem_, vision, net, batch, sched, g, sched.timesteps(2),
                                          z_T, tr.loss_weights, patch=4)
        assert dropped == 0
        return ad.sum_(terms["total"])

    for _ in range(20):
        assert ad.gradcheck(fn, tr.trainable(), max_entries=3, rng=rng) < 1e-3


def test_trainable_set_is_exact():
    tr = micro_trainer().init_modules()
    names = [n for n, _ in tr.weights_.named_parameters()] + [n for n, _ in tr.f_sem_.named_parameters()]
    assert names == ["cross_q", "cross_k", "cross_v", "self_q", "self_k", "self_v", "mlp.fc1.w", "mlp.fc1.b",
                     "mlp.fc2.w", "mlp.fc2.b", "mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w", "mlp.fc2.b"]


def test_zero_weights_leave_parameters(frozen):
    vision, net = frozen
    tr = micro_trainer(lambda_g=0, lambda_d=0, lambda_s=0, alpha=0, beta=0, batch_size=4)
    init = micro_trainer().init_modules()
    tr.fit(make_bundles(vision, 4), vision, net, np.zeros(D))
    for a, b in zip(tr.trainable(), init.trainable()):
        assert np.array_equal(a.data, b.data)


def test_fit_freezes_nothing_else_and_logs(frozen, tmp_path):
    vision, net = frozen
    before = vision.checksum(), net.checksum()
    log = tmp_path / "editor.csv"
    tr = micro_trainer(epochs=2).fit(make_bundles(vision, 4), vision, net, np.zeros(D), log_path=log)
    assert (vision.checksum(), net.checksum()) == before
    rows = list(csv.reader(log.open()))
    assert rows[0][0] == "epoch" and rows[0][-1] == "skipped"
    assert [r[0] for r in rows[1:]] == ["0", "1"]
    assert len(tr.history_) == 2 and isinstance(tr.history_[0], LossReport)
    assert tr.weights_.frozen and tr.f_sem_.frozen
    r = tr.history_[0]
    assert abs(r.sem_align - (r.sem_edited + r.sem_original)) < 1e-12


def test_fit_is_deterministic(frozen):
    vision, net = frozen
    a = micro_trainer().fit(make_bundles(vision, 4), vision, net, np.zeros(D))
    b = micro_trainer().fit(make_bundles(vision, 4), vision, net, np.zeros(D))
    assert a.weights_.checksum() == b.weights_.checksum()


def test_identical_captions_are_skipped(frozen):
    vision, net = frozen
    bundles = make_bundles(vision, 4)
    bundles[1].T_e = bundles[1].T_o.copy()
    tr = micro_trainer().fit(bundles, vision, net, np.zeros(D))
    assert tr.skipped_ == [1]


def test_fit_requires_frozen(frozen):
    vision, _ = frozen
    with pytest.raises(ContractError):
        micro_trainer().fit(make_bundles(vision, 2), vision, TinyNet(3, 4, D), np.zeros(D))


def test_state_round_trip(frozen):
    vision, net = frozen
    tr = micro_trainer().fit(make_bundles(vision, 2), vision, net, np.zeros(D))
    other = micro_trainer().load_state_dict(tr.state_dict())
    b = stack_bundles(make_bundles(vision, 2, seed=3))
    np.testing.assert_array_equal(tr.predict_proba(b["F_img"], b["F_ins"], b["keep"]),
                                  other.predict_proba(b["F_img"], b["F_ins"], b["keep"]))
    preds = other.predict(b["F_img"], b["F_ins"], b["keep"])
    assert preds[0].pixel_mask.shape == (16, 16)


def test_sampler_schedule_subset():
    assert DiffusionSchedule().timesteps(8) == micro_trainer(K=8).schedule.timesteps(8)
