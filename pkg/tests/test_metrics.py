import math

import numpy as np
import pytest

from regionedit.errors import DimensionError
from regionedit.metrics import (
    MetricReport,
    clip_direction,
    edit_metrics,
    iou,
    l1_distance,
    l2_distance,
    mean_report,
    random_mask_iou,
)
from regionedit.objectives import loss_clip_d


def _cells(rng, k, grid=8, patch=8):
    on = np.zeros(grid * grid, dtype=bool)
    on[rng.choice(grid * grid, size=k, replace=False)] = True
    return np.kron(on.reshape(grid, grid), np.ones((patch, patch), dtype=bool))


def test_distances():
    X = np.zeros((4, 4, 3))
    Y = X.copy()
    Y[0, 0] = 1.0
    assert l1_distance(X, X) == 0.0 and l2_distance(X, X) == 0.0
    assert l1_distance(X, Y) == pytest.approx(3 / 48)
    assert l2_distance(X, 0.5 + X) == pytest.approx(0.25)


def test_iou_cases():
    a = np.zeros((4, 4), dtype=bool)
    a[:2] = True
    b = np.zeros_like(a)
    b[1:3] = True
    assert iou(a, a) == 1.0
    assert iou(a, ~a) == 0.0
    assert iou(a, b) == pytest.approx(4 / 12)
    assert iou(np.zeros_like(a), np.zeros_like(a)) == 0.0
    with pytest.raises(DimensionError):
        iou(a, a[:2])


def test_clip_direction_is_one_minus_training_loss():
    rng = np.random.default_rng(0)
    for _ in range(20):
        I_res, I_ori, T_e, T_o = rng.standard_normal((4, 16))
        assert clip_direction(I_res, I_ori, T_e, T_o) == pytest.approx(
            1.0 - loss_clip_d(I_res, I_ori, T_e, T_o).item(), abs=1e-15)
    v = rng.standard_normal(16)
    assert math.isnan(clip_direction(v, v, rng.standard_normal(16), rng.standard_normal(16)))


def test_random_baseline_matches_explicit_masks():
    # slow oracle: build every random mask in pixels and score it directly
    rng = np.random.default_rng(1)
    oracle = _cells(rng, 5) & (rng.random((64, 64)) < 0.7)
    for k in (1, 4, 12):
        draws = np.random.default_rng(2)
        explicit = np.mean([iou(_cells(draws, k), oracle) for _ in range(4000)])
        assert random_mask_iou(oracle, k, draws=4000, seed=3) == pytest.approx(explicit, abs=0.01)
    assert random_mask_iou(oracle, 0) == 0.0


def test_random_baseline_with_full_grid_is_the_oracle_fraction():
    oracle = np.zeros((64, 64), dtype=bool)
    oracle[:10, :20] = True
    assert random_mask_iou(oracle, 64, draws=8) == pytest.approx(oracle.mean())


def _report(rng, X_src, X_res, mask, oracle=None):
    I, A, T_o, T_e = rng.standard_normal((4, 8))
    I_res = I if np.array_equal(X_src, X_res) else I + rng.standard_normal(8)
    A_res = A if np.array_equal(X_src, X_res) else A + rng.standard_normal(8)
    return edit_metrics(X_src, X_res, I, I_res, A, A_res, T_o, T_e, mask, oracle)


def test_metric_bounds():
    rng = np.random.default_rng(4)
    for _ in range(50):
        X = rng.random((64, 64, 3))
        mask = _cells(rng, int(rng.integers(0, 10)))
        oracle = _cells(rng, 4)
        r = _report(rng, X, rng.random((64, 64, 3)), mask, oracle)
        assert r.l1 >= 0 and r.l2 >= 0
        for v in (r.clip_i, r.dino, r.clip_out, r.clip_dir):
            assert -1.0 <= v <= 1.0
        assert 0.0 <= r.iou <= 1.0 and 0.0 <= r.random_iou <= 1.0
        assert r.area == pytest.approx(mask.mean())


def test_identity_edit_scores():
    rng = np.random.default_rng(5)
    X = rng.random((64, 64, 3))
    r = _report(rng, X, X.copy(), np.zeros((64, 64)), _cells(rng, 3))
    assert r.l1 == 0 and r.l2 == 0 and r.clip_i == 1.0 and r.dino == 1.0 and r.iou == 0.0
    assert math.isnan(r.clip_dir)
    assert math.isnan(_report(rng, X, X, np.zeros((64, 64))).iou)


def test_mean_report_skips_nan_and_counts_degenerate_directions():
    base = dict(l1=0.1, l2=0.01, clip_i=0.9, dino=0.8, clip_out=0.3, iou=0.5, area=0.1, random_iou=0.1)
    reports = [MetricReport(clip_dir=0.2, **base), MetricReport(clip_dir=float("nan"), **base),
               MetricReport(clip_dir=0.4, **base)]
    out = mean_report(reports)
    assert out["clip_dir"] == pytest.approx(0.3)
    assert out["n"] == 3 and out["n_degenerate_dir"] == 1
    assert out["l1"] == pytest.approx(0.1)
