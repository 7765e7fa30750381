"""Per-example editing metrics and the matched-area random-mask baseline."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import DegenerateDirectionError, DimensionError
from .objectives import loss_clip_d


@dataclass
class MetricReport:
    l1: float
    l2: float
    clip_i: float
    dino: float
    clip_out: float
    clip_dir: float  # NaN when the image or caption change is exactly zero
    iou: float  # NaN without an oracle mask
    area: float
    random_iou: float = float("nan")

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)


def _cos(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def l1_distance(X, Y) -> float:
    return float(np.mean(np.abs(np.asarray(X) - np.asarray(Y))))


def l2_distance(X, Y) -> float:
    """Mean squared pixel difference."""
    return float(np.mean((np.asarray(X) - np.asarray(Y)) ** 2))


def clip_direction(I_res, I_ori, T_e, T_o) -> float:
    """Directional similarity, defined as one minus the directional training loss."""
    try:
        return float(1.0 - loss_clip_d(I_res, I_ori, T_e, T_o).item())
    except DegenerateDirectionError:
        return float("nan")


def iou(pred, oracle) -> float:
    pred, oracle = np.asarray(pred, dtype=bool), np.asarray(oracle, dtype=bool)
    if pred.shape != oracle.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {oracle.shape}")
    union = np.logical_or(pred, oracle).sum()
    return float(np.logical_and(pred, oracle).sum() / union) if union else 0.0


def random_mask_iou(oracle, n_cells: int, grid: int = 8, draws: int = 256, seed: int = 0) -> float:
    """Mean IoU against ``oracle`` of masks made of ``n_cells`` uniformly chosen grid cells."""
    oracle = np.asarray(oracle, dtype=bool)
    if n_cells == 0:
        return 0.0
    patch = oracle.shape[0] // grid
    # oracle coverage per cell lets every draw be scored without building pixel masks
    cover = oracle.reshape(grid, patch, grid, patch).sum(axis=(1, 3)).ravel()
    total_o, cell_px = oracle.sum(), patch * patch
    rng = np.random.default_rng(seed)
    picks = np.argsort(rng.random((draws, grid * grid)), axis=1)[:, :n_cells]
    inter = cover[picks].sum(axis=1)
    union = n_cells * cell_px + total_o - inter
    return float(np.mean(inter / union))


def edit_metrics(X_src, X_res, I_ori, I_res, A_ori, A_res, T_o, T_e, pred_mask, oracle_mask=None,
                 grid: int = 8) -> MetricReport:
    """Scores for one edit. ``A_*`` are CLS embeddings from the auxiliary encoder."""
    pred_mask = np.asarray(pred_mask, dtype=bool)
    if oracle_mask is None:
        score = base = float("nan")
    else:
        score = iou(pred_mask, oracle_mask)
        patch = pred_mask.shape[0] // grid
        n_cells = int(pred_mask.sum() // (patch * patch))
        base = random_mask_iou(oracle_mask, n_cells, grid)
    return MetricReport(
        l1=l1_distance(X_res, X_src), l2=l2_distance(X_res, X_src), clip_i=_cos(I_res, I_ori),
        dino=_cos(A_res, A_ori), clip_out=_cos(I_res, T_e), clip_dir=clip_direction(I_res, I_ori, T_e, T_o),
        iou=score, area=float(pred_mask.mean()), random_iou=base)


def mean_report(reports) -> dict[str, float]:
    """Corpus means ignoring NaN entries; ``n_degenerate_dir`` counts NaN directions."""
    out = {}
    for name in MetricReport.names():
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        ok = vals[~np.isnan(vals)]
        out[name] = float(ok.mean()) if len(ok) else math.nan
    out["n"] = len(reports)
    out["n_degenerate_dir"] = int(sum(math.isnan(r.clip_dir) for r in reports))
    return out
