"""Instruction-conditioned edit-region predictor.

Image patch tokens attend to instruction tokens, then to each other; a
token-wise MLP with a sigmoid gives a per-patch edit probability, which
is thresholded onto the patch grid and upsampled to pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .nn import MLP, Module, glorot


class FusionWeights(Module):
    """Six square projections for the two attentions plus the region MLP (d -> 2d -> 1)."""

    NAMES = ("cross_q", "cross_k", "cross_v", "self_q", "self_k", "self_v")

    def __init__(self, d: int = 32, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.d = d
        for name in self.NAMES:
            setattr(self, name, self.param(name, glorot(rng, d, d)))
        self.mlp = self.child("mlp", MLP(rng, d, 2 * d, 1, zero_last=True))


def _as_batch(F) -> tuple[Tensor, bool]:
    F = ad.as_tensor(F)
    if F.ndim == 2:
        return ad.reshape(F, (1,) + F.shape), True
    if F.ndim != 3:
        raise DimensionError(f"expected (N, d) or (B, N, d) features, got {F.shape}")
    return F, False


def _attend(q: Tensor, k: Tensor, v: Tensor, key_mask=None, weights_out: list | None = None) -> Tensor:
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    att = ad.softmax_rows(scores, key_mask)
    if weights_out is not None:
        weights_out.append(att.data)
    return ad.matmul(att, v)


def cross_attend(fw: FusionWeights, F_img, F_ins, keep=None, weights_out: list | None = None) -> Tensor:
    """Patch tokens (queries) attend to instruction tokens (keys/values).

    ``keep`` marks non-PAD instruction tokens, shape (M,) or (B, M); an
    instruction with no real token is a contract error.
    """
    F_img, single = _as_batch(F_img)
    F_ins, _ = _as_batch(F_ins)
    d = fw.d
    if F_img.shape[-1] != d or F_ins.shape[-1] != d:
        raise DimensionError(f"feature width must be {d}")
    if F_ins.shape[0] != F_img.shape[0]:
        raise DimensionError("image and instruction batches differ")
    mask = None
    if keep is not None:
        keep = np.asarray(keep, dtype=bool).reshape(F_ins.shape[0], F_ins.shape[1])
        if not keep.any(axis=1).all():
            raise ContractError("instruction consists only of padding")
        mask = keep[:, None, :]
    out = _attend(ad.matmul(F_img, fw.cross_q), ad.matmul(F_ins, fw.cross_k),
                  ad.matmul(F_ins, fw.cross_v), mask, weights_out)
    return out[0] if single else out


def self_attend(fw: FusionWeights, F, weights_out: list | None = None) -> Tensor:
    F, single = _as_batch(F)
    out = _attend(ad.matmul(F, fw.self_q), ad.matmul(F, fw.self_k), ad.matmul(F, fw.self_v),
                  None, weights_out)
    return out[0] if single else out


def predict_region(fw: FusionWeights, F) -> Tensor:
    """Per-token edit probability; (..., N, d) -> (..., N)."""
    F = ad.as_tensor(F)
    logits = fw.mlp(F)
    return ad.sigmoid(ad.reshape(logits, logits.shape[:-1]))


def region_probabilities(fw: FusionWeights, F_img, F_ins, keep=None) -> Tensor:
    """Cross-attention, self-attention and the region head in one pass."""
    return predict_region(fw, self_attend(fw, cross_attend(fw, F_img, F_ins, keep)))


@dataclass
class RegionPrediction:
    probabilities: np.ndarray  # (N,)
    grid_mask: np.ndarray  # (g, g) of {0, 1}
    pixel_mask: np.ndarray  # (H, W) of {0, 1}
    threshold: float

    @property
    def area(self) -> float:
        return float(self.pixel_mask.mean())


def grid_side(n: int) -> int:
    g = math.isqrt(n)
    if g * g != n:
        raise ContractError(f"{n} patches do not form a square grid")
    return g


def harden(P, threshold: float = 0.5, patch: int = 8) -> RegionPrediction:
    """Threshold (inclusive) onto the patch grid and upsample to pixels."""
    if not 0.0 < threshold < 1.0:
        raise ContractError("threshold must lie in (0, 1)")
    P = np.asarray(P.data if isinstance(P, Tensor) else P, dtype=np.float64)
    if P.ndim != 1:
        raise DimensionError("harden takes one example's probabilities (N,)")
    g = grid_side(P.size)
    grid = (P >= threshold).astype(np.uint8).reshape(g, g)
    pixel = np.kron(grid, np.ones((patch, patch), dtype=np.uint8))
    return RegionPrediction(P.copy(), grid, pixel, float(threshold))


def soft_pixel_mask(P: Tensor, patch: int = 8) -> Tensor:
    """(B, N) probabilities -> (B, H, W) nearest-neighbour soft mask."""
    B, n = P.shape
    g = grid_side(n)
    return ad.upsample_nearest(ad.reshape(P, (B, g, g)), patch)
