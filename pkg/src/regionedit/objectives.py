"""Composite editing objective and the editor training loop.

Every loss term is a cosine distance (or a mean squared distance between
patch-similarity matrices) and works on single vectors or batches.
Training runs a short deterministic sampler with the *soft* region
probabilities as the blend mask, so the CLIP-space terms on the result
back-propagate into the region predictor while the encoders and the
denoiser stay frozen.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import DiffusionSchedule, GuidanceConfig, run_sampler
from .encoders import SemanticProjector
from .errors import ContractError, DegenerateDirectionError, DimensionError
from .region import (
    FusionWeights,
    cross_attend,
    harden,
    predict_region,
    self_attend,
    soft_pixel_mask,
)

# ---------------------------------------------------------------------------
# weights and report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    lambda_g: float = 1.0
    lambda_d: float = 1.0
    lambda_s: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ContractError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossReport:
    sem_edited: float
    sem_original: float
    sem_align: float
    clip_g: float
    clip_d: float
    clip_s: float
    clip: float
    total: float
    mask_area: float = float("nan")

    FIELDS = ("sem_edited", "sem_original", "sem_align", "clip_g", "clip_d", "clip_s", "clip", "total",
              "mask_area")

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def _t(x) -> Tensor:
    return ad.as_tensor(x)


def cosine_distance(a, b) -> Tensor:
    return ad.add_scalar(ad.neg(ad.cosine(_t(a), _t(b))), 1.0)


def loss_sem_align(F_edited, F_img, T_e, T_o, f_sem: SemanticProjector):
    """(edited, original, sum): projected token features against the two captions."""
    edited = cosine_distance(f_sem(_t(F_edited)), T_e)
    original = cosine_distance(f_sem(_t(F_img)), T_o)
    return edited, original, ad.add(edited, original)


def loss_clip_g(I_res, T_e) -> Tensor:
    return cosine_distance(I_res, T_e)


def direction_is_degenerate(a, b) -> np.ndarray:
    """Rows where ``a - b`` is exactly zero."""
    diff = np.asarray(a.data if isinstance(a, Tensor) else a) - np.asarray(b.data if isinstance(b, Tensor) else b)
    return ~np.any(diff != 0, axis=-1)


def loss_clip_d(I_res, I_ori, T_e, T_o) -> Tensor:
    """Cosine distance between the image change and the caption change."""
    if np.any(direction_is_degenerate(T_e, T_o)):
        raise DegenerateDirectionError("target and original captions embed identically")
    if np.any(direction_is_degenerate(I_res, I_ori)):
        raise DegenerateDirectionError("edited image embeds identically to the source")
    return cosine_distance(ad.sub(_t(I_res), _t(I_ori)), ad.sub(_t(T_e), _t(T_o)))


def similarity_matrix(F) -> Tensor:
    """Pairwise cosine similarities between the rows of ``(..., N, d)``."""
    U = ad.l2_normalize_rows(_t(F))
    return ad.matmul(U, ad.transpose(U))


def loss_clip_s(F_img, F_res) -> Tensor:
    """Mean squared difference between patch-similarity matrices; (..., N, d) -> (...).

    Averaged over the N^2 entries rather than summed, which keeps the term
    on the same scale as the cosine distances at unit loss weights.
    """
    F_img, F_res = _t(F_img), _t(F_res)
    if F_img.shape != F_res.shape:
        raise DimensionError(f"patch features differ in shape: {F_img.shape} vs {F_res.shape}")
    diff = ad.sub(similarity_matrix(F_img), similarity_matrix(F_res))
    sq = ad.mul(diff, diff)
    n = F_img.shape[-2]
    return ad.scale(ad.sum_(ad.sum_(sq, axis=-1), axis=-1), 1.0 / (n * n))


def combine(sem_edited: Tensor, sem_original: Tensor, clip_g: Tensor, clip_d: Tensor, clip_s: Tensor,
            weights: LossWeights) -> dict[str, Tensor]:
    """Weighted sums of the component terms, as tensors keyed like :class:`LossReport`."""
    sem_align = ad.add(sem_edited, sem_original)
    clip = ad.add(ad.add(ad.scale(clip_g, weights.lambda_g), ad.scale(clip_d, weights.lambda_d)),
                  ad.scale(clip_s, weights.lambda_s))
    total = ad.add(ad.scale(sem_align, weights.alpha), ad.scale(clip, weights.beta))
    return dict(sem_edited=sem_edited, sem_original=sem_original, sem_align=sem_align, clip_g=clip_g,
                clip_d=clip_d, clip_s=clip_s, clip=clip, total=total)


def total_loss(sem_edited, sem_original, clip_g, clip_d, clip_s, weights: LossWeights = LossWeights(),
               mask_area: float = float("nan")) -> LossReport:
    """Scalar report from scalar component values."""
    terms = combine(*(_t(float(v)) for v in (sem_edited, sem_original, clip_g, clip_d, clip_s)), weights)
    return LossReport(**{k: float(v.data) for k, v in terms.items()}, mask_area=float(mask_area))


# ---------------------------------------------------------------------------
# training examples
# ---------------------------------------------------------------------------


@dataclass
class EditBundle:
    """One editing example with its frozen-encoder features.

    ``X``: source image (H, W, 3); ``F_img``: patch tokens (N, d);
    ``I_ori``: image CLS (d,); ``F_ins``/``keep``: instruction tokens (M, d)
    and their non-PAD mask; ``T_o``/``T_e``: original and target caption
    embeddings (d,).
    """

    X: np.ndarray
    instruction: str
    t_o: str
    t_e: str
    F_img: np.ndarray
    I_ori: np.ndarray
    F_ins: np.ndarray
    keep: np.ndarray
    T_o: np.ndarray
    T_e: np.ndarray


def stack_bundles(bundles) -> dict[str, np.ndarray]:
    keys = ("X", "F_img", "I_ori", "F_ins", "keep", "T_o", "T_e")
    return {k: np.stack([getattr(b, k) for b in bundles]) for k in keys}


# ---------------------------------------------------------------------------
# editor
# ---------------------------------------------------------------------------


def region_forward(fw: FusionWeights, F_img, F_ins, keep):
    """Instruction-fused features and region probabilities, both on the tape."""
    F_edited = cross_attend(fw, F_img, F_ins, keep)
    return F_edited, predict_region(fw, self_attend(fw, F_edited))


def editing_terms(fw: FusionWeights, f_sem: SemanticProjector, vision, denoiser, batch: dict,
                  schedule: DiffusionSchedule, guidance: GuidanceConfig, timesteps, z_T: np.ndarray,
                  weights: LossWeights, patch: int = 8):
    """Per-example loss terms (tensors of shape (B',)) for a stacked batch.

    The source image is the latent (identity codec); the soft region
    probabilities, upsampled to pixels, are the blend mask of every
    sampler step. Returns ``(terms, P, dropped)`` where ``dropped`` counts
    examples whose result embeds exactly like the source (no direction);
    ``terms`` is None when nothing is left.
    """
    F_edited, P = region_forward(fw, batch["F_img"], batch["F_ins"], batch["keep"])
    m = soft_pixel_mask(P, patch)
    z = run_sampler(denoiser, Tensor(batch["X"]), batch["T_e"], m, schedule, guidance, Tensor(z_T), timesteps)
    I_res, F_res = vision(z)
    ok = np.flatnonzero(~direction_is_degenerate(I_res, batch["I_ori"]))
    if len(ok) == 0:
        return None, P, len(z_T)
    if len(ok) < len(z_T):
        F_edited, I_res, F_res, m = (ad.take_rows(t, ok) for t in (F_edited, I_res, F_res, m))
        batch = {k: v[ok] for k, v in batch.items()}
    sem_e, sem_o, _ = loss_sem_align(F_edited, batch["F_img"], batch["T_e"], batch["T_o"], f_sem)
    g = loss_clip_g(I_res, batch["T_e"])
    d = loss_clip_d(I_res, batch["I_ori"], batch["T_e"], batch["T_o"])
    s = loss_clip_s(batch["F_img"], F_res)
    terms = combine(sem_e, sem_o, g, d, s, weights)
    terms["mask_area"] = Tensor(m.data.mean(axis=(1, 2)))
    return terms, P, len(z_T) - len(ok)


class EditorTrainer(BaseEstimator):
    """Train the region predictor and semantic projector against frozen encoders and denoiser.

    After :meth:`fit`, ``weights_`` and ``f_sem_`` hold the trained modules
    (frozen), ``history_`` the per-epoch mean :class:`LossReport`, and
    ``skipped_`` the per-epoch count of examples dropped because their
    caption or image change was exactly zero.
    """

    def __init__(self, d=32, epochs=3, batch_size=4, lr=3e-3, K=8, w_cfg=3.0, threshold=0.5, patch=8,
                 lambda_g=1.0, lambda_d=1.0, lambda_s=1.0, alpha=1.0, beta=1.0, T=50, beta_start=1e-4,
                 beta_end=0.02, train_steps=1000, seed=0):
        self.d = d
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.K = K
        self.w_cfg = w_cfg
        self.threshold = threshold
        self.patch = patch
        self.lambda_g = lambda_g
        self.lambda_d = lambda_d
        self.lambda_s = lambda_s
        self.alpha = alpha
        self.beta = beta
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.train_steps = train_steps
        self.seed = seed

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_g, self.lambda_d, self.lambda_s, self.alpha, self.beta)

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.T, self.beta_start, self.beta_end, self.train_steps)

    def init_modules(self):
        self.weights_ = FusionWeights(self.d, self.seed)
        self.f_sem_ = SemanticProjector(self.d, self.seed + 1)
        return self

    def trainable(self) -> list[Tensor]:
        return self.weights_.parameters() + self.f_sem_.parameters()

    def noise_for(self, epoch: int, index) -> np.ndarray:
        """Initial sampler noise, fixed per (seed, epoch, example index)."""
        return np.stack([np.random.default_rng([self.seed, epoch, int(i)]).standard_normal(self._latent_shape)
                         for i in index])

    def step_loss(self, batch: dict, z_T: np.ndarray, vision, denoiser, null_cond):
        guidance = GuidanceConfig(self.w_cfg, null_cond)
        sched = self.schedule
        return editing_terms(self.weights_, self.f_sem_, vision, denoiser, batch, sched, guidance,
                             sched.timesteps(self.K), z_T, self.loss_weights, self.patch)

    def fit(self, bundles, vision, denoiser, null_cond, log_path=None, callback=None):
        """``bundles``: list of :class:`EditBundle`; ``vision``/``denoiser`` must be frozen."""
        vision.require_frozen("editor training")
        denoiser.require_frozen("editor training")
        if not bundles:
            raise ContractError("no training examples")
        data = stack_bundles(bundles)
        self._latent_shape = data["X"].shape[1:]
        self.init_modules()
        opt = ad.Adam(self.trainable(), lr=self.lr)
        rng = np.random.default_rng(self.seed)
        # caption pairs that embed identically can never give a direction
        text_degenerate = direction_is_degenerate(data["T_e"], data["T_o"])
        self.history_, self.skipped_ = [], []
        if log_path is not None:
            log_path = Path(log_path)
            with log_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(("epoch",) + LossReport.FIELDS + ("skipped",))
        for epoch in range(self.epochs):
            order = rng.permutation(len(bundles))
            sums = dict.fromkeys(LossReport.FIELDS, 0.0)
            used = skipped = 0
            for i in range(0, len(order), self.batch_size):
                idx = order[i:i + self.batch_size]
                keep_idx = idx[~text_degenerate[idx]]
                skipped += len(idx) - len(keep_idx)
                if len(keep_idx) == 0:
                    continue
                batch = {k: v[keep_idx] for k, v in data.items()}
                opt.zero_grad()
                terms, _, dropped = self.step_loss(batch, self.noise_for(epoch, keep_idx), vision, denoiser,
                                                   null_cond)
                skipped += dropped
                if terms is None:
                    continue
                n = terms["total"].shape[0]
                ad.scale(ad.sum_(terms["total"]), 1.0 / n).backward()
                opt.step()
                for k in LossReport.FIELDS:
                    sums[k] += float(terms[k].data.sum())
                used += n
            report = LossReport(**{k: v / max(used, 1) for k, v in sums.items()})
            self.history_.append(report)
            self.skipped_.append(skipped)
            if log_path is not None:
                with log_path.open("a", newline="") as fh:
                    csv.writer(fh).writerow([epoch] + [repr(getattr(report, k)) for k in LossReport.FIELDS]
                                            + [skipped])
            if callback is not None:
                callback(epoch, report, skipped)
        self.weights_.freeze()
        self.f_sem_.freeze()
        return self

    def predict_proba(self, F_img, F_ins, keep=None) -> np.ndarray:
        check_is_fitted(self, "weights_")
        with ad.no_grad():
            return region_forward(self.weights_, F_img, F_ins, keep)[1].data

    def predict(self, F_img, F_ins, keep=None):
        """Hard region predictions, one per example."""
        P = self.predict_proba(F_img, F_ins, keep)
        P = P[None] if P.ndim == 1 else P
        return [harden(p, self.threshold, self.patch) for p in P]

    def state_dict(self) -> dict[str, np.ndarray]:
        check_is_fitted(self, "weights_")
        return {**self.weights_.state_dict("region."), **self.f_sem_.state_dict("f_sem.")}

    def load_state_dict(self, state) -> EditorTrainer:
        self.init_modules()
        self.weights_.load_state_dict(state, "region.")
        self.f_sem_.load_state_dict(state, "f_sem.")
        self.weights_.freeze()
        self.f_sem_.freeze()
        return self
