"""Toy dual encoder, instruction encoder and semantic projector.

The vision encoder emits a CLS embedding plus one token per 8x8 patch;
the text encoder reads the ``<start>`` position as its CLS embedding.
Both are trained together with a symmetric InfoNCE objective and then
frozen for everything downstream.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError
from .language import MAX_TOKENS, VOCAB, Caption, Instruction
from .nn import MLP, Block, LayerNorm, Linear, Module


def check_images(X) -> np.ndarray:
    """Validate a batch (or single) RGB image array; returns (B, H, W, 3) float64."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise DimensionError(f"expected (B, H, W, 3) images, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ContractError("images contain NaN or Inf")
    return X


def _tile(t: Tensor, n: int) -> Tensor:
    return ad.stack([t] * n, axis=0)


class VisionEncoder(Module):
    def __init__(self, d: int = 32, patch: int = 8, image: int = 64, depth: int = 2, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.d, self.patch, self.image = d, patch, image
        self.grid = image // patch
        self.n_patches = self.grid * self.grid
        self.embed = self.child("embed", Linear(rng, patch * patch * 3, d))
        self.cls = self.param("cls", rng.standard_normal(d) * 0.02)
        self.pos = self.param("pos", rng.standard_normal((self.n_patches + 1, d)) * 0.02)
        self.blocks = [self.child(f"block{i}", Block(rng, d, 4 * d)) for i in range(depth)]
        self.ln = self.child("ln", LayerNorm(d))

    def patchify(self, X: Tensor) -> Tensor:
        B, g, p = X.shape[0], self.grid, self.patch
        x = ad.reshape(X, (B, g, p, g, p, 3))
        x = ad.permute(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (B, g * g, p * p * 3))

    def __call__(self, X: Tensor) -> tuple[Tensor, Tensor]:
        """``X`` of shape (B, 64, 64, 3) -> (CLS (B, d), patches (B, N, d))."""
        if X.ndim != 4 or X.shape[1:] != (self.image, self.image, 3):
            raise DimensionError(f"vision encoder expects (B, {self.image}, {self.image}, 3), got {X.shape}")
        B = X.shape[0]
        tok = self.embed(self.patchify(ad.add_scalar(X, -0.5)))
        x = ad.concat([ad.reshape(_tile(self.cls, B), (B, 1, self.d)), tok], axis=1)
        x = ad.add(x, _tile(self.pos, B))
        for blk in self.blocks:
            x = blk(x)
        x = self.ln(x)
        return x[:, 0, :], x[:, 1:, :]


class TextEncoder(Module):
    def __init__(self, d: int = 32, depth: int = 2, seed: int = 0, vocab_size: int = len(VOCAB)):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.d = d
        self.emb = self.param("emb", rng.standard_normal((vocab_size, d)) * 0.5)
        self.pos = self.param("pos", rng.standard_normal((MAX_TOKENS, d)) * 0.02)
        self.blocks = [self.child(f"block{i}", Block(rng, d, 4 * d)) for i in range(depth)]
        self.ln = self.child("ln", LayerNorm(d))

    def sequence(self, ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Padded ids (B, M) -> token features (B, M, d) and the non-PAD mask."""
        ids = np.asarray(ids, dtype=np.intp)
        B = ids.shape[0]
        keep = ids != VOCAB.pad_id
        x = ad.add(ad.slice_(self.emb, ids), _tile(self.pos, B))
        for blk in self.blocks:
            x = blk(x, keep[:, None, :])
        return self.ln(x), keep

    def __call__(self, ids: np.ndarray) -> Tensor:
        """CLS embedding (B, d), read at the ``<start>`` position."""
        x, _ = self.sequence(ids)
        return x[:, 0, :]


def pad_ids(texts) -> np.ndarray:
    rows = []
    for t in texts:
        ids = t.token_ids if isinstance(t, Caption) else VOCAB.tokenize(t)
        rows.append(VOCAB.pad(ids))
    return np.stack(rows)


class InstructionEncoder(Module):
    """Text encoder that returns the whole padded token sequence."""

    def __init__(self, d: int = 32, depth: int = 2, seed: int = 0):
        super().__init__()
        self.text = self.child("text", TextEncoder(d, depth, seed))
        self.d = d

    @classmethod
    def from_text_encoder(cls, enc: TextEncoder) -> InstructionEncoder:
        out = cls(enc.d, len(enc.blocks))
        out.text.load_state_dict(enc.state_dict())
        return out.freeze()

    def __call__(self, ids: np.ndarray) -> tuple[Tensor, np.ndarray]:
        return self.text.sequence(ids)


class SemanticProjector(Module):
    """Mean-pool the token axis, then a ``d -> 2d -> d`` MLP."""

    def __init__(self, d: int = 32, seed: int = 0):
        super().__init__()
        self.mlp = self.child("mlp", MLP(np.random.default_rng(seed), d, 2 * d, d))

    def __call__(self, F: Tensor) -> Tensor:
        if F.shape[-2] < 1:
            raise DimensionError("project_semantic needs at least one token")
        pooled = ad.mean_pool_rows(F)
        if pooled.ndim == 1:
            return ad.reshape(self.mlp(ad.reshape(pooled, (1, -1))), (-1,))
        return self.mlp(pooled)


def project_semantic(f_sem: SemanticProjector, F: Tensor) -> Tensor:
    return f_sem(F)


# ---------------------------------------------------------------------------
# frozen encoding helpers (numpy in, numpy out)
# ---------------------------------------------------------------------------


def encode_image(vision: VisionEncoder, X, batch: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """CLS (B, d) and patch tokens (B, N, d); a single image gives (d,), (N, d)."""
    vision.require_frozen("encoding for the editing pipeline")
    single = np.asarray(X).ndim == 3
    X = check_images(X)
    cls_, pat = [], []
    with ad.no_grad():
        for i in range(0, len(X), batch):
            c, p = vision(Tensor(X[i:i + batch]))
            cls_.append(c.data)
            pat.append(p.data)
    cls_, pat = np.concatenate(cls_), np.concatenate(pat)
    return (cls_[0], pat[0]) if single else (cls_, pat)


def encode_caption(text_enc: TextEncoder, captions, batch: int = 256) -> np.ndarray:
    text_enc.require_frozen("encoding for the editing pipeline")
    single = isinstance(captions, (Caption, str))
    captions = [captions] if single else list(captions)
    out = []
    with ad.no_grad():
        for i in range(0, len(captions), batch):
            out.append(text_enc(pad_ids(captions[i:i + batch])).data)
    out = np.concatenate(out)
    return out[0] if single else out


def encode_instruction(ins_enc: InstructionEncoder, instructions) -> tuple[np.ndarray, np.ndarray]:
    """Token features (B, M, d) and the non-PAD mask (B, M)."""
    ins_enc.require_frozen("encoding for the editing pipeline")
    single = isinstance(instructions, (Instruction, str))
    items = [instructions] if single else list(instructions)
    texts = [i.text if isinstance(i, Instruction) else i for i in items]
    with ad.no_grad():
        F, keep = ins_enc(pad_ids(texts))
    return (F.data[0], keep[0]) if single else (F.data, keep)


# ---------------------------------------------------------------------------
# contrastive pretraining
# ---------------------------------------------------------------------------


def info_nce(img: Tensor, txt: Tensor, logit_scale: Tensor) -> Tensor:
    """Symmetric InfoNCE over L2-normalized embeddings; ``exp(logit_scale)`` is the inverse temperature."""
    B = img.shape[0]
    sims = ad.matmul(ad.l2_normalize_rows(img), ad.transpose(ad.l2_normalize_rows(txt)))
    logits = ad.mul(sims, ad.exp(logit_scale))
    eye = Tensor(np.eye(B))
    li = ad.sum_(ad.mul(ad.log_softmax_rows(logits), eye))
    lt = ad.sum_(ad.mul(ad.log_softmax_rows(ad.transpose(logits)), eye))
    return ad.scale(ad.add(li, lt), -0.5 / B)


class ContrastivePretrainer(BaseEstimator):
    """Train a vision and a text encoder jointly, then freeze both.

    Parameters
    ----------
    d : int
        Embedding width shared by both encoders.
    epochs, batch_size, lr : training schedule for Adam.
    init_logit_scale : float
        Initial log inverse temperature.
    seed : int
        Seeds initialization and batch order.
    """

    def __init__(self, d=32, depth=2, epochs=30, batch_size=64, lr=2e-3, init_logit_scale=0.0,
                 max_logit_scale=4.6, seed=0):
        self.d = d
        self.depth = depth
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.init_logit_scale = init_logit_scale
        self.max_logit_scale = max_logit_scale
        self.seed = seed

    def _init(self):
        self.vision_ = VisionEncoder(self.d, depth=self.depth, seed=self.seed)
        self.text_ = TextEncoder(self.d, depth=self.depth, seed=self.seed + 1)
        self.logit_scale_ = Tensor(self.init_logit_scale, requires_grad=True)

    def batch_loss(self, X: np.ndarray, captions) -> Tensor:
        img, _ = self.vision_(Tensor(X))
        txt = self.text_(pad_ids(captions))
        return info_nce(img, txt, self.logit_scale_)

    def fit(self, X, captions, callback=None):
        X = check_images(X)
        captions = list(captions)
        if len(X) == 0:
            raise ContractError("empty corpus")
        if len(captions) != len(X):
            raise DimensionError("one caption per image is required")
        self._init()
        params = self.vision_.parameters() + self.text_.parameters() + [self.logit_scale_]
        opt = ad.Adam(params, lr=self.lr)
        rng = np.random.default_rng(self.seed)
        self.history_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            losses = []
            for i in range(0, len(X), self.batch_size):
                idx = order[i:i + self.batch_size]
                opt.zero_grad()
                loss = self.batch_loss(X[idx], [captions[j] for j in idx])
                loss.backward()
                opt.step()
                self.logit_scale_.data = np.minimum(self.logit_scale_.data, self.max_logit_scale)
                losses.append(loss.item())
            self.history_.append(float(np.mean(losses)))
            if callback is not None:
                callback(epoch, self.history_[-1])
        self.vision_.freeze()
        self.text_.freeze()
        return self

    def transform(self, X) -> np.ndarray:
        """CLS embeddings of images."""
        check_is_fitted(self, "vision_")
        return encode_image(self.vision_, check_images(X))[0]


def retrieval_accuracy(vision: VisionEncoder, text_enc: TextEncoder, X, captions, batch: int = 64) -> float:
    """In-batch image-to-text top-1 accuracy; a retrieved caption with identical text counts as correct."""
    I, _ = encode_image(vision, check_images(X))
    T = encode_caption(text_enc, captions)
    texts = [c.text if isinstance(c, Caption) else c for c in captions]
    hits = 0
    for i in range(0, len(I), batch):
        a = I[i:i + batch] / np.linalg.norm(I[i:i + batch], axis=1, keepdims=True)
        b = T[i:i + batch] / np.linalg.norm(T[i:i + batch], axis=1, keepdims=True)
        best = np.argmax(a @ b.T, axis=1)
        hits += sum(texts[i + j] == texts[i + k] for j, k in enumerate(best))
    return hits / len(I)


def matched_gap(vision: VisionEncoder, text_enc: TextEncoder, X, captions) -> float:
    """Mean matched cosine minus mean mismatched cosine."""
    I, _ = encode_image(vision, check_images(X))
    T = encode_caption(text_enc, captions)
    I = I / np.linalg.norm(I, axis=1, keepdims=True)
    T = T / np.linalg.norm(T, axis=1, keepdims=True)
    S = I @ T.T
    n = len(S)
    return float(np.trace(S) / n - (S.sum() - np.trace(S)) / (n * n - n))
