"""Region-conditioned latent diffusion: schedule, inpainting denoiser and sampler.

The sampler runs, for each step t -> t_prev::

    eps      = eps_u + w * (eps_c - eps_u)               classifier-free guidance
    z0_hat   = (z_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)
    z_model  = sqrt(ab_prev) z0_hat + sqrt(1 - ab_prev - sigma^2) eps + sigma noise
    z_src    = sqrt(ab_prev) z0_src + sqrt(1 - ab_prev) eps'
    z_prev   = m * z_model + (1 - m) * z_src

All step functions accept numpy arrays or :class:`~regionedit.autodiff.Tensor`
operands; with tensors they record onto the gradient tape, which is how the
editor is trained through the sampler.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, FormatError, InvalidSigmaError
from .nn import Linear, Module

# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    """``T`` sampler steps over a linear-beta schedule.

    The betas are linear from ``beta_start`` to ``beta_end`` over
    ``train_steps`` fine steps; step ``t`` of this schedule sits at fine
    step ``round(t * train_steps / T)``. With ``train_steps == T`` the betas
    apply to the ``T`` steps directly. ``eta`` scales the per-step noise
    (0 is deterministic DDIM).
    """

    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    train_steps: int = 1000
    eta: float = 0.0
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.T < 1 or self.train_steps < self.T:
            raise ContractError("need 1 <= T <= train_steps")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ContractError("betas must satisfy 0 < start <= end < 1")
        if self.eta < 0:
            raise ContractError("eta must be non-negative")
        fine = np.cumprod(1.0 - np.linspace(self.beta_start, self.beta_end, self.train_steps))
        idx = np.round(np.arange(1, self.T + 1) * self.train_steps / self.T).astype(int) - 1
        ab = np.concatenate([[1.0], fine[idx]])
        ab.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def beta(self) -> np.ndarray:
        """Effective per-step betas, index 1..T (index 0 is 0)."""
        ab = self.alpha_bar
        return np.concatenate([[0.0], 1.0 - ab[1:] / ab[:-1]])

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    def sigma(self, t: int, t_prev: int | None = None) -> float:
        t_prev = t - 1 if t_prev is None else t_prev
        if self.eta == 0:
            return 0.0
        ab_t, ab_p = self.alpha_bar[t], self.alpha_bar[t_prev]
        return float(self.eta * math.sqrt((1 - ab_p) / (1 - ab_t) * (1 - ab_t / ab_p)))

    def check_t(self, t: int, lo: int = 1):
        if not (lo <= int(t) <= self.T) or int(t) != t:
            raise ContractError(f"timestep {t} outside [{lo}, {self.T}]")

    def timesteps(self, k: int | None = None) -> list[int]:
        """Descending step list ending at 1; ``k`` evenly spaced steps when given."""
        if k is None or k >= self.T:
            return list(range(self.T, 0, -1))
        ts = np.round(np.linspace(self.T, 1, k)).astype(int)
        return [int(t) for t in ts]


# ---------------------------------------------------------------------------
# elementwise step math (numpy or Tensor)
# ---------------------------------------------------------------------------


def _is_t(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _axpby(a: float, x, b: float, y):
    if _is_t(x, y):
        x, y = ad.as_tensor(x), ad.as_tensor(y)
        return ad.add(ad.scale(x, a), ad.scale(y, b))
    return a * np.asarray(x) + b * np.asarray(y)


def _noise_to(z0, t: int, eps, schedule: DiffusionSchedule):
    if np.shape(z0) != np.shape(eps):
        raise DimensionError(f"noise shape {np.shape(eps)} vs latent {np.shape(z0)}")
    ab = schedule.alpha_bar[t]
    return _axpby(math.sqrt(ab), z0, math.sqrt(1.0 - ab), eps)


def forward_sample(z0, t: int, eps, schedule: DiffusionSchedule):
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`` for t in [1, T]."""
    schedule.check_t(t)
    return _noise_to(z0, t, eps, schedule)


def estimate_z0(z_t, eps_pred, t: int, schedule: DiffusionSchedule):
    schedule.check_t(t)
    ab = schedule.alpha_bar[t]
    return _axpby(1.0 / math.sqrt(ab), z_t, -math.sqrt(1.0 - ab) / math.sqrt(ab), eps_pred)


def ddim_step(z_t, eps_pred, t: int, schedule: DiffusionSchedule, t_prev: int | None = None,
              noise=None):
    """One DDIM update from ``t`` to ``t_prev`` (default ``t - 1``)."""
    t_prev = t - 1 if t_prev is None else t_prev
    schedule.check_t(t)
    if not 0 <= t_prev < t:
        raise ContractError(f"t_prev {t_prev} must be in [0, {t})")
    sigma = schedule.sigma(t, t_prev)
    ab_p = schedule.alpha_bar[t_prev]
    rest = 1.0 - ab_p - sigma * sigma
    if rest < 0:
        raise InvalidSigmaError(f"1 - ab_prev - sigma^2 = {rest:.3g} < 0")
    z0 = estimate_z0(z_t, eps_pred, t, schedule)
    out = _axpby(math.sqrt(ab_p), z0, math.sqrt(rest), eps_pred)
    if sigma > 0:
        if noise is None:
            raise ContractError("stochastic step needs fresh noise")
        out = _axpby(1.0, out, sigma, noise)
    return out


def renoise_source(z0_src, t_prev: int, eps, schedule: DiffusionSchedule):
    """Source latent noised to ``t_prev`` (``t_prev = 0`` returns it unchanged)."""
    schedule.check_t(t_prev, lo=0)
    return _noise_to(z0_src, t_prev, eps, schedule)


def _channels_mask(m, z):
    if np.ndim(m) == np.ndim(z) - 1:
        if isinstance(m, Tensor):
            return ad.expand_channels(m, z.shape[-1])
        return np.repeat(np.asarray(m, dtype=np.float64)[..., None], z.shape[-1], axis=-1)
    if np.shape(m) != np.shape(z):
        raise DimensionError(f"mask shape {np.shape(m)} vs latent {np.shape(z)}")
    return m


def blend(z_model, z_src, m):
    """``m * z_model + (1 - m) * z_src``; ``m`` may omit the channel axis."""
    if np.shape(z_model) != np.shape(z_src):
        raise DimensionError("blend operands differ in shape")
    mc = _channels_mask(m, z_model)
    if _is_t(z_model, z_src, mc):
        zm, zs, mc = ad.as_tensor(z_model), ad.as_tensor(z_src), ad.as_tensor(mc)
        return ad.add(ad.mul(mc, zm), ad.mul(ad.add_scalar(ad.neg(mc), 1.0), zs))
    mc = np.asarray(mc)
    return mc * np.asarray(z_model) + (1.0 - mc) * np.asarray(z_src)


# ---------------------------------------------------------------------------
# codecs
# ---------------------------------------------------------------------------


class IdentityCodec:
    """Pixels are the latent: f = 1, c_z = 3."""

    factor = 1
    channels = 3
    name = "identity"

    def encode(self, X):
        return X

    def decode(self, z):
        return z

    def downsample_mask(self, m):
        return m


class PatchifyCodec:
    """Lossless 2x space-to-depth: f = 2, c_z = 12."""

    factor = 2
    channels = 12
    name = "patchify2"

    def encode(self, X):
        if isinstance(X, Tensor):
            B, H, W, C = X.shape
            x = ad.reshape(X, (B, H // 2, 2, W // 2, 2, C))
            return ad.reshape(ad.permute(x, (0, 1, 3, 2, 4, 5)), (B, H // 2, W // 2, 4 * C))
        X = np.asarray(X)
        lead, (H, W, C) = X.shape[:-3], X.shape[-3:]
        x = X.reshape(lead + (H // 2, 2, W // 2, 2, C))
        x = np.moveaxis(x, -4, -3)
        return x.reshape(lead + (H // 2, W // 2, 4 * C))

    def decode(self, z):
        if isinstance(z, Tensor):
            B, h, w, c = z.shape
            x = ad.permute(ad.reshape(z, (B, h, w, 2, 2, c // 4)), (0, 1, 3, 2, 4, 5))
            return ad.reshape(x, (B, 2 * h, 2 * w, c // 4))
        z = np.asarray(z)
        lead, (h, w, c) = z.shape[:-3], z.shape[-3:]
        x = z.reshape(lead + (h, w, 2, 2, c // 4))
        x = np.moveaxis(x, -3, -4)
        return x.reshape(lead + (2 * h, 2 * w, c // 4))

    def downsample_mask(self, m):
        m = np.asarray(m)
        lead, (H, W) = m.shape[:-2], m.shape[-2:]
        return m.reshape(lead + (H // 2, 2, W // 2, 2)).max(axis=(-3, -1))


CODECS = {"identity": IdentityCodec, "patchify2": PatchifyCodec}


def make_codec(name: str):
    try:
        return CODECS[name]()
    except KeyError:
        raise ContractError(f"unknown codec {name!r}; choose from {sorted(CODECS)}") from None


# ---------------------------------------------------------------------------
# denoisers
# ---------------------------------------------------------------------------


def timestep_embedding(t, T: int, dim: int = 16) -> np.ndarray:
    """Sinusoidal features of ``t / T``; (B,) -> (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1) / T
    freqs = np.exp(np.linspace(0.0, math.log(100.0), dim // 2))[None, :]
    return np.concatenate([np.sin(2 * math.pi * t * freqs), np.cos(2 * math.pi * t * freqs)], axis=1)


class TinyNet(Module):
    """Gated Gaussian-prior noise estimate plus a learned residual.

    The residual is three dilated 3x3 convolutions with FiLM conditioning
    on (timestep, caption), reading ``concat(z_t, m, (1 - m) * z0)``. The
    skip path is the optimal predictor for i.i.d. Gaussian latents with
    per-channel ``prior_mean`` and ``prior_std`` (see :class:`GaussianOracle`),
    scaled by a learned scalar gate. Gate and last layer start at zero, so
    an untrained net predicts zero noise. Without the skip a small net must
    learn ``eps ~ z_t`` at high noise from scratch, and its errors there
    are magnified by ``1 / sqrt(ab_t)`` in the sampler.
    """

    def __init__(self, c_z: int = 3, hidden: int = 32, cond_dim: int = 32, T: int = 50,
                 dilations=(1, 2, 4), seed: int = 0, schedule: DiffusionSchedule | None = None):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.schedule = schedule if schedule is not None else DiffusionSchedule(T)
        if self.schedule.T != T:
            raise ContractError(f"schedule has {self.schedule.T} steps, net expects {T}")
        self.c_z, self.hidden, self.cond_dim, self.T = c_z, hidden, cond_dim, T
        self.dilations = tuple(dilations)
        c_in = 2 * c_z + 1
        widths = [c_in, hidden, hidden, c_z]
        self.kernels, self.biases = [], []
        for i in range(3):
            fan_in = 9 * widths[i]
            w = np.zeros((3, 3, widths[i], widths[i + 1])) if i == 2 else \
                rng.standard_normal((3, 3, widths[i], widths[i + 1])) * math.sqrt(2.0 / fan_in)
            self.kernels.append(self.param(f"conv{i}.w", w))
            self.biases.append(self.param(f"conv{i}.b", np.zeros(widths[i + 1])))
        self.temb_dim = 16
        self.cond_in = self.child("cond_in", Linear(rng, self.temb_dim + cond_dim, 2 * hidden))
        self.film = [self.child(f"film{i}", Linear(rng, 2 * hidden, 2 * hidden, zero=True)) for i in range(2)]
        self.prior_gate = self.param("prior_gate", np.array(0.0))
        self.buffer("prior_mean", np.zeros(c_z))
        self.buffer("prior_std", np.ones(c_z))

    def set_prior(self, mean, std) -> TinyNet:
        """Per-channel latent statistics used by the skip path."""
        mean, std = np.broadcast_to(mean, (self.c_z,)), np.broadcast_to(std, (self.c_z,))
        if self.frozen:
            raise ContractError("cannot change the prior of a frozen denoiser")
        if not np.all(std > 0):
            raise ContractError("prior_std must be positive")
        self.buffer("prior_mean", mean)
        self.buffer("prior_std", std)
        return self

    def prior_predict(self, z_t: Tensor, t: np.ndarray) -> Tensor:
        ab = self.schedule.alpha_bar[t][:, None, None, None]
        s2 = self._buffers["prior_std"] ** 2
        gain = np.broadcast_to(np.sqrt(1.0 - ab) / (ab * s2 + 1.0 - ab), z_t.shape)
        shift = -gain * np.sqrt(ab) * self._buffers["prior_mean"]
        return ad.add(ad.mul(z_t, Tensor(gain)), Tensor(shift))

    def predict(self, z_input, t, cond) -> Tensor:
        z_input = ad.as_tensor(z_input)
        if z_input.ndim != 4 or z_input.shape[-1] != 2 * self.c_z + 1:
            raise DimensionError(f"denoiser input must be (B, h, w, {2 * self.c_z + 1}), got {z_input.shape}")
        B = z_input.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        cond = np.asarray(cond, dtype=np.float64).reshape(B, self.cond_dim)
        c = Tensor(np.concatenate([timestep_embedding(t, self.T, self.temb_dim), cond], axis=1))
        h_c = ad.gelu(self.cond_in(c))
        x = z_input
        for i in range(2):
            x = ad.conv2d(x, self.kernels[i], self.biases[i], self.dilations[i])
            ss = self.film[i](h_c)
            x = ad.gelu(ad.modulate(x, ss[:, : self.hidden], ss[:, self.hidden:]))
        residual = ad.conv2d(x, self.kernels[2], self.biases[2], self.dilations[2])
        skip = ad.mul(self.prior_gate, self.prior_predict(z_input[..., : self.c_z], t))
        return ad.add(skip, residual)


class GaussianOracle:
    """Exact noise prediction when every latent entry is N(mu, s^2) i.i.d.

    ``E[eps | z_t] = sqrt(1 - ab_t) / (ab_t s^2 + 1 - ab_t) * (z_t - sqrt(ab_t) mu)``.
    The conditioning is ignored.
    """

    frozen = True

    def __init__(self, schedule: DiffusionSchedule, mu: float = 0.0, s: float = 1.0, c_z: int = 3):
        self.schedule, self.mu, self.s, self.c_z = schedule, float(mu), float(s), c_z

    def gain(self, t: int) -> float:
        ab = self.schedule.alpha_bar[t]
        return math.sqrt(1.0 - ab) / (ab * self.s**2 + 1.0 - ab)

    def predict(self, z_input, t, cond) -> Tensor:
        t = int(np.asarray(t).reshape(-1)[0])
        z_input = ad.as_tensor(z_input)
        z_t = z_input[..., : self.c_z]
        shift = -math.sqrt(self.schedule.alpha_bar[t]) * self.mu
        return ad.scale(ad.add_scalar(z_t, shift), self.gain(t))

    def require_frozen(self, what=""):
        pass


# ---------------------------------------------------------------------------
# guidance and sampling
# ---------------------------------------------------------------------------


@dataclass
class GuidanceConfig:
    w_cfg: float = 3.0
    null_cond: np.ndarray | None = None

    def __post_init__(self):
        if self.w_cfg < 0:
            raise ContractError("w_cfg must be non-negative")


def combine_guidance(eps_uncond, eps_cond, w: float):
    """``eps_u + w (eps_c - eps_u)``; returns the operand itself at w = 0 or 1."""
    if w == 1.0:
        return eps_cond
    if w == 0.0:
        return eps_uncond
    if _is_t(eps_uncond, eps_cond):
        eu, ec = ad.as_tensor(eps_uncond), ad.as_tensor(eps_cond)
        return ad.add(eu, ad.scale(ad.sub(ec, eu), w))
    eu = np.asarray(eps_uncond)
    return eu + w * (np.asarray(eps_cond) - eu)


def cfg_predict(denoiser, z_input, t, c_e, guidance: GuidanceConfig):
    """Guided noise estimate; the two branches share one batched denoiser call."""
    z_input = ad.as_tensor(z_input)
    B = z_input.shape[0]
    c_e = np.asarray(c_e, dtype=np.float64).reshape(B, -1)
    w = guidance.w_cfg
    if w == 1.0:
        return denoiser.predict(z_input, t, c_e)
    if guidance.null_cond is None:
        raise ContractError("guidance needs the null conditioning embedding")
    c_0 = np.broadcast_to(np.asarray(guidance.null_cond, dtype=np.float64), c_e.shape)
    if w == 0.0:
        return denoiser.predict(z_input, t, c_0)
    both = denoiser.predict(ad.concat([z_input, z_input], axis=0), t, np.concatenate([c_e, c_0]))
    return combine_guidance(both[B:], both[:B], w)


def unet_input(z_t, m, z0_src):
    """``concat(z_t, m, (1 - m) * z0_src)`` along channels; ``m`` is (B, h, w)."""
    if _is_t(z_t, m, z0_src):
        z_t, m, z0_src = ad.as_tensor(z_t), ad.as_tensor(m), ad.as_tensor(z0_src)
        m1 = ad.reshape(m, m.shape + (1,))
        keep = ad.add_scalar(ad.neg(ad.expand_channels(m, z0_src.shape[-1])), 1.0)
        return ad.concat([z_t, m1, ad.mul(keep, z0_src)], axis=-1)
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([z_t, m[..., None], (1.0 - m)[..., None] * z0_src], axis=-1)


@dataclass
class SamplerRun:
    seed: int
    schedule: DiffusionSchedule
    timesteps: list
    z0: np.ndarray
    X_res: np.ndarray
    trajectory: list | None = None


def run_sampler(denoiser, z0_src, cond, m, schedule: DiffusionSchedule, guidance: GuidanceConfig,
                z_T, timesteps=None, eps_mode: str = "reuse", rng: np.random.Generator | None = None,
                trajectory: list | None = None):
    """Guided, region-blended DDIM loop over a batch.

    ``z0_src``/``z_T``: (B, h, w, c); ``m``: (B, h, w) with 1 = regenerate;
    ``cond``: (B, d). ``eps_mode`` is ``"reuse"`` (the source is re-noised
    with the step's guided noise estimate) or ``"fresh"`` (new Gaussian
    noise every step, drawn from ``rng``). Tensor inputs keep the whole loop
    on the gradient tape.
    """
    if eps_mode not in ("reuse", "fresh"):
        raise ContractError(f"unknown eps_mode {eps_mode!r}")
    ts = list(timesteps) if timesteps is not None else schedule.timesteps()
    z = z_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = cfg_predict(denoiser, unet_input(z, m, z0_src), t, cond, guidance)
        sigma = schedule.sigma(t, t_prev)
        noise = rng.standard_normal(np.shape(z)) if sigma > 0 else None
        z_model = ddim_step(z, eps, t, schedule, t_prev, noise)
        if eps_mode == "fresh":
            eps_src = rng.standard_normal(np.shape(z))
        else:
            eps_src = eps
        z = blend(z_model, renoise_source(z0_src, t_prev, eps_src, schedule), m)
        if trajectory is not None:
            trajectory.append((t_prev, np.array(z.data if isinstance(z, Tensor) else z)))
    return z


def edit_batch(X_src, cond, masks, denoiser, schedule: DiffusionSchedule, guidance: GuidanceConfig,
               seeds, codec=None, eps_mode: str = "reuse", record: bool = False) -> list[SamplerRun]:
    """Edit a batch of images; example ``i`` draws its noise from ``seeds[i]`` only.

    ``masks`` are (B, H, W) at pixel resolution with 1 = regenerate; the
    codec downsamples them to the latent grid.
    """
    denoiser.require_frozen("sampling")
    codec = codec or IdentityCodec()
    X_src = np.asarray(X_src, dtype=np.float64)
    z_src = np.asarray(codec.encode(X_src))
    m = np.asarray(codec.downsample_mask(np.asarray(masks, dtype=np.float64)), dtype=np.float64)
    if m.shape != z_src.shape[:-1]:
        raise DimensionError(f"mask {m.shape} vs latent {z_src.shape[:-1]}")
    seeds = [int(s) for s in seeds]
    if len(seeds) != len(X_src):
        raise DimensionError("one seed per image is required")
    rngs = [np.random.default_rng(s) for s in seeds]
    z_T = np.stack([r.standard_normal(z_src.shape[1:]) for r in rngs])
    # stochastic settings draw from the first example's stream after its initial noise
    rng = rngs[0]
    traj = [] if record else None
    with ad.no_grad():
        z = run_sampler(denoiser, Tensor(z_src), np.asarray(cond), Tensor(m), schedule, guidance,
                        Tensor(z_T), eps_mode=eps_mode, rng=rng, trajectory=traj)
    z0 = z.data
    X_res = np.clip(np.asarray(codec.decode(z0)), 0.0, 1.0)
    ts = schedule.timesteps()
    runs = []
    for i, s in enumerate(seeds):
        steps = [(t, z_t[i:i + 1]) for t, z_t in traj] if record else None
        runs.append(SamplerRun(s, schedule, ts, z0[i], X_res[i], steps))
    return runs


def edit_sample(X_src, cond, mask, denoiser, schedule: DiffusionSchedule, guidance: GuidanceConfig,
                seed: int = 0, codec=None, eps_mode: str = "reuse", record: bool = False) -> SamplerRun:
    """Edit one image: regenerate where ``mask`` is 1, keep the rest.

    ``mask`` is at pixel resolution (H, W) and is downsampled by the codec.
    """
    return edit_batch(np.asarray(X_src)[None], np.asarray(cond)[None], np.asarray(mask)[None], denoiser,
                      schedule, guidance, [seed], codec, eps_mode, record)[0]


# ---------------------------------------------------------------------------
# denoiser training
# ---------------------------------------------------------------------------


def random_patch_mask(rng: np.random.Generator, size: int = 64, patch: int = 8) -> np.ndarray:
    """Random axis-aligned rectangle of whole patches, at pixel resolution."""
    grid = size // patch
    h, w = rng.integers(1, max(grid // 2, 1) + 1, size=2)
    r, c = rng.integers(0, grid - h + 1), rng.integers(0, grid - w + 1)
    m = np.zeros((grid, grid))
    m[r:r + h, c:c + w] = 1.0
    return np.kron(m, np.ones((patch, patch)))


def cover_patches(pixel_mask: np.ndarray, patch: int = 8) -> np.ndarray:
    """Every patch touched by the pixel mask, back at pixel resolution."""
    g = pixel_mask.shape[0] // patch
    blocks = pixel_mask.reshape(g, patch, g, patch).any(axis=(1, 3))
    return np.kron(blocks.astype(np.float64), np.ones((patch, patch)))


class DenoiserTrainer(BaseEstimator):
    """Fit a :class:`TinyNet` with the masked-inpainting noise-prediction loss.

    Training masks mix patch-aligned rectangles and patch covers of single
    objects (``object_masks`` passed to :meth:`fit`); captions are dropped to
    the null embedding with probability ``p_uncond`` so guidance has an
    unconditional branch.
    """

    def __init__(self, hidden=32, epochs=3, batch_size=16, lr=2e-3, p_uncond=0.1, p_object_mask=0.5,
                 T=50, beta_start=1e-4, beta_end=0.02, train_steps=1000, codec="identity", seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.p_uncond = p_uncond
        self.p_object_mask = p_object_mask
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.train_steps = train_steps
        self.codec = codec
        self.seed = seed

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.T, self.beta_start, self.beta_end, self.train_steps)

    def _sample_mask(self, rng, obj_masks, size) -> np.ndarray:
        if len(obj_masks) and rng.random() < self.p_object_mask:
            return cover_patches(obj_masks[rng.integers(len(obj_masks))])
        return random_patch_mask(rng, size)

    def batch_loss(self, model, X, cond, null_cond, obj_masks, rng) -> Tensor:
        codec = make_codec(self.codec)
        sched = self.schedule
        B = len(X)
        z0 = np.asarray(codec.encode(X))
        m = np.stack([codec.downsample_mask(self._sample_mask(rng, om, X.shape[1])) for om in obj_masks])
        t = rng.integers(1, sched.T + 1, size=B)
        eps = rng.standard_normal(z0.shape)
        ab = sched.alpha_bar[t][:, None, None, None]
        z_t = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
        drop = rng.random(B) < self.p_uncond
        c = np.where(drop[:, None], null_cond[None, :], cond)
        inp = unet_input(z_t, m, z0)
        pred = model.predict(Tensor(inp), t, c)
        diff = ad.sub(pred, Tensor(eps))
        # squared L2 norm per example, averaged over the batch
        return ad.scale(ad.sum_(ad.mul(diff, diff)), 1.0 / B)

    def fit(self, X, cond, null_cond, object_masks=None, callback=None):
        X = np.asarray(X, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64)
        if len(X) == 0 or len(cond) != len(X):
            raise ContractError("need one conditioning vector per image")
        codec = make_codec(self.codec)
        object_masks = object_masks if object_masks is not None else [[] for _ in X]
        rng = np.random.default_rng(self.seed)
        self.model_ = TinyNet(codec.channels, self.hidden, cond.shape[1], self.T, seed=self.seed,
                              schedule=self.schedule)
        z0 = np.asarray(codec.encode(X))
        self.model_.set_prior(z0.mean(axis=(0, 1, 2)), z0.std(axis=(0, 1, 2)))
        self.null_cond_ = np.asarray(null_cond, dtype=np.float64)
        opt = ad.Adam(self.model_.parameters(), lr=self.lr)
        self.history_ = []
        self.initial_loss_ = None
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            losses = []
            for i in range(0, len(X), self.batch_size):
                idx = order[i:i + self.batch_size]
                opt.zero_grad()
                loss = self.batch_loss(self.model_, X[idx], cond[idx], self.null_cond_,
                                       [object_masks[j] for j in idx], rng)
                loss.backward()
                opt.step()
                if self.initial_loss_ is None:
                    self.initial_loss_ = loss.item()
                losses.append(loss.item())
            self.history_.append(float(np.mean(losses)))
            if callback is not None:
                callback(epoch, self.history_[-1])
        self.model_.freeze()
        return self

    def predict(self, z_input, t, cond):
        check_is_fitted(self, "model_")
        with ad.no_grad():
            return self.model_.predict(z_input, t, cond).data


# ---------------------------------------------------------------------------
# trajectory dump
# ---------------------------------------------------------------------------

_TRAJ_MAGIC = b"RGTR"


def write_trajectory(path, run: SamplerRun) -> None:
    """Header (magic, version, steps, rank, extents) then per step: u32 t, f64 latent."""
    if not run.trajectory:
        raise ContractError("run has no recorded trajectory")
    shape = run.trajectory[0][1].shape
    parts = [_TRAJ_MAGIC, struct.pack("<III", 1, len(run.trajectory), len(shape)),
             struct.pack(f"<{len(shape)}I", *shape)]
    for t, z in run.trajectory:
        parts.append(struct.pack("<I", t) + np.ascontiguousarray(z, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_trajectory(path) -> list[tuple[int, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != _TRAJ_MAGIC:
        raise FormatError("not a trajectory file")
    _, steps, rank = struct.unpack_from("<III", blob, 4)
    if len(blob) < 16 + 4 * rank:
        raise FormatError("trajectory header truncated")
    shape = struct.unpack_from(f"<{rank}I", blob, 16)
    pos, n = 16 + 4 * rank, int(np.prod(shape))
    if len(blob) != pos + steps * (4 + 8 * n):
        raise FormatError("trajectory length mismatch")
    out = []
    for _ in range(steps):
        (t,) = struct.unpack_from("<I", blob, pos)
        z = np.frombuffer(blob, dtype="<f8", count=n, offset=pos + 4).reshape(shape).copy()
        out.append((t, z))
        pos += 4 + 8 * n
    return out
