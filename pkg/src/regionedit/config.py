"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key has a default
below; an unknown key is an error so typos never pass silently.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class Config:
    # layout
    data_dir: str = "data"  # corpus written by data-gen
    out_dir: str = "runs/default"  # checkpoints, logs and edit outputs
    force: bool = False  # let data-gen overwrite a non-empty data_dir
    # corpus
    seed: int = 0  # master seed for generation and training
    train_count: int = 5000  # training images (pretraining uses all)
    eval_count: int = 200  # held-out images, each with an oracle edit
    # encoders
    d: int = 32
    depth: int = 2
    pretrain_epochs: int = 10
    pretrain_batch: int = 64
    pretrain_lr: float = 2e-3
    aux_seed: int = 101  # seed of the second vision encoder used for the DINO-style score
    # diffusion
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    train_steps: int = 1000  # fine grid the T sampler steps are taken from
    eta: float = 0.0  # 0 gives deterministic DDIM
    eps_mode: str = "reuse"  # source re-noising: "reuse" the guided estimate or "fresh" noise
    denoiser_count: int = 2000
    denoiser_hidden: int = 16
    denoiser_epochs: int = 3
    denoiser_batch: int = 16
    denoiser_lr: float = 1e-2
    p_uncond: float = 0.1
    w_cfg: float = 3.0
    # editor
    editor_count: int = 2000
    editor_epochs: int = 3
    editor_batch: int = 4
    editor_lr: float = 3e-3
    K: int = 8  # sampler steps on the gradient tape during editor training
    threshold: float = 0.5
    lambda_g: float = 1.0
    lambda_d: float = 1.0
    lambda_s: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    # edit / eval / ablate
    edit_seed: int = 0  # initial-noise seed of the inference sampler
    trajectory: bool = False  # dump per-step latents next to each edit
    eval_limit: int = 0  # evaluate only the first n eval examples (0 = all)
    ablation_seeds: str = "0,1,2"
    ablation_count: int = 0  # editor examples per ablation run (0 = editor_count)
    ablation_eval: int = 0  # eval examples per ablation run (0 = eval_limit)
    ablation_configs: str = ""  # comma-separated subset of ablation names (empty = all)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def with_overrides(self, items: dict) -> Config:
        types = {f.name: f.type for f in fields(self)}
        values = dict(vars(self))
        for key, raw in items.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, types[key])
        return Config(**values)

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in vars(self).items())

    def digest(self, keys=None) -> str:
        """Stable hash of the given keys (all keys by default)."""
        keys = sorted(keys) if keys is not None else sorted(self.keys())
        blob = "\n".join(f"{k}={_render(getattr(self, k))}" for k in keys)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def seeds(self) -> list[int]:
        try:
            return [int(s) for s in self.ablation_seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"ablation_seeds must be comma-separated integers, got {self.ablation_seeds!r}") from None


def _render(v) -> str:
    return ("true" if v else "false") if isinstance(v, bool) else str(v)


def _coerce(key: str, raw, typ: str):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {typ}") from None
    return raw


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {n}: empty key")
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> Config:
    cfg = Config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        cfg = cfg.with_overrides(parse_config(p.read_text()))
    return cfg.with_overrides(overrides or {})
