"""Parameter containers and the few layers the models share."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, FormatError


class Module:
    """Ordered collection of named parameters and sub-modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.frozen = False

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        """Register saved, non-trainable state; read it back with ``self._buffers[name]``."""
        self._buffers[name] = np.array(value, dtype=np.float64)
        return self._buffers[name]

    def child(self, name: str, module: Module) -> Module:
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = ""):
        for k, v in self._params.items():
            yield prefix + k, v
        for k, m in self._children.items():
            yield from m.named_parameters(f"{prefix}{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for k, v in self._buffers.items():
            yield prefix + k, v
        for k, m in self._children.items():
            yield from m.named_buffers(f"{prefix}{k}.")

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.named_parameters(prefix)}
        out.update((k, v.copy()) for k, v in self.named_buffers(prefix))
        return out

    def load_state_dict(self, state, prefix: str = ""):
        self._load_buffers(state, prefix)
        for k, p in self.named_parameters(prefix):
            if k not in state:
                raise FormatError(f"checkpoint lacks parameter {k!r}")
            if state[k].shape != p.shape:
                raise FormatError(f"parameter {k!r}: shape {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
            if self.frozen:
                p.data.flags.writeable = False
        return self

    def _load_buffers(self, state, prefix: str):
        for k, v in list(self._buffers.items()):
            key = prefix + k
            if key not in state:
                raise FormatError(f"checkpoint lacks buffer {key!r}")
            if state[key].shape != v.shape:
                raise FormatError(f"buffer {key!r}: shape {state[key].shape} vs {v.shape}")
            self._buffers[k] = np.array(state[key], dtype=np.float64)
            if self.frozen:
                self._buffers[k].flags.writeable = False
        for k, m in self._children.items():
            m._load_buffers(state, f"{prefix}{k}.")

    def freeze(self):
        """Make every parameter a read-only constant."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
            p.data.flags.writeable = False
        for b in self._buffers.values():
            b.flags.writeable = False
        self.frozen = True
        for m in self._children.values():
            m.freeze()
        return self

    def require_frozen(self, what: str = "this stage"):
        if not self.frozen:
            raise ContractError(f"{type(self).__name__} must be frozen before {what}")

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.standard_normal(shape or (fan_in, fan_out)) * std


class Linear(Module):
    def __init__(self, rng, fan_in: int, fan_out: int, bias: bool = True, zero: bool = False):
        super().__init__()
        w = np.zeros((fan_in, fan_out)) if zero else glorot(rng, fan_in, fan_out)
        self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.g = self.param("g", np.ones(d))
        self.b = self.param("b", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine_rows(ad.layernorm_rows(x, self.eps), self.g, self.b)


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Single-head scaled dot-product attention on ``(..., n, d)`` operands."""
    d = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d))
    return ad.matmul(ad.softmax_rows(scores, key_mask), v)


class Block(Module):
    """Pre-norm transformer block: single-head attention then a GELU MLP."""

    def __init__(self, rng, d: int, hidden: int):
        super().__init__()
        self.ln1 = self.child("ln1", LayerNorm(d))
        self.q = self.child("q", Linear(rng, d, d, bias=False))
        self.k = self.child("k", Linear(rng, d, d, bias=False))
        self.v = self.child("v", Linear(rng, d, d, bias=False))
        self.o = self.child("o", Linear(rng, d, d))
        self.ln2 = self.child("ln2", LayerNorm(d))
        self.fc1 = self.child("fc1", Linear(rng, d, hidden))
        self.fc2 = self.child("fc2", Linear(rng, hidden, d))

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, self.o(attention(self.q(h), self.k(h), self.v(h), key_mask)))
        return ad.add(x, self.fc2(ad.gelu(self.fc1(self.ln2(x)))))


class MLP(Module):
    """``d_in -> hidden -> d_out`` with a GELU in between."""

    def __init__(self, rng, d_in: int, hidden: int, d_out: int, zero_last: bool = False):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(rng, d_in, hidden))
        self.fc2 = self.child("fc2", Linear(rng, hidden, d_out, zero=zero_last))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))
