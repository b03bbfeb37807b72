"""Layers built on the autodiff core."""

from __future__ import annotations

import copy

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.DimensionError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def clone(self, dtype=None) -> "Module":
        """Deep copy, optionally casting every parameter (used by float64 gradient oracles)."""
        other = copy.deepcopy(self)
        for p in other.parameters():
            p.grad = None
            if dtype is not None:
                p.data = p.data.astype(dtype)
        return other


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.DEFAULT_DTYPE), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 init_scale: float = 1.0):
        self.weight = param(rng.normal(0.0, init_scale / np.sqrt(n_in), size=(n_in, n_out)))
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.table = param(rng.normal(0.0, std, size=(n, d)))

    def __call__(self, ids) -> Tensor:
        return T.embedding_lookup(self.table, ids)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ValueError(f"d_model {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng, init_scale=0.5)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        B, L, d = x.shape
        h = self.n_heads
        qkv = self.qkv(x).reshape(B, L, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.masked_attention(q, k, v, mask)
        return self.out(att.transpose(0, 2, 1, 3).reshape(B, L, d))


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng, init_scale=0.5)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm residual block."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, rng)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


class Transformer(Module):
    def __init__(self, d: int, depth: int, n_heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 4):
        self.blocks = [TransformerBlock(d, n_heads, rng, mlp_ratio) for _ in range(depth)]
        self.ln_f = LayerNorm(d)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        for blk in self.blocks:
            x = blk(x, mask)
        return self.ln_f(x)


class FiLM(Module):
    """Feature-wise affine modulation: ``x * gamma(c) + beta(c)``.

    ``gamma`` is parameterised around 1 so an untrained generator is close to
    the identity map.
    """

    def __init__(self, cond_dim: int, channels: int, rng: np.random.Generator, init_scale: float = 0.1):
        self.to_gamma = Linear(cond_dim, channels, rng, init_scale=init_scale)
        self.to_beta = Linear(cond_dim, channels, rng, init_scale=init_scale)
        self.to_gamma.bias.data[:] = 1.0

    def coefficients(self, cond: Tensor) -> tuple[Tensor, Tensor]:
        return self.to_gamma(cond), self.to_beta(cond)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        gamma, beta = self.coefficients(cond)
        # broadcast (B, C) over any middle axes of x
        shape = (cond.shape[0],) + (1,) * (x.ndim - 2) + (x.shape[-1],)
        return x * gamma.reshape(shape) + beta.reshape(shape)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H/p * W/p, p*p*C), row-major patch order."""
    B, H, W, C = images.shape
    if H % patch or W % patch:
        raise T.DimensionError(f"patch size {patch} does not divide image {H}x{W}")
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


class PatchEncoder(Module):
    """Linear patch embedding plus learned positions, followed by a transformer."""

    def __init__(self, image_size: int, patch: int, d: int, depth: int, n_heads: int,
                 rng: np.random.Generator, channels: int = 3, mlp_ratio: int = 4):
        self.patch = patch
        n = (image_size // patch) ** 2
        self.embed = Linear(patch * patch * channels, d, rng)
        self.pos = param(rng.normal(0.0, 0.02, size=(n, d)))
        self.body = Transformer(d, depth, n_heads, rng, mlp_ratio) if depth > 0 else None

    def tokens(self, images: np.ndarray) -> Tensor:
        x = self.embed(patchify(np.asarray(images), self.patch) - 0.5) + self.pos
        return self.body(x) if self.body is not None else x

    __call__ = tokens


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def padding_mask(valid: np.ndarray) -> np.ndarray:
    """(B, L) validity -> (B, 1, 1, L) key mask."""
    return np.asarray(valid, dtype=bool)[:, None, None, :]


def masked_mean(x: Tensor, valid: np.ndarray) -> Tensor:
    """Mean over axis 1 counting only positions where ``valid`` is True."""
    w = np.asarray(valid, dtype=x.dtype)
    w = w / np.maximum(w.sum(axis=1, keepdims=True), 1.0)
    return T.sum(x * w[:, :, None], axis=1)
