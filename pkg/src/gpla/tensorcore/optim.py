"""Adam / AdamW with global-norm clipping and micro-batch accumulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    kind: str = "adamw"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def clip_grad_norm(params: list[Tensor], max_norm: float | None) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = float(np.sqrt(total))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class Adam:
    """Adam (L2 penalty folded into the gradient) or AdamW (decoupled decay)."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, kind: str = "adam", names: list[str] | None = None):
        self.params = list(params)
        self.names = names or [f"param{i}" for i in range(len(self.params))]
        self.state = OptimizerState(kind=kind, lr=lr, betas=tuple(betas), eps=eps,
                                    weight_decay=weight_decay,
                                    m=[np.zeros_like(p.data) for p in self.params],
                                    v=[np.zeros_like(p.data) for p in self.params])

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _check_finite(self):
        for name, p in zip(self.names, self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
                raise NonFiniteGradientError(
                    f"non-finite gradient in {name} (shape {p.shape}, {bad} bad entries)")

    def step(self, clip_norm: float | None = 1.0) -> float:
        """Clip, update, zero grads. Returns the pre-clip global grad norm."""
        self._check_finite()
        norm = clip_grad_norm(self.params, clip_norm)
        st = self.state
        st.step_count += 1
        b1, b2 = st.betas
        bc1 = 1.0 - b1 ** st.step_count
        bc2 = 1.0 - b2 ** st.step_count
        decoupled = st.kind == "adamw"
        for p, m, v in zip(self.params, st.m, st.v):
            if p.grad is None:
                continue
            g = p.grad
            if st.weight_decay and not decoupled:
                g = g + st.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + st.eps)
            if st.weight_decay and decoupled:
                update = update + st.weight_decay * p.data
            p.data -= (st.lr * update).astype(p.dtype, copy=False)
        self.zero_grad()
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"m/{name}"] = m
            out[f"v/{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int):
        for i, name in enumerate(self.names):
            self.state.m[i][...] = arrays[f"m/{name}"]
            self.state.v[i][...] = arrays[f"v/{name}"]
        self.state.step_count = step_count


def AdamW(params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
          weight_decay: float = 0.01, names=None) -> Adam:
    return Adam(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, kind="adamw",
                names=names)


def for_module(module, kind: str = "adam", **kw) -> Adam:
    named = module.named_parameters()
    return Adam([p for _, p in named], names=[n for n, _ in named], kind=kind, **kw)


class GradAccumulator:
    """Steps the optimizer once every ``n_micro`` backward passes.

    Each micro-batch loss is seeded with 1/n_micro, so the accumulated
    gradient is that of the mean over the effective batch.
    """

    def __init__(self, optimizer: Adam, n_micro: int = 1, clip_norm: float | None = 1.0):
        if n_micro < 1:
            raise ValueError("n_micro must be >= 1")
        self.optimizer = optimizer
        self.n_micro = n_micro
        self.clip_norm = clip_norm
        self._pending = 0

    def backward(self, loss: Tensor) -> bool:
        """Backprop one micro-batch; returns True when this call triggered a step."""
        loss.backward(1.0 / self.n_micro)
        self._pending += 1
        if self._pending == self.n_micro:
            self._pending = 0
            self.optimizer.step(self.clip_norm)
            return True
        return False
