"""Small module system on top of the tensor core.

Parameters are held by modules and mutated only by the optimizer between
graphs. Names are dotted paths (``module.layer.tensor``) and are the stable
contract used by checkpoints and freeze schedules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class RunCtx:
    """Per-forward context: training mode and the rng for stochastic paths."""

    train: bool = False
    rng: np.random.Generator | None = None


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def register(self, name: str, value) -> Tensor | "Module":
        if isinstance(value, Module):
            self._children[name] = value
        else:
            if value.name is None:
                value.name = name
            self._params[name] = value
        return value

    def params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, child in self._children.items():
            out.update(child.params(prefix + name + "."))
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.params().values():
            p.requires_grad = bool(flag)

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params().items() if p.requires_grad}

    def num_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            p = params[name]
            if tuple(arr.shape) != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = np.asarray(arr, dtype=p.data.dtype).copy()


def init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(T.default_dtype())


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table, [length, dim]."""
    pos = np.arange(length)[:, None].astype(np.float64)
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(T.default_dtype())


class Linear(Module):
    """Affine map ``x @ w + b``; ``adapter``, when attached, adds a delta path.

    Weights default to fan-in scaling (std 1/sqrt(d_in)); pass ``std`` to
    override (frozen toy backbones use a small value to stay near-identity).
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, std: float | None = None):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        if std is None:
            std = 1.0 / float(np.sqrt(d_in))
        self.w = self.register("w", Tensor(init_normal(rng, (d_in, d_out), std), name="w"))
        self.b = self.register("b", Tensor(np.zeros(d_out, dtype=T.default_dtype()))) if bias else None
        self.adapter = None  # set via decoder.attach_lora

    def __call__(self, x: Tensor, ctx: RunCtx | None = None) -> Tensor:
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add(out, self.b)
        if self.adapter is not None:
            out = T.add(out, self.adapter(x, ctx))
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.g = self.register("g", Tensor(np.ones(dim, dtype=T.default_dtype())))
        self.b = self.register("b", Tensor(np.zeros(dim, dtype=T.default_dtype())))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b, eps=self.eps)


class Attention(Module):
    """Multi-head scaled-dot attention; self- or cross- depending on kv input."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 kv_dim: int | None = None, std: float | None = None):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"attention width {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        kv_dim = kv_dim or dim
        self.wq = self.register("wq", Linear(dim, dim, rng, std=std))
        # no key bias: it shifts every softmax row uniformly (exact null direction)
        self.wk = self.register("wk", Linear(kv_dim, dim, rng, bias=False, std=std))
        self.wv = self.register("wv", Linear(kv_dim, dim, rng, std=std))
        self.wo = self.register("wo", Linear(dim, dim, rng, std=std))

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask=None,
                 ctx: RunCtx | None = None) -> Tensor:
        q = self.wq(q_in, ctx)
        k = self.wk(kv_in, ctx)
        v = self.wv(kv_in, ctx)
        if mask is not None and not isinstance(mask, Tensor):
            mask = Tensor(mask, dtype=q.data.dtype)
        outs = []
        inv = 1.0 / float(np.sqrt(self.head_dim))
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), inv)
            if mask is not None:
                scores = T.add(scores, mask)
            outs.append(T.matmul(T.softmax_rows(scores), vh))
        return self.wo(T.concat_cols(outs), ctx)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator,
                 std: float | None = None):
        super().__init__()
        self.fc1 = self.register("fc1", Linear(dim, hidden, rng, std=std))
        self.fc2 = self.register("fc2", Linear(hidden, dim, rng, std=std))

    def __call__(self, x: Tensor, ctx: RunCtx | None = None) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x, ctx)), ctx)


class TransformerBlock(Module):
    """Pre-norm block: self-attention, optional cross-attention, feed-forward.

    ``std`` overrides the weight init of every linear inside; the frozen toy
    encoders use a small value so their random blocks stay close to identity
    and preserve the linear structure of their inputs.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 cross: bool = False, kv_dim: int | None = None, mlp_ratio: int = 4,
                 std: float | None = None):
        super().__init__()
        self.ln1 = self.register("ln1", LayerNorm(dim))
        self.attn = self.register("attn", Attention(dim, heads, rng, std=std))
        if cross:
            self.ln_x = self.register("ln_x", LayerNorm(dim))
            self.xattn = self.register("xattn", Attention(dim, heads, rng,
                                                          kv_dim=kv_dim, std=std))
        else:
            self.ln_x = self.xattn = None
        self.ln2 = self.register("ln2", LayerNorm(dim))
        self.mlp = self.register("mlp", MLP(dim, mlp_ratio * dim, rng, std=std))

    def __call__(self, x: Tensor, kv: Tensor | None = None, mask=None,
                 ctx: RunCtx | None = None) -> Tensor:
        h = self.ln1(x)
        x = T.add(x, self.attn(h, h, mask=mask, ctx=ctx))
        if self.xattn is not None:
            if kv is None:
                raise ShapeError("cross-attention block called without encoder tokens")
            x = T.add(x, self.xattn(self.ln_x(x), kv, ctx=ctx))
        x = T.add(x, self.mlp(self.ln2(x), ctx))
        return x
