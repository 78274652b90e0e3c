"""Dense-tensor core with reverse-mode differentiation.

Design notes
------------
* Data lives in row-major numpy arrays. Library default is 64-bit floats
  (the mode gradient checks require); training code switches to 32-bit via
  ``using_dtype`` for speed.
* Ops build an implicit graph of backward closures (``_vjp``). ``backward``
  computes per-call gradients into a scratch table and accumulates them onto
  leaf tensors, so calling it twice without ``zero_grad`` doubles leaf grads
  (documented accumulate semantics) without corrupting interior nodes.
* "rows" ops treat the last axis as row content, so every contract stated
  for 2-D inputs holds unchanged, and stacked batches ([B, m, n]) work the
  way ``np.matmul`` stacking does.
* Token-level losses reduce by SUM here; any 1/N averaging is the caller's
  responsibility (kept in the objectives layer).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DeterminismError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the dtype newly created tensors default to."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (inference paths); outputs carry no parents."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Value node. Treat ``data`` as immutable once the tensor is in a graph;
    the optimizer mutates parameter buffers only between graphs."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}{tag})"

    # operator sugar; the module-level functions carry the real contracts
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Internal op-output constructor; wires the graph only when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.data.dtype)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(go):
        return _unbroadcast(go, a.shape), _unbroadcast(go, b.shape)

    return _node(data, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.data.dtype)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(go):
        return (_unbroadcast(go * b.data, a.shape), _unbroadcast(go * a.data, b.shape))

    return _node(data, (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda go: (go * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked leading axes follow ``np.matmul`` rules."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(go):
        ga = np.matmul(go, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), go)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(data, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes (plain transpose for 2-D)."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs >=2-D input, got {x.shape}")
    return _node(np.swapaxes(x.data, -1, -2).copy(), (x,),
                 lambda go: (np.swapaxes(go, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)
    return _node(data, (x,), lambda go: (go.reshape(x.shape),))


def _concat(xs, axis: int) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    if not xs:
        raise ContractError("concat of an empty sequence")
    data = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def vjp(go):
        return tuple(
            np.take(go, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(xs))
        )

    return _node(data, xs, vjp)


def concat_rows(xs) -> Tensor:
    """Stack along the row axis (axis -2)."""
    return _concat(xs, axis=-2)


def concat_cols(xs) -> Tensor:
    return _concat(xs, axis=-1)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[..., start:stop].copy()

    def vjp(go):
        g = np.zeros_like(x.data)
        g[..., start:stop] = go
        return (g,)

    return _node(data, (x,), vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[..., start:stop, :].copy()

    def vjp(go):
        g = np.zeros_like(x.data)
        g[..., start:stop, :] = go
        return (g,)

    return _node(data, (x,), vjp)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor by integer index (scatter-add on backward)."""
    if x.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data[idx].copy()

    def vjp(go):
        g = np.zeros_like(x.data)
        np.add.at(g, idx, go)
        return (g,)

    return _node(data, (x,), vjp)


def mean_rows(x: Tensor) -> Tensor:
    """Average over the row axis (-2): [..., L, d] -> [..., d]."""
    if x.ndim < 2:
        raise ShapeError(f"mean_rows needs >=2-D input, got {x.shape}")
    n = x.shape[-2]
    if n == 0:
        raise ContractError("mean_rows of zero rows")
    data = x.data.mean(axis=-2)

    def vjp(go):
        return (np.repeat(np.expand_dims(go, -2), n, axis=-2) / n,)

    return _node(data, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())
    return _node(data, (x,), lambda go: (np.broadcast_to(go, x.shape).copy(),))


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)
    return _node(data, (x,), lambda go: (go / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-x.data))
    return _node(data, (x,), lambda go: (go * data * (1.0 - data),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(x.data, lo, hi)
    inside = ((x.data >= lo) & (x.data <= hi)).astype(x.data.dtype)
    return _node(data, (x,), lambda go: (go * inside,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    c = float(np.sqrt(2.0 / np.pi))
    u = c * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def vjp(go):
        du = c * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (go * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du),)

    return _node(data, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale/shift by ``gain``/``bias``."""
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(
            f"layer_norm: feature width {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def vjp(go):
        n = x.shape[-1]
        gy = go * gain.data
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(go.ndim - 1))
        ggain = (go * xhat).sum(axis=axes)
        gbias = go.sum(axis=axes)
        return gx, ggain, gbias

    return _node(data, (x, gain, bias), vjp)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit-normalize along the last axis; zero rows divide by eps and stay zero."""
    n = np.linalg.norm(x.data, axis=-1, keepdims=True)
    denom = n + eps
    data = x.data / denom

    def vjp(go):
        t = (go * x.data).sum(axis=-1, keepdims=True)
        # second term vanishes on exactly-zero rows (t == 0 there)
        safe_n = np.where(n > 0, n, 1.0)
        return (go / denom - x.data * (t / (safe_n * denom ** 2)),)

    return _node(data, (x,), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` gathered by integer ids; grads scatter-add."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.shape[0]}): {int(ids.min())}..{int(ids.max())}")
    data = table.data[ids].copy()

    def vjp(go):
        g = np.zeros_like(table.data)
        np.add.at(g, ids.reshape(-1), go.reshape(-1, table.shape[-1]))
        return (g,)

    return _node(data, (table,), vjp)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return _node(x.data, (x,), lambda go: (go,))
    if rng is None:
        raise ContractError("dropout in train mode needs an explicit rng for determinism")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _node(x.data * mask, (x,), lambda go: (go * mask,))


# ---------------------------------------------------------------------------
# softmax / cross-entropy
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Row-stable softmax along the last axis. Rejects non-finite input."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows: input contains NaN/Inf")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(go):
        dot = (go * p).sum(axis=-1, keepdims=True)
        return (p * (go - dot),)

    return _node(p, (x,), vjp)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Sum over rows of -log softmax(logits)[target]. SUM reduction by contract."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_logits expects [n, V] logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(
            f"target out of range [0, {v}): {int(targets.min())}..{int(targets.max())}")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(n), targets]
    data = np.asarray((lse - picked).sum())

    def vjp(go):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        return (p * go,)

    return _node(data, (logits,), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

@dataclass
class ComputeGraph:
    """Topologically ordered view of the closure graph reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        g = cls(nodes=order)
        g.leaves = [t for t in order if not t._parents and t.requires_grad]
        return g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable leaf with ``requires_grad``.

    Repeated calls without ``zero_grad`` accumulate leaf grads.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad (no trainable leaves reached)")
    graph = ComputeGraph.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        go = grads.pop(id(node), None)
        if go is None:
            continue
        if not node._parents:
            node.grad = go if node.grad is None else node.grad + go
            continue
        for parent, pg in zip(node._parents, node._vjp(go)):
            if not parent.requires_grad or pg is None:
                continue
            cur = grads.get(id(parent))
            grads[id(parent)] = pg if cur is None else cur + pg


def zero_grads(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float
    h: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def table(self) -> str:
        width = max([len(e.name) for e in self.entries] + [9])
        lines = [f"{'parameter':<{width}}  {'max_rel_err':>12}  {'n':>6}  status"]
        for e in self.entries:
            status = "ok" if e.passed else "FAIL"
            lines.append(f"{e.name:<{width}}  {e.max_rel_err:>12.3e}  {e.checked:>6}  {status}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'} (tol={self.tol:g}, h={self.h:g})")
        return "\n".join(lines)


def grad_check(f, params, h: float = 1e-5, tol: float = 1e-4,
               max_entries_per_param: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode grads of ``f()`` against central differences.

    ``f`` rebuilds the graph from ``params`` (dict name->Tensor or list) on each
    call and returns a scalar Tensor. Requires 64-bit parameters and a
    deterministic ``f`` (checked bitwise across two calls).
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    named = [(n, p) for n, p in named if p.requires_grad]
    for name, p in named:
        if p.data.dtype != np.float64:
            raise ContractError(f"grad_check requires float64 parameters; {name} is {p.data.dtype}")

    l1 = f()
    l2 = f()
    if l1.data.size != 1:
        raise ContractError(f"grad_check target must be scalar, got shape {l1.shape}")
    if not np.array_equal(l1.data, l2.data):
        raise DeterminismError(
            f"two forward passes disagree: {l1.data!r} vs {l2.data!r}")

    zero_grads([p for _, p in named])
    backward(l1)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in named}

    picker = np.random.default_rng(seed)
    entries: list[GradCheckEntry] = []
    for name, p in named:
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            idxs = np.sort(picker.choice(flat.size, size=max_entries_per_param, replace=False))
        worst = 0.0
        ga_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = f().item()
            flat[i] = orig - h
            lm = f().item()
            flat[i] = orig
            g_fd = (lp - lm) / (2.0 * h)
            rel = abs(ga_flat[i] - g_fd) / (abs(g_fd) + 1e-8)
            if rel > worst:
                worst = rel
        passed = (worst <= tol) if tol > 0 else False
        entries.append(GradCheckEntry(name=name, max_rel_err=worst, checked=len(idxs), passed=passed))
    return GradCheckReport(entries=entries, tol=tol, h=h)
