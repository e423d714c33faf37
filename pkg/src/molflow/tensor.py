"""Small dense-array engine with reverse-mode autodiff on top of numpy.

Everything is float64. A ``Tensor`` records the op that produced it (and its
parents) only when at least one input requires a gradient, so inference code
pays no graph overhead.

Broadcasting: ``add``/``mul`` follow numpy broadcasting and reduce gradients
back to the input shape; ``matmul`` supports leading batch dimensions on
either side (a 2-D right operand is shared across the batch).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf from finite inputs."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar over the primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite output in {op}")


def _make(op: str, out: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(op, out)
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.op = op
        t._parents = parents
        t._backward = backward_fn
    else:
        t.op = op
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), bw)


def matmul(a, b) -> Tensor:
    """Contract the last axis of ``a`` with the second-to-last of ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    shared = b.data.ndim == 2 and a.data.ndim > 2
    if shared:
        # fold leading dims so weight products are single GEMMs
        k = a.shape[-1]
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def bw(g):
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), bw)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or apply an explicit permutation."""
    x = as_tensor(x)
    if axes is None:
        if x.data.ndim < 2:
            raise ValueError("transpose needs at least 2 dimensions")
        axes = list(range(x.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make("transpose", out, (x,), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), bw)


def layer_norm(x, weight=None, bias=None, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply optional affine terms."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [x]
    w = b = None
    out = xhat
    if weight is not None:
        w = as_tensor(weight)
        parents.append(w)
        out = out * w.data
    if bias is not None:
        b = as_tensor(bias)
        parents.append(b)
        out = out + b.data
    h = x.shape[-1]

    def bw(g):
        gx_hat = g * w.data if w is not None else g
        gx = inv / h * (h * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if w is not None:
            grads.append(_unbroadcast(g * xhat, w.shape))
        if b is not None:
            grads.append(_unbroadcast(g, b.shape))
        return grads

    return _make("layer_norm", out, tuple(parents), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0

    def bw(g):
        return (g * on,)

    return _make("relu", np.where(on, x.data, 0.0), (x,), bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    xd = x.data
    th = np.tanh(_GELU_C * (xd + 0.044715 * xd * xd * xd))

    def bw(g):
        dth = (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * dth),)

    return _make("gelu", 0.5 * xd * (1.0 + th), (x,), bw)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt of negative value")
    y = np.sqrt(x.data)

    def bw(g):
        # subgradient 0 at x = 0 (distance between coincident points)
        safe = np.where(y > 0, y, 1.0)
        return (np.where(y > 0, g * 0.5 / safe, 0.0),)

    return _make("sqrt", y, (x,), bw)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make("mean", np.asarray(out), (x,), bw)


def gather(table, idx) -> Tensor:
    """Embedding lookup: rows of a 2-D ``table`` selected by integer ``idx``."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.data.ndim != 2:
        raise ValueError("gather expects a 2-D table")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("gather index out of range")
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("gather", out, (table,), bw)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: shape mismatch {[t.shape for t in ts]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return np.split(g, sizes, axis=axis)

    return _make("concat", out, ts, bw)


def slice_(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(k is Ellipsis or k is None or isinstance(k, (slice, int, np.integer)) for k in parts)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _make("slice", np.array(out, dtype=np.float64), (x,), bw)


def squared_error(pred, target, weight=None) -> Tensor:
    """Scalar ``sum(weight * (pred - target)**2)``; ``weight`` broadcasts."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"squared_error: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    w = np.ones_like(diff) if weight is None else np.broadcast_to(np.asarray(weight, dtype=np.float64), diff.shape)
    out = np.asarray((w * diff * diff).sum())

    def bw(g):
        gd = 2.0 * g * w * diff
        return gd, -gd

    return _make("squared_error", out, (pred, target), bw)


def cross_entropy(logits, targets, weight=None) -> Tensor:
    """Scalar ``sum_i weight_i * -log softmax(logits_i)[targets_i]`` over rows.

    ``logits`` is (..., C); ``targets`` is an integer array of shape (...).
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"cross_entropy: shape mismatch {logits.shape} vs {targets.shape}")
    w = np.ones(targets.shape) if weight is None else np.broadcast_to(np.asarray(weight, dtype=np.float64), targets.shape)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = np.asarray(-(w * picked).sum())

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return (g * w[..., None] * (p - onehot),)

    return _make("cross_entropy", out, (logits,), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    The graph is freed afterwards; a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if loss._freed:
        raise RuntimeError("graph already freed: run the forward pass again")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node._freed = True
    loss._freed = True


def grad(loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Run ``backward`` and return the gradient of each leaf (zeros if unused)."""
    for leaf in leaves:
        leaf.grad = None
    backward(loss)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """One bias-corrected Adam update, in place on ``params``.

    Returns False (and leaves everything untouched) if any gradient is
    non-finite; ``state.skipped`` counts those events.
    """
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"adam: gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            return False
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global L2 norm <= max_norm; return the pre-clip norm."""
    total = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
    if np.isfinite(total) and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total
