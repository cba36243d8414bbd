"""Dense float64 tensors with reverse-mode autodiff.

Design constraints, kept deliberately tight so every gradient rule stays
auditable:

- storage is always a C-contiguous float64 ndarray
- elementwise ops require identical shapes; no implicit broadcasting
  (constants may broadcast onto a tensor via add_constant, which takes
  no gradient)
- backward() runs from a scalar only, visits each graph node once in
  reverse topological order, and *accumulates* gradients additively,
  so one backward over summed micro-batch losses equals summed grads
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError, VocabError

IGNORE_INDEX = -100


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # sugar; all arithmetic routes through the module-level ops
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_constant(self, other)

    def __radd__(self, other):
        return add_constant(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_constant(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Build an op output; records the graph only if some parent needs grad."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar. Gradients accumulate into .grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    # iterative postorder DFS; reversed postorder = topological order
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- elementwise


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} shapes differ: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return from_op(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return from_op(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return from_op(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        _accumulate(a, g * s)

    return from_op(a.data * s, (a,), bw)


def add_constant(a: Tensor, c) -> Tensor:
    """a + c where c is a float or ndarray constant; no gradient flows to c."""
    out = a.data + np.asarray(c, dtype=np.float64)
    if out.shape != a.shape:
        raise ShapeError(f"add_constant result {out.shape} != operand {a.shape}")

    def bw(g):
        _accumulate(a, g)

    return from_op(out, (a,), bw)


def texp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * y)

    return from_op(y, (a,), bw)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accumulate(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return from_op(a.data * sig, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; d/dx = sigmoid(x)."""
    y = np.logaddexp(0.0, a.data)

    def bw(g):
        _accumulate(a, g / (1.0 + np.exp(-a.data)))

    return from_op(y, (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where lo <= x <= hi."""
    if not lo < hi:
        raise ContractError(f"clamp bounds lo={lo} hi={hi}")
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accumulate(a, g * inside)

    return from_op(np.clip(a.data, lo, hi), (a,), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to a."""
    _check_same_shape("minimum", a, b)
    take_a = a.data <= b.data

    def bw(g):
        _accumulate(a, g * take_a)
        _accumulate(b, g * ~take_a)

    return from_op(np.where(take_a, a.data, b.data), (a, b), bw)


# ------------------------------------------------------------------ reshaping


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape {a.shape} -> {shape}")

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return from_op(a.data.reshape(shape), (a,), bw)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))

    def bw(g):
        _accumulate(a, np.transpose(g, inv).copy())

    return from_op(np.transpose(a.data, axes).copy(), (a,), bw)


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d on shape {a.shape}")
    return permute(a, (1, 0))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the leading axis; backward scatters into a zero buffer."""
    n = a.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows [{start}:{stop}] on leading dim {n}")

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[start:stop] = g
            _accumulate(a, buf)

    return from_op(a.data[start:stop].copy(), (a,), bw)


def take_row(a: Tensor, idx: int) -> Tensor:
    n = a.shape[0]
    if not (-n <= idx < n):
        raise ShapeError(f"take_row index {idx} on leading dim {n}")

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[idx] = g
            _accumulate(a, buf)

    return from_op(a.data[idx].copy(), (a,), bw)


def repeat_heads(a: Tensor, repeats: int) -> Tensor:
    """Repeat along axis 0 (kv-head sharing); backward sums over each group."""
    if a.data.ndim < 1 or repeats < 1:
        raise ShapeError(f"repeat_heads repeats={repeats} on shape {a.shape}")
    n = a.shape[0]

    def bw(g):
        _accumulate(a, g.reshape((n, repeats) + a.shape[1:]).sum(axis=1))

    return from_op(np.repeat(a.data, repeats, axis=0), (a,), bw)


# ----------------------------------------------------------------- contraction


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or batched matmul with identical leading dims (no broadcasting)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return from_op(np.matmul(a.data, b.data), (a, b), bw)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T for 2-D operands; avoids materializing transpose nodes."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul_t needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_t inner dims differ: {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data)
        if b.requires_grad:
            _accumulate(b, g.T @ a.data)

    return from_op(a.data @ b.data.T, (a, b), bw)


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return from_op(np.asarray(a.data.sum()), (a,), bw)


def tmean(a: Tensor) -> Tensor:
    n = a.size
    if n == 0:
        raise ShapeError("mean of empty tensor")

    def bw(g):
        _accumulate(a, np.full_like(a.data, float(g) / n))

    return from_op(np.asarray(a.data.mean()), (a,), bw)


# -------------------------------------------------------------------- softmax


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the trailing axis, max-subtracted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return from_op(y, (a,), bw)


def _log_softmax(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=-1, keepdims=True)
    shifted = rows - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_probs_of(logits: Tensor, token_ids) -> Tensor:
    """Per-row log softmax probability of the given token ids. [T,V] -> [T]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"log_probs_of needs [T,V] logits, got {logits.shape}")
    ids = np.asarray(token_ids, dtype=np.int64)
    t, v = logits.shape
    if ids.shape != (t,):
        raise ShapeError(f"log_probs_of ids shape {ids.shape} vs logits rows {t}")
    bad = (ids < 0) | (ids >= v)
    if bad.any():
        pos = int(np.argmax(bad))
        raise VocabError(f"token id {int(ids[pos])} at position {pos} outside vocab of size {v}")
    logp = _log_softmax(logits.data)
    out = logp[np.arange(t), ids]

    def bw(g):
        if logits.requires_grad:
            d = -np.exp(logp) * g[:, None]
            d[np.arange(t), ids] += g
            _accumulate(logits, d)

    return from_op(out, (logits,), bw)


def cross_entropy_masked(logits: Tensor, labels) -> Tensor:
    """Mean over non-ignored positions of -log softmax(logits)[label].

    Positions whose label equals IGNORE_INDEX contribute neither loss nor
    gradient. With every position ignored, returns 0.0 with zero gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_masked needs [T,V] logits, got {logits.shape}")
    lab = np.asarray(labels, dtype=np.int64)
    t, v = logits.shape
    if lab.shape != (t,):
        raise ShapeError(f"labels shape {lab.shape} vs logits rows {t}")
    active = lab != IGNORE_INDEX
    bad = active & ((lab < 0) | (lab >= v))
    if bad.any():
        pos = int(np.argmax(bad))
        raise VocabError(f"label {int(lab[pos])} at position {pos} outside vocab of size {v}")
    n_eff = int(active.sum())
    if n_eff == 0:
        return Tensor(0.0)
    rows = np.nonzero(active)[0]
    logp = _log_softmax(logits.data[rows])
    picked = logp[np.arange(n_eff), lab[rows]]
    loss = -picked.mean()

    def bw(g):
        if logits.requires_grad:
            d = np.zeros_like(logits.data)
            soft = np.exp(logp)
            soft[np.arange(n_eff), lab[rows]] -= 1.0
            d[rows] = soft * (float(g) / n_eff)
            _accumulate(logits, d)

    return from_op(np.asarray(loss), (logits,), bw)


def embedding_gather(table: Tensor, token_ids) -> Tensor:
    """Row gather from [V,d]; backward scatter-adds into the table."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"token ids must be 1-D, got shape {ids.shape}")
    v = table.shape[0]
    bad = (ids < 0) | (ids >= v)
    if bad.any():
        pos = int(np.argmax(bad))
        raise VocabError(f"token id {int(ids[pos])} at position {pos} outside vocab of size {v}")

    def bw(g):
        if table.requires_grad:
            d = np.zeros_like(table.data)
            np.add.at(d, ids, g)
            _accumulate(table, d)

    return from_op(table.data[ids].copy(), (table,), bw)


# ------------------------------------------------------------------- checking


def finite_difference_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic grad of f(x) and central differences.

    f must be a pure function Tensor -> scalar Tensor. Per-element error is
    |analytic - central| / (|analytic| + |central| + floor). The floor is an
    absolute noise allowance in gradient units: central differences of a
    float64 scalar cannot resolve derivatives below roughly eps * |f| / step,
    so entries that small would otherwise register roundoff as error. A
    wrong sign or formula in any entry of meaningful size still scores
    near 1.
    """
    x.zero_grad()
    out = f(x)
    backward(out)
    f0 = abs(out.item())
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    analytic = analytic.copy()
    flat = x.data.reshape(-1)
    central = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x).item()
        flat[i] = orig - step
        fm = f(x).item()
        flat[i] = orig
        central[i] = (fp - fm) / (2.0 * step)
    a = analytic.reshape(-1)
    floor = 1e4 * np.finfo(np.float64).eps * max(1.0, f0) / step
    denom = np.abs(a) + np.abs(central) + floor
    return float((np.abs(a - central) / denom).max(initial=0.0))
