"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is 64-bit and single-threaded by design: at desk scale,
bit-reproducibility matters more than speed.  A :class:`Tape` records the
forward graph in construction order (which is already topological) and
:func:`backward` replays it once, in reverse, with a fixed accumulation
order.  Gradients are accumulated out of place so that views returned by
cheap backward rules (reshape, transpose) can never be corrupted.

Scalars are represented as shape-() arrays.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import DimensionError, TapeReuseError

class Tensor:
    """An n-d float64 array, optionally recorded on a gradient tape."""

    __slots__ = ("data", "tape", "_idx")

    def __init__(self, data, tape: Optional["Tape"] = None, _parents=(), _grad_fns=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self._idx: Optional[int] = None
        if tape is not None:
            tape._record(self, _parents, _grad_fns)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        loc = "tape" if self.tape is not None else "const"
        return f"Tensor(shape={self.data.shape}, {loc})"


class Tape:
    """Ordered record of operations for one forward/backward cycle.

    Construction order is topological by definition: an op's inputs exist
    before the op runs.  A tape supports exactly one backward pass.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, tuple]] = []
        self._named_leaves: dict[str, Tensor] = {}
        self._spent = False

    def leaf(self, data, name: Optional[str] = None) -> Tensor:
        """Wrap an array as a differentiable leaf tracked by this tape."""
        t = Tensor(data, tape=self)
        if name is not None:
            if name in self._named_leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self._named_leaves[name] = t
        return t

    @property
    def named_leaves(self) -> dict[str, Tensor]:
        return dict(self._named_leaves)

    def _record(self, tensor: Tensor, parents, grad_fns):
        tensor._idx = len(self._nodes)
        self._nodes.append((tensor, tuple(parents), tuple(grad_fns)))


def constant(data) -> Tensor:
    """An untracked tensor: participates in forward math, blocks gradient."""
    return Tensor(np.asarray(data, dtype=np.float64), tape=None)


def stop_gradient(t: Tensor) -> Tensor:
    """Detach ``t`` from its tape; backward treats it as a constant."""
    return Tensor(t.data, tape=None)


def _tape_of(*tensors) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
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
# elementwise arithmetic (with broadcasting)
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return Tensor(
        out, _tape_of(a, b), (a, b),
        (lambda g: _unbroadcast(g, a.data.shape),
         lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return Tensor(
        out, _tape_of(a, b), (a, b),
        (lambda g: _unbroadcast(g, a.data.shape),
         lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return Tensor(
        out, _tape_of(a, b), (a, b),
        (lambda g: _unbroadcast(g * b.data, a.data.shape),
         lambda g: _unbroadcast(g * a.data, b.data.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor(a.data * c, _tape_of(a), (a,), (lambda g: g * c,))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product with gradient recording."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data
    return Tensor(
        out, _tape_of(a, b), (a, b),
        (lambda g: g @ b.data.T,
         lambda g: a.data.T @ g),
    )


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading dimensions."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise DimensionError("bmm needs 3-D operands")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise DimensionError(
            f"bmm shapes incompatible: {a.data.shape} x {b.data.shape}")
    out = np.matmul(a.data, b.data)
    return Tensor(
        out, _tape_of(a, b), (a, b),
        (lambda g: np.matmul(g, b.data.swapaxes(-1, -2)),
         lambda g: np.matmul(a.data.swapaxes(-1, -2), g)),
    )


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for 2-D x; one node instead of matmul + add."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError("linear expects 2-D input, 2-D weight, 1-D bias")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"linear shapes incompatible: {x.data.shape} @ {w.data.shape} "
            f"+ {b.data.shape}")
    out = x.data @ w.data + b.data
    return Tensor(
        out, _tape_of(x, w, b), (x, w, b),
        (lambda g: g @ w.data.T,
         lambda g: x.data.T @ g,
         lambda g: g.sum(axis=0)),
    )


def split_heads(x: Tensor, b: int, s: int, nh: int, dh: int) -> Tensor:
    """(b*s, nh*dh) -> (b*nh, s, dh) head layout for attention."""
    out = x.data.reshape(b, s, nh, dh).transpose(0, 2, 1, 3).reshape(b * nh, s, dh)

    def fn(g):
        return g.reshape(b, nh, s, dh).transpose(0, 2, 1, 3).reshape(b * s, nh * dh)

    return Tensor(out, _tape_of(x), (x,), (fn,))


def merge_heads(x: Tensor, b: int, s: int, nh: int, dh: int) -> Tensor:
    """(b*nh, s, dh) -> (b*s, nh*dh), the inverse of split_heads."""
    out = x.data.reshape(b, nh, s, dh).transpose(0, 2, 1, 3).reshape(b * s, nh * dh)

    def fn(g):
        return g.reshape(b, s, nh, dh).transpose(0, 2, 1, 3).reshape(b * nh, s, dh)

    return Tensor(out, _tape_of(x), (x,), (fn,))


def attention_core(q: Tensor, k: Tensor, v: Tensor, scale_factor: float) -> Tensor:
    """softmax(q k^T * scale) v in one node with a hand-derived backward."""
    for t in (q, k, v):
        if t.data.ndim != 3:
            raise DimensionError("attention_core operates on (batch, seq, dim)")
    scores = np.matmul(q.data, k.data.swapaxes(-1, -2)) * scale_factor
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    p = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v.data)
    cache: list = []  # score-gradient shared by fn_q and fn_k within one backward

    def shared(g):
        if not cache or cache[0] is not g:
            gp = np.matmul(g, v.data.swapaxes(-1, -2))
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale_factor
            cache[:] = [g, gs]
        return cache[1]

    def fn_q(g):
        return np.matmul(shared(g), k.data)

    def fn_k(g):
        return np.matmul(shared(g).swapaxes(-1, -2), q.data)

    def fn_v(g):
        return np.matmul(p.swapaxes(-1, -2), g)

    return Tensor(out, _tape_of(q, k, v), (q, k, v), (fn_q, fn_k, fn_v))


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = t.data.shape
    return Tensor(t.data.reshape(shape), _tape_of(t), (t,),
                  (lambda g: g.reshape(old),))


def transpose(t: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor(np.transpose(t.data, axes), _tape_of(t), (t,),
                  (lambda g: np.transpose(g, inv),))


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_fn(i):
        lo, hi = offsets[i], offsets[i + 1]

        def fn(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]
        return fn

    return Tensor(out, _tape_of(*tensors), tuple(tensors),
                  tuple(make_fn(i) for i in range(len(tensors))))


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * t.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = t.data.shape

    def fn(g):
        full = np.zeros(shape, dtype=np.float64)
        full[idx] = g
        return full

    return Tensor(t.data[idx], _tape_of(t), (t,), (fn,))


def gather_rows(t: Tensor, rows) -> Tensor:
    """Select rows of a 2-D tensor by index; backward scatter-adds."""
    rows = np.asarray(rows, dtype=np.intp)
    if t.data.ndim != 2:
        raise DimensionError("gather_rows expects a 2-D tensor")
    shape = t.data.shape

    def fn(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, rows, g)
        return full

    return Tensor(t.data[rows], _tape_of(t), (t,), (fn,))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table; ids may be any integer shape."""
    ids = np.asarray(ids)
    if np.any(ids < 0) or np.any(ids >= table.data.shape[0]):
        raise IndexError("token id out of vocabulary range")
    flat = ids.reshape(-1)
    shape = table.data.shape

    def fn(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, flat, g.reshape(flat.size, shape[1]))
        return full

    out = table.data[flat].reshape(ids.shape + (shape[1],))
    return Tensor(out, _tape_of(table), (table,), (fn,))


def tile_rows(t: Tensor, n: int) -> Tensor:
    """Repeat a 1-D tensor as n identical rows; backward sums rows."""
    if t.data.ndim != 1:
        raise DimensionError("tile_rows expects a 1-D tensor")
    out = np.broadcast_to(t.data, (n, t.data.shape[0])).copy()
    return Tensor(out, _tape_of(t), (t,), (lambda g: g.sum(axis=0),))


# ---------------------------------------------------------------------------
# reductions and nonlinearities
# ---------------------------------------------------------------------------

def sum_all(t: Tensor) -> Tensor:
    shape = t.data.shape
    return Tensor(t.data.sum(), _tape_of(t), (t,),
                  (lambda g: np.broadcast_to(g, shape).copy(),))


def silu(t: Tensor) -> Tensor:
    """x * sigmoid(x): a smooth gate, cheaper than erf-based alternatives."""
    x = t.data
    s = 1.0 / (1.0 + np.exp(-x))
    out = x * s
    deriv = s * (1.0 + x * (1.0 - s))
    return Tensor(out, _tape_of(t), (t,), (lambda g: g * deriv,))


def softmax(t: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return p * (g - dot)

    return Tensor(p, _tape_of(t), (t,), (fn,))


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def fn_x(g):
        gh = g * gain.data
        term = gh - gh.mean(axis=-1, keepdims=True) \
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        return term * inv

    def fn_gain(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def fn_bias(g):
        return g.reshape(-1, d).sum(axis=0)

    return Tensor(out, _tape_of(t, gain, bias), (t, gain, bias),
                  (fn_x, fn_gain, fn_bias))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Stabilized by max subtraction; labels are validated against the class
    axis before any arithmetic runs.
    """
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects 2-D logits")
    labels = np.asarray(labels, dtype=np.intp)
    b, c = logits.data.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels must have shape ({b},), got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError("label out of range for class count")
    logp = _log_softmax(logits.data)
    loss = -logp[np.arange(b), labels].sum() / b
    p = np.exp(logp)

    def fn(g):
        grad = p.copy()
        grad[np.arange(b), labels] -= 1.0
        return grad * (g / b)

    return Tensor(loss, _tape_of(logits), (logits,), (fn,))


def symmetric_kl(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean over the batch of KL(p||q) + KL(q||p) on softmaxed logits.

    Both directions are computed with the same summation order, so
    swapping the arguments gives a bitwise identical value.
    """
    if p_logits.data.shape != q_logits.data.shape:
        raise DimensionError("symmetric_kl operands must share a shape")
    if p_logits.data.ndim != 2:
        raise DimensionError("symmetric_kl expects 2-D logits")
    b = p_logits.data.shape[0]
    lp = _log_softmax(p_logits.data)
    lq = _log_softmax(q_logits.data)
    p = np.exp(lp)
    q = np.exp(lq)
    diff = lp - lq
    kl_pq = (p * diff).sum(axis=-1)
    kl_qp = (q * -diff).sum(axis=-1)
    loss = (kl_pq + kl_qp).sum() / b

    def fn_p(g):
        row = p * (diff - kl_pq[:, None]) + p - q
        return row * (g / b)

    def fn_q(g):
        row = q * (-diff - kl_qp[:, None]) + q - p
        return row * (g / b)

    return Tensor(loss, _tape_of(p_logits, q_logits),
                  (p_logits, q_logits), (fn_p, fn_q))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every leaf on the tape.

    Returns a map keyed by leaf Tensor; leaves the loss does not depend on
    map to zeros.  A tape can run backward exactly once.
    """
    if loss.tape is not tape:
        raise ValueError("loss does not belong to this tape")
    if loss.data.shape != ():
        raise DimensionError("backward requires a scalar loss")
    if tape._spent:
        raise TapeReuseError("tape has already been consumed by backward")
    tape._spent = True

    grads: dict[int, np.ndarray] = {loss._idx: np.ones((), dtype=np.float64)}
    for tensor, parents, grad_fns in reversed(tape._nodes):
        if not parents:
            continue  # leaf: grad stays in place for final collection
        g = grads.pop(tensor._idx, None)
        if g is None:
            continue
        for parent, fn in zip(parents, grad_fns):
            if parent.tape is not tape:
                continue
            contrib = fn(g)
            held = grads.get(parent._idx)
            # out-of-place accumulation: contributions may alias g via views
            grads[parent._idx] = contrib if held is None else held + contrib

    result: dict[Tensor, np.ndarray] = {}
    for tensor, parents, _ in tape._nodes:
        if parents:
            continue
        g = grads.get(tensor._idx)
        if g is None:
            result[tensor] = np.zeros_like(tensor.data)
        else:
            result[tensor] = np.array(g, dtype=np.float64)
    return result
