"""Reverse-mode automatic differentiation over numpy float64 arrays.

Operations executed while a :class:`Tape` is active, and that touch at least
one tensor with ``requires_grad``, are appended to the tape in execution
order.  Since a node can only consume tensors created before it, replaying
the tape backwards is a valid reverse topological order by construction.

Outside a tape, operations run as plain numpy (inference mode).
"""
from __future__ import annotations

import itertools
import threading

import numpy as np

from . import kernels


class ContractError(ValueError):
    """An operation was called with inputs that violate its contract."""


_tape_ids = itertools.count(1)
_local = threading.local()


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, and the innermost one records.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[Tensor] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tape_id(self):
        return None if self._tape is None else self._tape.id

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    """Wrap an op result and record it when any parent needs a gradient."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        tape = active_tape()
        if tape is not None:
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out._tape = tape
            tape.nodes.append(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ContractError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ContractError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ContractError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b):
    """Batched matrix product; a 2-D right operand is shared across the batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _make(out, (a, b), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ContractError(f"concat: shapes {shapes} differ off axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ContractError(f"stack: shapes {sorted(shapes)} differ")
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def embed_lookup(table, ids):
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ContractError(f"embed_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embed_lookup: ids out of range [0, {table.shape[0]}) (min {ids.min()}, max {ids.max()})")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids.ravel(), g.reshape(-1, shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward)


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0.0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),))


def sigmoid(a):
    a = as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def _rows(x, axis):
    """Move ``axis`` last and flatten to a C-contiguous 2-D block."""
    moved = np.moveaxis(x, axis, -1)
    return np.ascontiguousarray(moved.reshape(-1, moved.shape[-1])), moved.shape


def _unrows(x2, moved_shape, axis):
    return np.moveaxis(x2.reshape(moved_shape), -1, axis)


def softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0.

    A row with every entry masked raises :class:`ContractError`.
    """
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ContractError(f"softmax: axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    x2, moved = _rows(a.data, axis)
    m2 = None
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        m2, _ = _rows(m.astype(np.uint8), axis)
    y2 = kernels.softmax_fwd(x2, m2)
    if y2 is None:
        raise ContractError(f"softmax: a row of shape {a.shape} along axis {axis} is fully masked")
    y = _unrows(y2, moved, axis)

    def backward(g):
        g2, _ = _rows(g, axis)
        return (_unrows(kernels.softmax_bwd(y2, g2), moved, axis),)

    return _make(y, (a,), backward)


def log_softmax(a, axis=-1, mask=None):
    """Log-softmax along ``axis``; masked entries come out as ``-inf``."""
    a = as_tensor(a)
    axis = axis % a.ndim
    x = a.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        if not m.any(axis=axis).all():
            raise ContractError(f"log_softmax: a row of shape {a.shape} along axis {axis} is fully masked")
        x = np.where(m, x, -np.inf)
    mx = x.max(axis=axis, keepdims=True)
    z = x - mx
    e = np.exp(z)
    s = e.sum(axis=axis, keepdims=True)
    y = z - np.log(s)
    p = e / s

    def backward(g):
        g = np.where(np.isfinite(y), g, 0.0)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), backward)


def layer_norm(a, gain, bias, eps=1e-5):
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    h = a.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ContractError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis {h}")
    x2 = np.ascontiguousarray(a.data.reshape(-1, h))
    y2, xhat, rstd = kernels.layer_norm_fwd(x2, gain.data, bias.data, eps)
    gd = gain.data

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, h))
        dx, dgain, dbias = kernels.layer_norm_bwd(g2, xhat, rstd, gd)
        return dx.reshape(a.shape), dgain, dbias

    return _make(y2.reshape(a.shape), (a, gain, bias), backward)


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is True by the constant ``value``."""
    a = as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(m, value, a.data)
    return _make(out, (a,), lambda g: (np.where(m, 0.0, g),))


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),))


def index_select(a, index):
    """Numpy-style indexing (basic or advanced) with scatter-add backward."""
    a = as_tensor(a)
    out = a.data[index]
    src = a.shape

    def backward(g):
        ga = np.zeros(src)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(np.array(out, dtype=np.float64), (a,), backward)


def gather(a, idx, axis=1):
    """``out[b, k, ...] = a[b, idx[b, k], ...]`` for integer ``idx`` of shape (B, K)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if axis != 1 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ContractError(f"gather: index {idx.shape} incompatible with {a.shape} on axis {axis}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ContractError(f"gather: index out of range for axis length {a.shape[1]}")
    rows = np.arange(a.shape[0])[:, None]
    out = a.data[rows, idx]
    src = a.shape

    def backward(g):
        ga = np.zeros(src)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _make(out, (a,), backward)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "embed_lookup": embed_lookup,
    "relu": relu,
    "softmax_over_axis": softmax,
    "layer_norm": layer_norm,
    "masked_fill": masked_fill,
    "sigmoid": sigmoid,
}


def apply_primitive(kind, *inputs, **attrs):
    """Dispatch one of the named primitives by string ``kind``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **attrs)


# -------------------------------------------------------------------- losses

def _reduce(per_sample, reduction):
    if reduction == "none":
        return per_sample
    if reduction == "mean":
        return mean(per_sample)
    if reduction == "sum":
        return sum_(per_sample)
    raise ContractError(f"unknown reduction {reduction!r}")


def cross_entropy(logits, target, mask=None, reduction="mean"):
    """Cross-entropy of ``logits`` (N, A) against class indices or one-hot rows.

    ``mask`` marks the legal actions of each row; illegal ones are excluded
    from the normaliser.
    """
    logits = as_tensor(logits)
    target = np.asarray(target)
    if target.ndim == logits.ndim:
        if target.shape != logits.shape:
            raise ContractError(f"cross_entropy: target {target.shape} vs logits {logits.shape}")
        onehot = target.astype(np.float64)
    else:
        if target.shape != logits.shape[:-1]:
            raise ContractError(f"cross_entropy: target {target.shape} vs logits {logits.shape}")
        onehot = np.zeros(logits.shape)
        np.put_along_axis(onehot, target[..., None].astype(np.int64), 1.0, axis=-1)
    logp = log_softmax(logits, axis=-1, mask=mask)
    if mask is not None and np.any(onehot * ~np.broadcast_to(np.asarray(mask, bool), logits.shape)):
        raise ContractError("cross_entropy: target places mass on a masked action")
    finite_logp = masked_fill(logp, ~np.isfinite(logp.data), 0.0)
    per = scale(sum_(mul(finite_logp, onehot), axis=-1), -1.0)
    return _reduce(per, reduction)


def mse(prediction, target, reduction="mean"):
    """Squared error averaged over all non-batch axes, then reduced over the batch."""
    prediction, target = as_tensor(prediction), as_tensor(target)
    if prediction.shape != target.shape:
        raise ContractError(f"mse: shapes {prediction.shape} and {target.shape} differ")
    d = sub(prediction, target)
    sq = mul(d, d)
    if sq.ndim <= 1:
        return mean(sq) if reduction != "none" else sq
    per = mean(sq, axis=tuple(range(1, sq.ndim)))
    return _reduce(per, reduction)


def kl_temperature(student_logits, teacher_logits, tau=2.0, mask=None, reduction="mean"):
    """``tau**2 * KL(softmax(teacher/tau) || softmax(student/tau))`` per row.

    The teacher side is treated as a constant.
    """
    if tau <= 0:
        raise ContractError(f"kl_temperature: tau must be positive, got {tau}")
    student_logits = as_tensor(student_logits)
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, np.float64)
    if t.shape != student_logits.shape:
        raise ContractError(f"kl_temperature: shapes {student_logits.shape} and {t.shape} differ")
    m = None if mask is None else np.broadcast_to(np.asarray(mask, bool), t.shape)
    if m is not None and not m.any(axis=-1).all():
        raise ContractError("kl_temperature: a logits row is fully masked")
    ts = t / tau if m is None else np.where(m, t / tau, -np.inf)
    ts = ts - ts.max(axis=-1, keepdims=True)
    pt = np.exp(ts)
    pt /= pt.sum(axis=-1, keepdims=True)
    log_pt = np.where(pt > 0, np.log(np.where(pt > 0, pt, 1.0)), 0.0)
    log_ps = log_softmax(scale(student_logits, 1.0 / tau), axis=-1, mask=m)
    finite = masked_fill(log_ps, ~np.isfinite(log_ps.data), 0.0)
    cross = sum_(mul(finite, pt), axis=-1)
    ent = (pt * log_pt).sum(axis=-1)
    per = scale(sub(ent, cross), tau * tau)
    return _reduce(per, reduction)


_LOSSES = {"cross_entropy": cross_entropy, "mse": mse, "kl_temperature": kl_temperature}


def loss_primitive(kind, prediction, target, **attrs):
    try:
        fn = _LOSSES[kind]
    except KeyError:
        raise ContractError(f"unknown loss {kind!r}") from None
    return fn(prediction, target, **attrs)


# ------------------------------------------------------------------ backward

def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves that are not reachable keep whatever ``.grad`` they had (``None``
    unless zeroed beforehand).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor requiring grad")
    tape = loss._tape
    if tape is None:
        # the loss itself is a leaf
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            if parent._tape is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64).reshape(parent.shape)
                else:
                    parent.grad = parent.grad + pg
            else:
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg


def no_grad_value(fn, *args, **kwargs):
    """Evaluate ``fn`` outside any tape (inference mode)."""
    stack = getattr(_local, "stack", None)
    saved = list(stack) if stack else []
    if stack:
        stack.clear()
    try:
        return fn(*args, **kwargs)
    finally:
        if saved:
            _local.stack.extend(saved)


# ------------------------------------------------------------ gradient check

def finite_diff_check(f, params, h=1e-5, eps=1e-7, max_coords=None, rng=None):
    """Compare tape gradients of scalar ``f()`` with central differences.

    ``f`` is a zero-argument callable that rebuilds the loss from the current
    values of ``params`` (a list of leaf tensors).  Returns the maximum over
    checked coordinates of ``|analytic - numeric| / max(|analytic|, |numeric|, eps)``.
    ``max_coords`` caps the number of coordinates probed per parameter;
    the subset is drawn from ``rng``.
    """
    if h <= 0:
        raise ContractError(f"finite_diff_check: h must be positive, got {h}")
    for p in params:
        p.grad = None
    with Tape():
        loss = f()
        if not np.isfinite(loss.data).all():
            raise ContractError("finite_diff_check: f is non-finite at the base point")
        if loss.requires_grad:
            backward(loss)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(no_grad_value(f).data)
            flat[i] = orig - h
            fm = float(no_grad_value(f).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ContractError(f"finite_diff_check: f non-finite when probing {p.name or 'param'}[{i}]")
            num = (fp - fm) / (2 * h)
            an = analytic.reshape(-1)[i]
            err = abs(an - num) / max(abs(an), abs(num), eps)
            worst = max(worst, err)
    return worst
