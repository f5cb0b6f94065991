"""Dense arrays with reverse-mode differentiation, AdamW, and the LR schedule.

The Tensor here is a thin autograd wrapper around numpy arrays: each op
records its inputs and a backward closure, and ``backward()`` walks the
graph once in reverse topological order. Desk-scale by design; numpy does
the heavy lifting, this module only does the bookkeeping.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient became NaN or infinite; carries the parameter name."""


class UndefinedLossError(ValueError):
    """Loss requested over zero contributing positions."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording (inference / decoding paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus the machinery to backpropagate through it."""

    __slots__ = ("data", "grad", "_backward", "_prev")

    def __init__(self, data, _prev=()):
        self.data = np.asarray(data)
        self.grad = None
        self._backward = None
        self._prev = _prev if _GRAD_ENABLED else ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def item(self):
        return self.data.item()

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable ``.grad``.

        Visits each node exactly once (iterative topo sort, so deep graphs
        don't hit the recursion limit). Seeds with ones; call on scalars.
        """
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self._accum_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._prev:
                # free intermediate grads; leaves keep theirs
                node.grad = None

    def _accum_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, prev, backward):
    out = Tensor(data, _prev=prev if _GRAD_ENABLED else ())
    if _GRAD_ENABLED:
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- primitive ops ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        a._accum_grad(_unbroadcast(g, a.data.shape))
        b._accum_grad(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        a._accum_grad(_unbroadcast(g * b.data, a.data.shape))
        b._accum_grad(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        a._accum_grad(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        b._accum_grad(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(data, (a, b), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        a._accum_grad(np.transpose(g, inverse))

    return _node(data, (a,), backward)


def swap_last(a) -> Tensor:
    """Transpose the trailing two axes (matmul helper)."""
    return swap_axes(a, -1, -2)


def swap_axes(a, i, j) -> Tensor:
    a = as_tensor(a)
    data = np.swapaxes(a.data, i, j)

    def backward(g):
        a._accum_grad(np.swapaxes(g, i, j))

    return _node(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        a._accum_grad(g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum_grad(piece)

    return _node(data, tuple(tensors), backward)


def take(a, key) -> Tensor:
    """Indexing/slicing; gradient scatters back (duplicates accumulate)."""
    a = as_tensor(a)
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a._accum_grad(full)

    return _node(data, (a,), backward)


def take_rows(table, ids) -> Tensor:
    """Embedding-style row gather: out[..., :] = table[ids[...], :]."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accum_grad(full)

    return _node(data, (table,), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum_grad(np.broadcast_to(g, a.data.shape))

    return _node(data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def power(a, exponent) -> Tensor:
    a = as_tensor(a)
    data = a.data ** exponent

    def backward(g):
        a._accum_grad(g * exponent * a.data ** (exponent - 1))

    return _node(data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        a._accum_grad(g * data)

    return _node(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        a._accum_grad(g / a.data)

    return _node(data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accum_grad(g * (a.data > 0))

    return _node(data, (a,), backward)


def softmax(x, axis=-1):
    """Stable softmax; accepts a Tensor (differentiable) or a plain array."""
    if not isinstance(x, Tensor):
        x = np.asarray(x, dtype=np.float64) if np.asarray(x).dtype.kind != "f" else np.asarray(x)
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x._accum_grad(data * (g - dot))

    return _node(data, (x,), backward)


def masked_softmax(x, mask, axis=-1) -> Tensor:
    """Softmax over positions where ``mask`` is True.

    Masked scores act as -inf; rows with no allowed position come out as
    all zeros rather than NaN.
    """
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    neg = np.where(mask, x.data, -np.inf)
    rowmax = neg.max(axis=axis, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.where(mask, np.exp(neg - rowmax), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    data = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x._accum_grad(data * (g - dot))

    return _node(data, (x,), backward)


def rms_norm(x, gain, eps=1e-6) -> Tensor:
    """Scale each trailing-axis vector to unit RMS, then apply the gain."""
    x, gain = as_tensor(x), as_tensor(gain)
    n = x.data.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = x.data * inv
    data = normed * gain.data

    def backward(g):
        gain._accum_grad(_unbroadcast(g * normed, gain.data.shape))
        u = g * gain.data
        proj = (u * x.data).sum(axis=-1, keepdims=True)
        x._accum_grad(u * inv - x.data * proj * inv**3 / n)

    return _node(data, (x, gain), backward)


def dropout(x, rate, rng=None, training=False) -> Tensor:
    """Inverted dropout: identity at inference, 1/(1-rate) scaling in training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    return mul(x, keep / (1.0 - rate))


def cross_entropy_with_logits(logits, targets, ignore_id=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row softmax.

    ``logits`` is [..., V]; targets holds class ids (or ignore_id for
    positions excluded from the mean).
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    flat = logits.data.reshape(-1, logits.data.shape[-1])
    tflat = targets.reshape(-1)
    valid = np.ones_like(tflat, dtype=bool) if ignore_id is None else tflat != ignore_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise UndefinedLossError("every position is ignored; loss undefined")
    rows = np.nonzero(valid)[0]
    cls = tflat[rows]
    sub = flat[rows]
    m = sub.max(axis=1, keepdims=True)
    lse = np.log(np.exp(sub - m).sum(axis=1, keepdims=True)) + m
    nll = lse[:, 0] - sub[np.arange(len(rows)), cls]
    data = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def backward(g):
        grad = np.zeros_like(flat)
        soft = np.exp(sub - lse)
        soft[np.arange(len(rows)), cls] -= 1.0
        grad[rows] = soft * (g / n_valid)
        logits._accum_grad(grad.reshape(logits.data.shape))

    return _node(data, (logits,), backward)


def zero_grads(params):
    for p in params:
        p.grad = None


# -- optimizer and schedule ----------------------------------------------

@dataclass
class AdamWState:
    """Per-parameter moments plus the hyperparameters of the update."""

    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-6
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, state: AdamWState, lr, decay_filter=None):
    """One AdamW update over ``params`` (ordered name -> Tensor with .grad).

    Bias-corrected moments, decoupled weight decay. Decay applies where
    ``decay_filter(name, tensor)`` is true (default: matrices only, i.e.
    ndim >= 2). Parameters are updated in place.
    """
    if decay_filter is None:
        decay_filter = lambda name, t: t.data.ndim >= 2
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay and decay_filter(name, p):
            update = update + state.weight_decay * p.data
        p.data -= lr * update


@dataclass(frozen=True)
class WarmupLinearSchedule:
    """Linear 0 -> peak over the warmup, then linear peak -> 0 at the end.

    Warmup is 5% of total steps (rounded up), per the training recipe.
    """

    peak_lr: float = 1e-5
    total_steps: int = 1000

    @property
    def warmup_steps(self) -> int:
        return max(1, math.ceil(0.05 * self.total_steps))

    def lr_at(self, step: int) -> float:
        w, total = self.warmup_steps, self.total_steps
        if step <= 0:
            return 0.0
        if step <= w:
            return self.peak_lr * step / w
        if step >= total:
            return 0.0
        return self.peak_lr * (total - step) / (total - w)


def lr_at(schedule: WarmupLinearSchedule, step: int) -> float:
    return schedule.lr_at(step)


# -- gradient verification ------------------------------------------------

def grad_check(f, params, h=1e-5, rng=None, max_entries_per_param=None):
    """Max relative error between backward grads and central differences.

    ``f`` takes no arguments, closes over ``params`` (list of Tensors),
    and returns a scalar Tensor. Checks every entry unless
    ``max_entries_per_param`` caps the sample (seeded by ``rng``).
    Run in float64; float32 round-off swamps the comparison.
    """
    params = list(params)
    zero_grads(params)
    out = f()
    out.backward()
    analytic = [np.array(p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params]

    gmax = max((np.abs(a).max() for a in analytic), default=0.0)
    floor = max(1e-8, 1e-2 * gmax)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = range(n)
        aflat = a.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), floor)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    zero_grads(params)
    return worst


def derive_seed(root_seed, *labels) -> int:
    """Stable child seed from a run seed plus context labels.

    Hash-derived so parallel batch construction can seed per example
    without order mattering.
    """
    text = "|".join([str(int(root_seed))] + [str(x) for x in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
