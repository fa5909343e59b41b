"""Minimal reverse-mode autodiff engine on dense float64 numpy arrays.

Define-by-run: every op computes its result eagerly and records a closure
for the backward pass. The op set is intentionally small -- exactly what a
small transformer encoder and its retrieval losses need. Tensors default to
float64 so central finite differences are a meaningful oracle for every
gradient rule.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "MissingGradientError",
    "matmul",
    "transpose",
    "add",
    "mul",
    "scale",
    "softmax",
    "layer_norm",
    "gelu",
    "tanh",
    "embedding_gather",
    "concat",
    "slice_",
    "mean",
    "sum_all",
    "log",
    "exp",
    "cross_entropy_rows",
    "average",
    "backward",
    "AdamW",
    "grad_check",
]


class ShapeError(ValueError):
    """Shape-incompatible operands; carries the op name and both shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {detail}")


class MissingGradientError(RuntimeError):
    """A registered parameter had no gradient at optimizer step time."""


class Tensor:
    """Dense float64 array plus an optional gradient tape entry.

    Tensors with requires_grad=False never allocate a .grad and never hold
    references into the graph, so frozen model weights are plain arrays
    that are safe to share read-only across threads.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; everything routes through the named ops below
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean(self)


def _node(data, parents, grad_fn):
    """Build an op result. The tape entry is dropped if no parent needs it."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out._parents = ()
        out._grad_fn = None
    return out


def _accum(t, g):
    """Accumulate gradient g into tensor t (zero-initialized, additive)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out_data = a.data @ b.data

    def grad_fn(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(out_data, (a, b), grad_fn)


def transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    out_data = a.data.T.copy()

    def grad_fn(g):
        _accum(a, g.T)

    return _node(out_data, (a,), grad_fn)


def add(a, b):
    """Elementwise add; also supports (n,m) + (m,) row-bias broadcast."""
    if a.shape == b.shape:
        broadcast = False
    elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        broadcast = True
    else:
        raise ShapeError("add", a.shape, b.shape)
    out_data = a.data + b.data

    def grad_fn(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0) if broadcast else g)

    return _node(out_data, (a, b), grad_fn)


def mul(a, b):
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    out_data = a.data * b.data

    def grad_fn(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(out_data, (a, b), grad_fn)


def scale(a, c):
    c = float(c)
    out_data = a.data * c

    def grad_fn(g):
        _accum(a, g * c)

    return _node(out_data, (a,), grad_fn)


def softmax(a):
    """Row-wise softmax along the last axis, max-subtracted for stability."""
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        s = out_data
        _accum(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(out_data, (a,), grad_fn)


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row layer norm over the last axis with learnable gain and bias."""
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError("layer_norm", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = xhat * gain.data + bias.data

    def grad_fn(g):
        d_xhat = g * gain.data
        m = d_xhat.mean(axis=-1, keepdims=True)
        mx = (d_xhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv_std * (d_xhat - m - xhat * mx))
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))

    return _node(out_data, (x, gain, bias), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Gaussian error linear unit (tanh approximation)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner
        _accum(a, g * deriv)

    return _node(out_data, (a,), grad_fn)


def tanh(a):
    out_data = np.tanh(a.data)

    def grad_fn(g):
        _accum(a, g * (1.0 - out_data**2))

    return _node(out_data, (a,), grad_fn)


def embedding_gather(table, ids):
    """Gather rows of a 2-D tensor at integer indices (scatter-add backward)."""
    if table.ndim != 2:
        raise ShapeError("embedding_gather", table.shape)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding_gather", table.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"embedding_gather: index out of range for table with "
            f"{table.shape[0]} rows"
        )
    out_data = table.data[idx]

    def grad_fn(g):
        if not table.requires_grad:
            return
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        _accum(table, gt)

    return _node(out_data, (table,), grad_fn)


def concat(tensors, axis=0):
    """Concatenate along axis 0 or 1; other dimensions must agree."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty input")
    ndim = tensors[0].ndim
    if axis not in (0, 1) or axis >= ndim:
        raise ShapeError("concat", *(t.shape for t in tensors))
    other = 1 - axis if ndim == 2 else None
    for t in tensors:
        if t.ndim != ndim or (other is not None and t.shape[other] != tensors[0].shape[other]):
            raise ShapeError("concat", *(t.shape for t in tensors))
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            piece = g[lo:hi] if axis == 0 else g[:, lo:hi]
            _accum(t, piece)

    return _node(out_data, tuple(tensors), grad_fn)


def slice_(a, axis, start, stop):
    """Contiguous slice [start:stop) along one axis of a 1-D or 2-D tensor."""
    if axis >= a.ndim or not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError("slice", a.shape, (axis, start, stop))
    if axis == 0:
        out_data = a.data[start:stop].copy()
    else:
        out_data = a.data[:, start:stop].copy()

    def grad_fn(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        if axis == 0:
            full[start:stop] = g
        else:
            full[:, start:stop] = g
        _accum(a, full)

    return _node(out_data, (a,), grad_fn)


def mean(a):
    out_data = np.asarray(a.data.mean())
    n = a.size

    def grad_fn(g):
        _accum(a, np.full_like(a.data, float(g) / n))

    return _node(out_data, (a,), grad_fn)


def sum_all(a):
    out_data = np.asarray(a.data.sum())

    def grad_fn(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _node(out_data, (a,), grad_fn)


def log(a):
    out_data = np.log(a.data)

    def grad_fn(g):
        _accum(a, g / a.data)

    return _node(out_data, (a,), grad_fn)


def exp(a):
    out_data = np.exp(a.data)

    def grad_fn(g):
        _accum(a, g * out_data)

    return _node(out_data, (a,), grad_fn)


def cross_entropy_rows(logits, targets):
    """Mean negative log-softmax of the target column, per row.

    Log-sum-exp stabilized; targets is a length-n integer sequence.
    """
    if logits.ndim != 2:
        raise ShapeError("cross_entropy_rows", logits.shape)
    tgt = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if tgt.shape != (n,):
        raise ShapeError("cross_entropy_rows", logits.shape, tgt.shape)
    if tgt.size and (tgt.min() < 0 or tgt.max() >= logits.shape[1]):
        raise ValueError("cross_entropy_rows: target index out of range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    losses = lse[:, 0] - z[np.arange(n), tgt]
    out_data = np.asarray(losses.mean())
    probs = np.exp(z - lse)

    def grad_fn(g):
        gz = probs.copy()
        gz[np.arange(n), tgt] -= 1.0
        _accum(logits, gz * (float(g) / n))

    return _node(out_data, (logits,), grad_fn)


def average(tensors):
    """Mean of same-shape tensors, composed from add and scale."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("average: empty input")
    acc = tensors[0]
    for t in tensors[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(tensors))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss):
    """Reverse-mode sweep from a scalar loss.

    Every requires_grad tensor reachable from loss ends up with its
    gradient accumulated; frozen tensors are never touched.
    """
    if loss.shape != ():
        raise ShapeError("backward", loss.shape)
    if not loss.requires_grad:
        return

    # iterative post-order DFS over nodes that participate in the tape
    order = []
    visited = {id(loss)}
    stack = [(loss, iter(loss._parents))]
    while stack:
        node, it = stack[-1]
        pushed = False
        for p in it:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                pushed = True
                break
        if not pushed:
            order.append(node)
            stack.pop()

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """AdamW with decoupled weight decay and a linear warmup/decay schedule.

    With total_steps=None the learning rate is constant. Otherwise it ramps
    linearly over round(warmup_ratio * total_steps) steps and then decays
    linearly to zero at total_steps.
    """

    def __init__(
        self,
        params,
        lr,
        weight_decay=0.0,
        betas=(0.9, 0.999),
        eps=1e-8,
        warmup_ratio=0.0,
        total_steps=None,
    ):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValueError("AdamW: registered a frozen tensor")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.warmup_ratio = float(warmup_ratio)
        self.total_steps = total_steps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def lr_at(self, t):
        """Learning rate for (1-based) step t."""
        if self.total_steps is None:
            return self.lr
        warmup = int(round(self.warmup_ratio * self.total_steps))
        if warmup > 0 and t <= warmup:
            return self.lr * t / warmup
        denom = max(1, self.total_steps - warmup)
        return self.lr * max(0.0, (self.total_steps - t) / denom)

    def step(self):
        """One update; requires every registered parameter to hold a grad."""
        self.step_count += 1
        t = self.step_count
        lr_t = self.lr_at(t)
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise MissingGradientError(
                    "AdamW.step: parameter with no gradient (shape "
                    f"{p.shape}); check freezing/registration"
                )
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= lr_t * (m_hat / (np.sqrt(v_hat) + self.eps))
            if self.weight_decay:
                p.data -= lr_t * self.weight_decay * p.data
        self.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# Finite-difference gradient checker
# ---------------------------------------------------------------------------


def grad_check(f, params, num_samples=30, h=1e-5, rng=None):
    """Compare analytic gradients of scalar f() against central differences.

    f rebuilds its graph from params on every call. Returns the max over
    sampled coordinates of |analytic - numeric| / max(1e-8, |a| + |n|).
    """
    params = list(params)
    rng = rng if rng is not None else np.random.default_rng(0)

    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        for p in params
    ]
    for p in params:
        p.grad = None

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if len(coords) > num_samples:
        picks = rng.choice(len(coords), size=num_samples, replace=False)
        coords = [coords[int(k)] for k in picks]

    worst = 0.0
    for i, j in coords:
        p = params[i]
        orig = p.data.flat[j]
        p.data.flat[j] = orig + h
        f_plus = f().item()
        p.data.flat[j] = orig - h
        f_minus = f().item()
        p.data.flat[j] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic[i].flat[j]
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, rel)
    return worst
