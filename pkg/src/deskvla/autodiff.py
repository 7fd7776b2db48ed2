"""Minimal dense-tensor engine with reverse-mode differentiation.

Tensors wrap row-major float64 numpy arrays of rank 1-3. Every operation
that produces a tracked tensor records a backward closure; ``backward()``
replays the recorded graph once in reverse topological order and
accumulates gradients with ``+=`` (callers zero grads between steps).
Double precision is used throughout so that every differentiable kernel
can be validated against the central-difference oracle in
``finite_diff_check``.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericsError(ArithmeticError):
    """A non-finite value (NaN/Inf) appeared in an operation result."""


_FINITE_CHECKS = True
_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference/benchmark paths)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def set_finite_checks(enabled):
    """Toggle the per-op NaN/Inf guard (kept on everywhere but hot bench loops)."""
    global _FINITE_CHECKS
    previous = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return previous


def _check_finite(arr, op_name):
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {op_name}")


class Tensor:
    """Rank 1-3 float64 array, optionally tracked for reverse-mode autodiff.

    ``grad`` accumulates across ``backward()`` calls; repeated backward
    without zeroing adds gradients (by design, so optimizers own the reset).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} tensors are unsupported (max 3)")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    # -- conveniences -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """Copy of the values with no graph attachment (alias of stop_gradient)."""
        return stop_gradient(self)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    # -- reverse pass --------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every tracked tensor reachable from this scalar.

        Visits each recorded operation exactly once, in reverse topological
        order of the forward construction.
        """
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar (single-element) loss")
        order = _topological_order(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root):
    """Iterative post-order over the tracked ancestry of ``root``."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data, parents, backward_fn, op_name):
    """Build an op result, registering the closure when any input is tracked."""
    _check_finite(data, op_name)
    out = Tensor(data)
    if _GRAD_ENABLED.get():
        tracked = tuple(p for p in parents if p.requires_grad)
        if tracked:
            out.requires_grad = True
            out._parents = tracked
            out._backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape`` by summing stretched axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    data = a.data * c

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _make(data, (a,), backward, "scale")


def gelu(a):
    """Smooth gated nonlinearity (tanh formulation)."""
    a = _as_tensor(a)
    c = 0.7978845608028654  # sqrt(2/pi)
    k = 0.044715
    x = a.data
    x_sq = x * x
    t = np.tanh(c * (x + k * x_sq * x))
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dinner = c * (1.0 + 3.0 * k * x_sq)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a._accumulate(g * da)

    return _make(data, (a,), backward, "gelu")


# -- linear algebra ----------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward, "matmul")


def matmul_nt(a, b):
    """a @ b.T without materializing the transpose (hot-path variant)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul_nt expects rank-2 operands")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_nt inner dims disagree: {a.shape} x {b.shape}^T")
    data = a.data @ b.data.T

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data)
        if b.requires_grad:
            b._accumulate(g.T @ a.data)

    return _make(data, (a, b), backward, "matmul_nt")


def linear(x, w, b=None):
    """x @ w (+ b row-broadcast): one graph node instead of two."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear shapes disagree: {x.shape} @ {w.shape}")
    data = x.data @ w.data
    if b is not None:
        b = _as_tensor(b)
        data = data + b.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, backward, "linear")


def affine_rows(x, scale_row, shift_row):
    """x * (1 + scale_row) + shift_row, rows broadcast over x."""
    x, scale_row, shift_row = _as_tensor(x), _as_tensor(scale_row), _as_tensor(shift_row)
    data = x.data * (1.0 + scale_row.data) + shift_row.data

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 + scale_row.data))
        if scale_row.requires_grad:
            scale_row._accumulate(_unbroadcast(g * x.data, scale_row.shape))
        if shift_row.requires_grad:
            shift_row._accumulate(_unbroadcast(g, shift_row.shape))

    return _make(data, (x, scale_row, shift_row), backward, "affine_rows")


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a rank-2 tensor")
    data = a.data.T.copy()

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _make(data, (a,), backward, "transpose")


# -- normalization / attention kernels ----------------------------------


def attention(q, k, v, heads, key_bias=None):
    """Fused multi-head scaled dot-product attention (one graph node).

    ``q`` is (m, d), ``k``/``v`` are (n, d) with d divisible by ``heads``;
    ``key_bias`` is an optional constant (n,) additive score bias (large
    negative entries mask keys). Equivalent to slicing heads, softmax over
    scaled scores, value aggregation, and head concatenation, but with a
    single hand-derived backward closure.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d:
        raise ShapeError("attention operands must share the feature dim")
    if k.shape[0] != v.shape[0]:
        raise ShapeError("keys and values must have equal counts")
    if d % heads != 0:
        raise ShapeError("feature dim must be divisible by the head count")
    dh = d // heads
    inv = 1.0 / np.sqrt(dh)
    m, n = q.shape[0], k.shape[0]
    out = np.empty((m, d))
    probs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = (q.data[:, sl] @ k.data[:, sl].T) * inv
        if key_bias is not None:
            logits = logits + key_bias
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        probs.append(logits)
        out[:, sl] = logits @ v.data[:, sl]

    def backward(g):
        dq = np.zeros_like(q.data) if q.requires_grad else None
        dk = np.zeros_like(k.data) if k.requires_grad else None
        dv = np.zeros_like(v.data) if v.requires_grad else None
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            p = probs[h]
            gh = g[:, sl]
            if dv is not None:
                dv[:, sl] = p.T @ gh
            if dq is not None or dk is not None:
                dp = gh @ v.data[:, sl].T
                dlogits = p * (dp - (dp * p).sum(axis=1, keepdims=True))
                if dq is not None:
                    dq[:, sl] = (dlogits @ k.data[:, sl]) * inv
                if dk is not None:
                    dk[:, sl] = (dlogits.T @ q.data[:, sl]) * inv
        if dq is not None:
            q._accumulate(dq)
        if dk is not None:
            k._accumulate(dk)
        if dv is not None:
            v._accumulate(dv)

    return _make(out, (q, k, v), backward, "attention")


def softmax_rows(x):
    """Row-wise softmax, stabilized by subtracting each row's max."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("softmax_rows expects a rank-2 tensor")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)
    y = data

    def backward(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            x._accumulate(y * (g - dot))

    return _make(data, (x,), backward, "softmax_rows")


RMSNORM_EPS = 1e-6


def rmsnorm(x, gain):
    """Scale each row to unit root-mean-square, then apply a per-dim gain."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    if x.data.ndim != 2 or gain.data.ndim != 1:
        raise ShapeError("rmsnorm expects rank-2 input and rank-1 gain")
    if x.shape[1] != gain.shape[0]:
        raise ShapeError("rmsnorm gain length must match the feature dim")
    d = x.shape[1]
    ms = np.mean(x.data**2, axis=1, keepdims=True) + RMSNORM_EPS
    r = np.sqrt(ms)
    normed = x.data / r
    data = normed * gain.data

    def backward(g):
        if x.requires_grad:
            gy = g * gain.data
            proj = (gy * x.data).sum(axis=1, keepdims=True) / (d * r**3)
            x._accumulate(gy / r - x.data * proj)
        if gain.requires_grad:
            gain._accumulate((g * normed).sum(axis=0))

    return _make(data, (x, gain), backward, "rmsnorm")


# -- reductions / reshuffles -------------------------------------------


def mean_rows(x):
    """Mean over rows: (m, d) -> (1, d)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("mean_rows expects a rank-2 tensor")
    m = x.shape[0]
    data = x.data.mean(axis=0, keepdims=True)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g / m, x.shape).copy())

    return _make(data, (x,), backward, "mean_rows")


def sum_all(x):
    x = _as_tensor(x)
    data = np.array([x.data.sum()])

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, g[0]))

    return _make(data, (x,), backward, "sum_all")


def mean_all(x):
    x = _as_tensor(x)
    n = x.data.size
    data = np.array([x.data.mean()])

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, g[0] / n))

    return _make(data, (x,), backward, "mean_all")


def concat_rows(parts):
    """Concatenate along axis 0; all parts must share rank (1 or 2) and trailing dims."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows requires at least one part")
    ndim = parts[0].data.ndim
    if any(p.data.ndim != ndim for p in parts):
        raise ShapeError("concat_rows parts must share rank")
    data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return _make(data, tuple(parts), backward, "concat_rows")


def slice_rows(x, start, stop):
    x = _as_tensor(x)
    data = x.data[start:stop].copy()

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[start:stop] = g
            x._accumulate(buf)

    return _make(data, (x,), backward, "slice_rows")


def slice_cols(x, start, stop):
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("slice_cols expects a rank-2 tensor")
    data = x.data[:, start:stop].copy()

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[:, start:stop] = g
            x._accumulate(buf)

    return _make(data, (x,), backward, "slice_cols")


def gather_rows(x, indices):
    """Pick rows by index (duplicates allowed); backward scatter-adds."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError("gather_rows index out of range")
    data = x.data[idx].copy()

    def backward(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            np.add.at(buf, idx, g)
            x._accumulate(buf)

    return _make(data, (x,), backward, "gather_rows")


def embedding_lookup(table, ids):
    """Row lookup in an embedding table; gradient reaches only the used rows."""
    return gather_rows(table, ids)


def stop_gradient(x):
    """Forward identity that contributes exactly zero to upstream gradients."""
    x = _as_tensor(x)
    return Tensor(x.data.copy())


# -- randomness ---------------------------------------------------------

GUMBEL_CLAMP = 1e-12


def gumbel_from_uniform(u):
    """Standard Gumbel samples via -log(-log(u)), with u clamped away from {0, 1}."""
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def gumbel(shape, rng):
    """I.i.d. standard Gumbel noise tensor drawn from ``rng``'s uniform stream."""
    return Tensor(gumbel_from_uniform(rng.uniform(shape)))


# -- verification oracle -------------------------------------------------


def finite_diff_check(f, x, step=1e-5):
    """Worst relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor and must be deterministic.
    The relative error denominator is max(|analytic|, |numeric|, 1e-8)
    per element; the maximum over elements is returned.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ShapeError("finite_diff_check requires a scalar-valued function")
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - step
        f_minus = f(Tensor(bumped.reshape(x.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * step)
    numeric = numeric.reshape(x.shape)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
