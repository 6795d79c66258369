"""Reverse-mode automatic differentiation over dense numpy arrays.

Small tape-based engine: ops execute eagerly on float arrays and, while a
Tape is active, record a vjp closure for the backward sweep. One tape is
built per training step and discarded afterwards; nothing retains graphs.

Training runs at float64; inference paths may pass float32 arrays and ops
preserve the dtype. Broadcasting is restricted to scalar-with-array; any
other shape combination is a hard error (bias addition goes through
``linear``, which expresses the row broadcast as an explicit matmul).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

# Every op validates that its output is finite. Cheap relative to the op
# itself and it turns silent NaN propagation into an immediate error.
CHECK_FINITE = True

_TAPE_STACK: list["Tape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense array plus an accumulated gradient of the same shape."""

    __slots__ = ("data", "grad", "trainable", "name")

    def __init__(self, data, trainable=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        self.data = np.asarray(arr, dtype=dtype)
        self.grad = None
        self.trainable = bool(trainable)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def grad_or_zeros(self):
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, trainable={self.trainable})"

    # arithmetic sugar; all shape rules live in the op functions
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return take(self, key)


def parameter(data, name=None):
    return Tensor(data, trainable=True, name=name)


def constant(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class Tape:
    """Ordered record of ops for one forward pass.

    Nodes are appended in execution order, so the list itself is a valid
    topological order and the backward sweep is a single reverse pass.
    """

    def __init__(self):
        self._nodes = []  # (out Tensor, inputs tuple, vjp closure)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, seeds):
        """Propagate seed gradients back through the recorded ops.

        ``seeds`` is either a scalar output Tensor (seeded with 1.0) or a
        dict {Tensor: gradient array}. Gradients accumulate into ``.grad``
        of every tensor reached; the full {tensor: gradient} map for this
        sweep alone is returned so callers can chain through leaves.
        """
        if not self._nodes:
            raise RuntimeError("backward on an empty tape: no operations were recorded")
        if isinstance(seeds, Tensor):
            if seeds.data.shape != ():
                raise ValueError("bare-tensor seed requires a scalar output; pass a seed dict")
            seeds = {seeds: np.ones((), dtype=seeds.data.dtype)}
        grads: dict[int, np.ndarray] = {}
        tensors: dict[int, Tensor] = {}
        for t, g in seeds.items():
            g = np.asarray(g, dtype=t.data.dtype)
            if g.shape != t.data.shape:
                raise ValueError(f"seed shape {g.shape} does not match tensor shape {t.data.shape}")
            key = id(t)
            grads[key] = grads[key] + g if key in grads else g
            tensors[key] = t
        for out, inputs, vjp in reversed(self._nodes):
            g_out = grads.get(id(out))
            if g_out is None:
                continue
            for inp, g_in in zip(inputs, vjp(g_out)):
                if g_in is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
                    tensors[key] = inp
        result = {}
        for key, g in grads.items():
            t = tensors[key]
            t.grad = g if t.grad is None else t.grad + g
            result[t] = g
        return result


def _record(out, inputs, vjp):
    tape = active_tape()
    if tape is not None:
        tape._nodes.append((out, tuple(inputs), vjp))
    return out


def _finite(name, arr):
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name}: non-finite value in forward result")
    return arr


def _coerce_pair(op, a, b):
    a = constant(a)
    b = constant(b)
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ValueError(f"{op}: shapes {a.data.shape} and {b.data.shape} incompatible "
                         "(only scalar-with-array broadcasting is supported)")
    return a, b


def _reduce_to(shape, g):
    # collapse a gradient onto a scalar operand
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape) if shape == () else g


def add(a, b):
    a, b = _coerce_pair("add", a, b)
    out = Tensor(_finite("add", a.data + b.data))
    return _record(out, (a, b), lambda g: (_reduce_to(a.data.shape, g), _reduce_to(b.data.shape, g)))


def sub(a, b):
    a, b = _coerce_pair("sub", a, b)
    out = Tensor(_finite("sub", a.data - b.data))
    return _record(out, (a, b), lambda g: (_reduce_to(a.data.shape, g), _reduce_to(b.data.shape, -g)))


def mul(a, b):
    a, b = _coerce_pair("mul", a, b)
    out = Tensor(_finite("mul", a.data * b.data))

    def vjp(g):
        return _reduce_to(a.data.shape, g * b.data), _reduce_to(b.data.shape, g * a.data)

    return _record(out, (a, b), vjp)


def div(a, b):
    a, b = _coerce_pair("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(_finite("div", a.data / b.data))

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _reduce_to(a.data.shape, ga), _reduce_to(b.data.shape, gb)

    return _record(out, (a, b), vjp)


def scale(a, c):
    a = constant(a)
    c = float(c)
    out = Tensor(_finite("scale", a.data * c))
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a, b):
    a = constant(a)
    b = constant(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: shapes {a.data.shape} and {b.data.shape} incompatible")
    out = Tensor(_finite("matmul", a.data @ b.data))

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), vjp)


def relu(a):
    a = constant(a)
    out = Tensor(_finite("relu", np.maximum(a.data, 0.0)))
    # subgradient at 0 is 0 by convention
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def tanh(a):
    a = constant(a)
    out = Tensor(_finite("tanh", np.tanh(a.data)))
    return _record(out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def sigmoid(a):
    a = constant(a)
    out = Tensor(_finite("sigmoid", expit(a.data)))
    return _record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def exp(a):
    a = constant(a)
    with np.errstate(over="ignore"):
        out = Tensor(_finite("exp", np.exp(a.data)))
    return _record(out, (a,), lambda g: (g * out.data,))


def absolute(a):
    a = constant(a)
    out = Tensor(_finite("abs", np.abs(a.data)))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def softmax(a):
    """Softmax over the last axis."""
    a = constant(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(_finite("softmax", e / e.sum(axis=-1, keepdims=True)))

    def vjp(g):
        y = out.data
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return _record(out, (a,), vjp)


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance (no affine part)."""
    a = constant(a)
    m = a.data.mean(axis=-1, keepdims=True)
    v = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    y = (a.data - m) * inv
    out = Tensor(_finite("layer_norm", y))

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gm - y * gy) * inv,)

    return _record(out, (a,), vjp)


def concat(tensors, axis=0):
    ts = [constant(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input list")
    out = Tensor(_finite("concat", np.concatenate([t.data for t in ts], axis=axis)))
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, ts, vjp)


def take(a, key):
    """Basic slicing/indexing; the backward scatters into zeros."""
    a = constant(a)
    out = Tensor(a.data[key])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _record(out, (a,), vjp)


def reshape(a, shape):
    a = constant(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a):
    a = constant(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-D, got shape {a.data.shape}")
    out = Tensor(a.data.T.copy())
    return _record(out, (a,), lambda g: (g.T,))


def reduce_sum(a, axis=None):
    a = constant(a)
    out = Tensor(_finite("reduce_sum", a.data.sum(axis=axis)))

    def vjp(g):
        if axis is None:
            return (np.full_like(a.data, 1.0) * g,)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _record(out, (a,), vjp)


def reduce_mean(a, axis=None):
    a = constant(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(reduce_sum(a, axis=axis), 1.0 / n)


def custom(data, inputs, vjp, name="custom"):
    """Record an externally computed op with a hand-written vjp.

    ``vjp(grad_out)`` must return one gradient (or None) per input, in order.
    """
    out = Tensor(_finite(name, np.asarray(data)))
    return _record(out, tuple(inputs), vjp)


def linear(x, w, b=None):
    """x @ w + bias, with the row broadcast spelled as an explicit matmul."""
    y = matmul(x, w)
    if b is not None:
        b = constant(b)
        if b.data.ndim != 2 or b.data.shape[0] != 1:
            raise ValueError(f"linear: bias must have shape (1, d), got {b.data.shape}")
        ones = Tensor(np.ones((x.data.shape[0], 1), dtype=x.data.dtype))
        y = add(y, matmul(ones, b))
    return y


def finite_difference_check(f, params, eps=1e-5, coords=None, seed=0):
    """Max relative error of the taped gradient against central differences.

    ``f`` takes no arguments and closes over the tensors in ``params``; it is
    re-evaluated around their current values, so it must be a pure function of
    them. Returns max over checked coordinates of
    |analytic - numeric| / max(1, |numeric|). ``coords`` limits the check to
    that many randomly chosen coordinates per parameter (None = all of them).
    """
    ps = [params] if isinstance(params, Tensor) else list(params)
    with Tape() as tape:
        out = f()
    if out.data.shape != ():
        raise ValueError("finite_difference_check: f must return a scalar")
    _finite("finite_difference_check", out.data)
    grads = tape.backward(out)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in ps:
        analytic = grads.get(p)
        flat_grad = (analytic if analytic is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        if coords is None or coords >= flat.size:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=coords, replace=False)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(f().data)
            flat[i] = keep - eps
            lo = float(f().data)
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise FloatingPointError("finite_difference_check: non-finite perturbed value")
            worst = max(worst, abs(flat_grad[i] - numeric) / max(1.0, abs(numeric)))
    return worst


def numeric_gradient(f, array, eps=1e-5, coords=None, seed=0):
    """Central-difference gradient of a plain scalar function of one array.

    Companion oracle for hand-written backward passes that live outside the
    tape (the rasterizer). Returns (flat_indices, gradient_values).
    """
    flat = array.reshape(-1)
    rng = np.random.default_rng(seed)
    if coords is None or coords >= flat.size:
        idxs = np.arange(flat.size)
    else:
        idxs = rng.choice(flat.size, size=coords, replace=False)
    vals = np.empty(len(idxs), dtype=np.float64)
    for j, i in enumerate(idxs):
        keep = flat[i]
        flat[i] = keep + eps
        hi = float(f())
        flat[i] = keep - eps
        lo = float(f())
        flat[i] = keep
        vals[j] = (hi - lo) / (2.0 * eps)
    return idxs, vals
