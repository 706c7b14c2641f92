"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations only record onto a tape while one is active (``with Tape() as t``)
and at least one input requires a gradient; outside a tape everything runs as
plain numpy, which is what inference and finite-difference evaluation use.
"""

import contextlib
import math

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "NonFiniteError", "DimensionError",
    "ConfigurationError", "scope", "as_tensor",
    "add", "sub", "mul", "scale", "matmul", "matmul_bias", "transpose",
    "reshape", "concat", "sum", "mean", "relu", "softmax_rows", "log_softmax_rows",
    "layer_norm", "conv2d", "global_avg_pool", "cross_entropy", "backward",
    "grad_check", "GradCheckReport",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


_TAPES = []
_SCOPES = []


@contextlib.contextmanager
def scope(name):
    """Label operations run inside the block, used in non-finite error messages."""
    _SCOPES.append(name)
    try:
        yield
    finally:
        _SCOPES.pop()


def _where(op):
    return "/".join(_SCOPES + [op])


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    __add__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __mul__ = lambda self, other: mul(self, other)
    __matmul__ = lambda self, other: matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    __slots__ = ("trainable",)

    def __init__(self, name, data, trainable=True):
        super().__init__(data, requires_grad=trainable, name=name)
        self.trainable = trainable


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications.

    Each entry is ``(op, inputs, output, backward_fn)`` where ``backward_fn``
    maps the output gradient to a tuple of input gradients (``None`` for
    inputs that need none).
    """

    def __init__(self):
        self.entries = []
        self._grads = None

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, op, inputs, out, backward_fn):
        out.node_id = len(self.entries)
        out.requires_grad = True
        self.entries.append((op, inputs, out, backward_fn))

    def backward(self, loss):
        """Run one reverse sweep from a scalar ``loss``; returns self."""
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None or loss.node_id >= len(self.entries) or \
                self.entries[loss.node_id][2] is not loss:
            raise ValueError("loss was not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for op, inputs, out, fn in reversed(self.entries[: loss.node_id + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            grads[("out", id(out))] = g
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self._grads = grads
        self._loss = loss
        return self

    def grad(self, t):
        """Gradient of the last backward loss with respect to ``t`` (zeros if unreachable)."""
        if self._grads is None:
            raise RuntimeError("call backward() first")
        g = self._grads.get(("out", id(t)))
        if g is None:
            g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g


def _active_tape(*inputs):
    if not _TAPES:
        return None
    for t in inputs:
        if isinstance(t, Tensor) and t.requires_grad:
            return _TAPES[-1]
    return None


def _finish(op, data, inputs, backward_fn):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced in {_where(op)}")
    out = Tensor(data)
    tape = _active_tape(*inputs)
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _finish("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x):
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return _finish("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# -- linear algebra ----------------------------------------------------------

def _swap_last(x):
    return np.swapaxes(x, -1, -2)


def _matmul_backward(a, b):
    def fn(g):
        ga = _unbroadcast(g @ _swap_last(b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap_last(a.data) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return fn


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _finish("matmul", a.data @ b.data, (a, b), _matmul_backward(a, b))


def matmul_bias(A, W, b=None):
    """``A @ W + b`` with ``A`` of shape [..., k], ``W`` [k, n], ``b`` [n]."""
    A, W = as_tensor(A), as_tensor(W)
    if W.ndim != 2 or A.ndim < 1 or A.shape[-1] != W.shape[0]:
        raise DimensionError(f"matmul_bias shape mismatch: A{A.shape} vs W{W.shape}")
    if b is None:
        out = A.data @ W.data
        inputs = (A, W)
    else:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"bias shape {b.shape} does not match W{W.shape}")
        out = A.data @ W.data + b.data
        inputs = (A, W, b)
    a_shape = A.shape

    def fn(g):
        gA = g @ W.data.T if A.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gW = A.data.reshape(-1, a_shape[-1]).T @ g2 if W.requires_grad else None
        if b is None:
            return gA, gW
        return gA, gW, g2.sum(axis=0)

    return _finish("matmul_bias", out, inputs, fn)


def transpose(x, axes=None):
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def reshape(x, shape):
    old = x.shape
    return _finish("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _finish("concat", np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def sum(x, axis=None, keepdims=False):
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), fn)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- normalisation -----------------------------------------------------------

def softmax_rows(X):
    """Softmax over the last axis, with max subtraction."""
    z = X.data - X.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _finish("softmax_rows", s, (X,), fn)


def log_softmax_rows(X):
    z = X.data - X.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax_rows", out, (X,), fn)


def layer_norm(X, gamma, beta, eps=1e-5):
    """Per-row standardisation over the last axis followed by ``gamma * xhat + beta``."""
    d = X.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm params {gamma.shape}/{beta.shape} vs input {X.shape}")
    mu = X.data.mean(axis=-1, keepdims=True)
    xc = X.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def fn(g):
        gxhat = g * gamma.data
        gX = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return (gX, (flat * xhat.reshape(-1, d)).sum(axis=0), flat.sum(axis=0))

    return _finish("layer_norm", out, (X, gamma, beta), fn)


# -- convolution -------------------------------------------------------------

def _conv_out(size, k, stride, padding):
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv2d output size not integral: size={size}, kernel={k}, "
            f"stride={stride}, padding={padding}")
    return span // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation. ``x`` is [C,H,W] or [N,C,H,W]; ``w`` is [O,C,kh,kw].

    Internally channel-major ([C,N,H,W]) so every shifted window copies whole
    image rows into the column matrix, and the product comes out as [O, N*H*W].
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernels {w.shape}")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    n, c, h, wd = xd.shape
    o, _, kh, kw = w.shape
    ho = _conv_out(h, kh, stride, padding)
    wo = _conv_out(wd, kw, stride, padding)
    xp = np.zeros((c, n, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = xd.transpose(1, 0, 2, 3)
    windows = [(i, j, np.s_[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride])
               for i in range(kh) for j in range(kw)]
    cols = np.empty((kh, kw, c, n, ho, wo))
    for i, j, win in windows:
        cols[i, j] = xp[win]
    cols = cols.reshape(kh * kw * c, n * ho * wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = wmat @ cols
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    if squeeze:
        out = out[0]
    inputs = (x, w) if b is None else (x, w, b)

    def fn(g):
        g4 = g[None] if squeeze else g
        g2 = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(o, -1)
        gx = gw = None
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(kh, kw, c, n, ho, wo)
            gxp = np.zeros_like(xp)
            for i, j, win in windows:
                gxp[win] += gcols[i, j]
            gx = np.ascontiguousarray(
                gxp[:, :, padding:padding + h, padding:padding + wd].transpose(1, 0, 2, 3))
            if squeeze:
                gx = gx[0]
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return _finish("conv2d", out, inputs, fn)


def global_avg_pool(x):
    """Spatial mean per channel: [C,H,W] -> [C] or [N,C,H,W] -> [N,C]."""
    h, w = x.shape[-2:]
    shape = x.shape

    def fn(g):
        return (np.broadcast_to(g[..., None, None] / (h * w), shape).copy(),)

    return _finish("global_avg_pool", x.data.mean(axis=(-2, -1)), (x,), fn)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row-softmax ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _finish("cross_entropy", np.asarray(loss), (logits,), fn)


# -- gradients ---------------------------------------------------------------

def backward(loss, tape, params):
    """Gradient of scalar ``loss`` for every trainable parameter, keyed by name.

    ``params`` maps names to :class:`Parameter`; parameters unreachable from
    the loss receive exact zeros.
    """
    tape.backward(loss)
    return {name: tape.grad(p) for name, p in params.items() if p.trainable}


class GradCheckReport:
    def __init__(self, errors, tol):
        self.errors = errors
        self.tol = tol

    @property
    def passed(self):
        return all(np.isfinite(e) and e <= self.tol for e in self.errors.values())

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def failures(self):
        return {k: e for k, e in self.errors.items() if not (np.isfinite(e) and e <= self.tol)}

    def __repr__(self):
        return f"GradCheckReport(passed={self.passed}, max_error={self.max_error:.3g})"


def relative_error(analytic, numeric):
    """Max absolute difference scaled by the larger of the two gradients' max-norms."""
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    denom = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if diff == 0.0:
        return 0.0
    return diff / max(denom, 1e-300)


def grad_check(f, params, h=1e-5, tol=1e-4):
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` takes no arguments, reads the current values of ``params`` (a
    name -> Parameter mapping) and returns a scalar Tensor. Parameter data is
    perturbed in place and restored.
    """
    with Tape() as tape:
        loss = f()
    analytic = backward(loss, tape, params)
    errors = {}
    for name, p in params.items():
        if not p.trainable:
            continue
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        a = analytic[name]
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(num))):
            errors[name] = math.nan
        else:
            errors[name] = relative_error(a, num)
    return GradCheckReport(errors, tol)
