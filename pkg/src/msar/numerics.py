"""Dense tensors with taped reverse-mode differentiation.

Everything runs in 64-bit precision: real arrays are float64, complex arrays
are complex128. A :class:`Tensor` wraps a numpy array plus an optional
gradient slot; operations executed while a :class:`DiffGraph` is active are
recorded on it, and :func:`backward` replays the tape in reverse to fill in
gradients.

Complex support uses the convention that the gradient stored for a complex
tensor ``z`` is ``dL/d(Re z) + i * dL/d(Im z)`` for the real-valued loss
``L``. Under that convention the adjoint of any multilinear op contracts the
output gradient against the conjugate of the other operands, and gradients
flowing into a real tensor take the real part. Finite-difference checks on
real and imaginary parts validate the rules directly.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ConfigError, ShapeError, SingularMatrixError

__all__ = [
    "Tensor",
    "DiffGraph",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "sigmoid",
    "absolute",
    "conj",
    "real",
    "reshape",
    "transpose",
    "take_rows",
    "concat",
    "where",
    "tsum",
    "tmean",
    "matmul",
    "einsum",
    "softmax",
    "log_softmax",
    "layer_norm",
    "conv2d",
    "dropout",
    "solve_hermitian",
    "hermitian_solve",
    "trace_last2",
    "diagonal_last2",
]

_GRAPH_STACK: list["DiffGraph"] = []


def _promote(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype.kind == "c":
        return a.astype(np.complex128, copy=False)
    return a.astype(np.float64, copy=False)


class Tensor:
    """A float64 or complex128 array with an optional gradient slot.

    ``requires_grad`` marks leaves whose gradients the caller wants;
    gradients accumulate additively into ``grad`` across uses and across
    repeated backward passes until reset to ``None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _promote(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tracked = False

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class DiffGraph:
    """Ordered tape of executed primitives, inputs always preceding use.

    Use as a context manager; ops executed inside record themselves when any
    input participates in differentiation. One graph belongs to one
    execution context at a time.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, list]] = []

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _fit_grad(t: Tensor, g) -> np.ndarray:
    """Project a gradient contribution onto the dtype of its target."""
    g = np.asarray(g)
    if t.data.dtype.kind == "f":
        if g.dtype.kind == "c":
            g = g.real
        return g.astype(np.float64, copy=False)
    return g.astype(np.complex128, copy=False)


def _apply(out_data: np.ndarray, vjps: list) -> Tensor:
    """Wrap an op result, recording vjp closures for differentiable inputs."""
    out = Tensor(out_data)
    if _GRAPH_STACK:
        live = [(t, f) for t, f in vjps if t.requires_grad or t._tracked]
        if live:
            out._tracked = True
            _GRAPH_STACK[-1]._records.append((out, live))
    return out


def backward(loss: Tensor, graph: DiffGraph) -> None:
    """Fill gradients of every tensor reachable from ``loss`` on ``graph``.

    ``loss`` must be a scalar. Gradients accumulate additively, both across
    multiple uses of a tensor within the graph and across repeated calls.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad = loss.grad + np.ones_like(loss.data)
    for out, pairs in reversed(graph._records):
        g = out.grad
        if g is None:
            continue
        for t, vjp in pairs:
            contrib = _fit_grad(t, vjp(g))
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += contrib
        if not out.requires_grad:
            # intermediate buffers are consumed so repeated calls stay additive
            out.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast up from ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _apply(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _apply(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _apply(a.data * b.data, [
        (a, lambda g: _unbroadcast(g * np.conj(b.data), a.shape)),
        (b, lambda g: _unbroadcast(g * np.conj(a.data), b.shape)),
    ])


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _apply(a.data / b.data, [
        (a, lambda g: _unbroadcast(g * np.conj(1.0 / b.data), a.shape)),
        (b, lambda g: _unbroadcast(g * np.conj(-a.data / (b.data * b.data)), b.shape)),
    ])


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _apply(-a.data, [(a, lambda g: -g)])


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _apply(y, [(a, lambda g: g * np.conj(y))])


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _apply(np.log(a.data), [(a, lambda g: g * np.conj(1.0 / a.data))])


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    y = np.sqrt(a.data)
    return _apply(y, [(a, lambda g: g * np.conj(0.5 / y))])


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _apply(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # stable in both tails
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _apply(y, [(a, lambda g: g * y * (1.0 - y))])


def absolute(a) -> Tensor:
    """Elementwise magnitude; maps complex to real. Subgradient 0 at zero."""
    a = _as_tensor(a)
    y = np.abs(a.data)
    safe = np.where(y == 0, 1.0, y)

    def vjp(g):
        return g * (a.data / safe) * (y != 0)

    return _apply(y, [(a, vjp)])


def conj(a) -> Tensor:
    a = _as_tensor(a)
    return _apply(np.conj(a.data), [(a, lambda g: np.conj(g))])


def real(a) -> Tensor:
    a = _as_tensor(a)
    return _apply(a.data.real.copy(), [(a, lambda g: g)])


# ---------------------------------------------------------------------------
# shape manipulation and indexing


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _apply(a.data.reshape(shape), [(a, lambda g: g.reshape(old))])


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)
    return _apply(a.data.transpose(axes), [(a, lambda g: g.transpose(inv))])


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0; the embedding-lookup primitive."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return buf

    return _apply(a.data[idx], [(a, vjp)])


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def make_vjp(i):
        return lambda g: np.split(g, splits, axis=axis)[i]

    return _apply(np.concatenate([t.data for t in ts], axis=axis),
                  [(t, make_vjp(i)) for i, t in enumerate(ts)])


def where(cond, a, b) -> Tensor:
    """Select elementwise on a constant condition mask."""
    a, b = _as_tensor(a), _as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    return _apply(np.where(c, a.data, b.data), [
        (a, lambda g: _unbroadcast(g * c, a.shape)),
        (b, lambda g: _unbroadcast(g * ~c, b.shape)),
    ])


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape)

    return _apply(a.data.sum(axis=axis, keepdims=keepdims), [(a, vjp)])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape) / count

    return _apply(a.data.mean(axis=axis, keepdims=keepdims), [(a, vjp)])


# ---------------------------------------------------------------------------
# contractions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (m,k)x(k,n), got {a.shape} x {b.shape}")
    return _apply(a.data @ b.data, [
        (a, lambda g: g @ np.conj(b.data).T),
        (b, lambda g: np.conj(a.data).T @ g),
    ])


def _parse_einsum(spec: str, operands) -> tuple[list[str], str]:
    if "->" not in spec:
        raise ContractError("einsum spec must contain '->'")
    lhs, out_sub = spec.split("->")
    subs = lhs.split(",")
    if len(subs) != len(operands):
        raise ShapeError(f"einsum '{spec}' expects {len(subs)} operands, got {len(operands)}")
    for i, s in enumerate(subs):
        if "." in s or len(set(s)) != len(s):
            raise ContractError(f"einsum operand '{s}': ellipsis and repeated indices unsupported")
        others = set(out_sub) | set("".join(subs[:i] + subs[i + 1:]))
        if not set(s) <= others:
            raise ContractError(f"einsum index summed inside single operand '{s}' unsupported")
    if not set(out_sub) <= set("".join(subs)):
        raise ContractError(f"einsum output indices must come from inputs: '{spec}'")
    return subs, out_sub


def einsum(spec: str, *operands) -> Tensor:
    """Multilinear contraction with automatic adjoints.

    Each operand must use distinct indices and every index of an operand has
    to appear in the output or in another operand, which is exactly the class
    of contractions whose adjoint is again an einsum.
    """
    tensors = [_as_tensor(op) for op in operands]
    subs, out_sub = _parse_einsum(spec, tensors)
    out = np.einsum(spec, *[t.data for t in tensors])

    def make_vjp(i):
        other_subs = [s for j, s in enumerate(subs) if j != i]
        back_spec = ",".join(other_subs + [out_sub]) + "->" + subs[i]

        def vjp(g):
            args = [np.conj(tensors[j].data) for j in range(len(tensors)) if j != i]
            return np.einsum(back_spec, *args, g)

        return vjp

    return _apply(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


# ---------------------------------------------------------------------------
# neural-net primitives


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max subtraction before exponentiation)."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (g - (g * y).sum(axis=axis, keepdims=True)) * y

    return _apply(y, [(a, vjp)])


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    z = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        return g - np.exp(z) * g.sum(axis=axis, keepdims=True)

    return _apply(z, [(a, vjp)])


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def vjp_x(g):
        gh = g * gain.data
        return inv * (gh - gh.mean(axis=-1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    lead = tuple(range(x.ndim - 1))
    return _apply(y, [
        (x, vjp_x),
        (gain, lambda g: (g * xhat).sum(axis=lead)),
        (bias, lambda g: g.sum(axis=lead)),
    ])


def conv2d(x, kernels, stride: int = 1) -> Tensor:
    """3x3 cross-correlation over (cin, h, w) with padding 1 on each side.

    Output is (cout, ceil(h/stride), ceil(w/stride)); stride must be 1 or 2.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects (cin,h,w) and (cout,cin,3,3), got {x.shape} and {kernels.shape}")
    if kernels.shape[2:] != (3, 3):
        raise ConfigError(f"conv2d supports only 3x3 kernels, got {kernels.shape[2:]}")
    if kernels.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernels {kernels.shape}")
    if stride not in (1, 2):
        raise ContractError(f"conv2d stride must be 1 or 2, got {stride}")
    cin, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (cin, ho, wo, 3, 3)
    ho, wo = win.shape[1], win.shape[2]
    y = np.einsum("cijpq,ocpq->oij", win, kernels.data)

    def vjp_x(g):
        gw = np.einsum("oij,ocpq->cijpq", g, kernels.data)
        buf = np.zeros_like(xp)
        for p in range(3):
            for q in range(3):
                buf[:, p:p + stride * ho:stride, q:q + stride * wo:stride] += gw[:, :, :, p, q]
        return buf[:, 1:h + 1, 1:w + 1]

    return _apply(y, [
        (x, vjp_x),
        (kernels, lambda g: np.einsum("oij,cijpq->ocpq", g, win)),
    ])


def dropout(x, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0 so tests stay deterministic."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0,1), got {p}")
    x = _as_tensor(x)
    if p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    return _apply(x.data * keep * scale, [(x, lambda g: g * keep * scale)])


# ---------------------------------------------------------------------------
# small complex linear algebra for the beamformer

_LOAD_DELTA = 1e-10
_PIVOT_RTOL = 1e-12


def _gauss_solve(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched Gaussian elimination with partial pivoting.

    Returns the solution of ``a @ x = b`` plus the smallest pivot magnitude
    encountered per batch element, which drives diagonal-loading decisions.
    """
    a = a.copy()
    b = b.copy()
    nb, c, _ = a.shape
    bi = np.arange(nb)
    min_piv = np.full(nb, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for k in range(c):
            p = np.abs(a[:, k:, k]).argmax(axis=1) + k
            rows_a, rows_b = a[bi, p].copy(), b[bi, p].copy()
            a[bi, p], b[bi, p] = a[:, k].copy(), b[:, k].copy()
            a[:, k], b[:, k] = rows_a, rows_b
            piv = a[:, k, k]
            min_piv = np.minimum(min_piv, np.abs(piv))
            if k + 1 < c:
                f = a[:, k + 1:, k] / piv[:, None]
                f[~np.isfinite(f)] = 0.0
                a[:, k + 1:, k:] -= f[:, :, None] * a[:, k, k:][:, None, :]
                b[:, k + 1:, :] -= f[:, :, None] * b[:, k, :][:, None, :]
        x = np.zeros_like(b)
        for k in range(c - 1, -1, -1):
            acc = b[:, k, :] - np.einsum("bj,bjk->bk", a[:, k, k + 1:], x[:, k + 1:, :])
            x[:, k, :] = acc / a[:, k, k][:, None]
    x[~np.isfinite(x)] = 0.0
    return x, min_piv


def _solve_loaded(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve batched Hermitian systems, diagonally loading near-singular ones."""
    nb, c, _ = a.shape
    tr = np.trace(a, axis1=-2, axis2=-1)
    tr_mag = np.abs(tr)
    scale = np.abs(a).max(axis=(-2, -1))
    if np.any(scale == 0):
        raise SingularMatrixError("all-zero matrix in hermitian solve")
    x, min_piv = _gauss_solve(a, b)
    bad = min_piv < _PIVOT_RTOL * tr_mag
    if np.any(bad):
        eye = np.eye(c, dtype=a.dtype)
        loaded = a[bad] + (_LOAD_DELTA * tr[bad].real / c)[:, None, None] * eye
        x_bad, piv_bad = _gauss_solve(loaded, b[bad])
        if np.any(piv_bad == 0.0):
            raise SingularMatrixError("matrix singular even after diagonal loading")
        x[bad] = x_bad
    return x


def solve_hermitian(a, b) -> Tensor:
    """Differentiable batched solve of Hermitian systems ``a @ x = b``.

    ``a`` is (batch, C, C), ``b`` is (batch, C, K). Near-singular systems get
    diagonal loading delta*trace/C with delta = 1e-10; the loading itself is
    treated as a constant in the backward pass.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[1] != a.shape[2] or a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"solve_hermitian expects (B,C,C) and (B,C,K), got {a.shape} and {b.shape}")
    x = _solve_loaded(a.data.astype(np.complex128), b.data.astype(np.complex128))

    def vjp_b(g):
        ah = np.conj(np.swapaxes(a.data, -1, -2)).astype(np.complex128)
        return _solve_loaded(ah, g.astype(np.complex128))

    def vjp_a(g):
        gb = vjp_b(g)
        return -np.einsum("bik,bjk->bij", gb, np.conj(x))

    return _apply(x, [(a, vjp_a), (b, vjp_b)])


def hermitian_solve(m: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a single Hermitian system, the plain-array entry point.

    ``m`` must be Hermitian within 1e-12 relative to its magnitude and at
    most 16x16; ``b`` is (C,) or (C, K). Raises SingularMatrixError when the
    matrix is effectively zero.
    """
    m = np.asarray(m, dtype=np.complex128)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"hermitian_solve expects a square matrix, got {m.shape}")
    c = m.shape[0]
    if c > 16:
        raise ContractError(f"hermitian_solve limited to C <= 16, got C = {c}")
    scale = np.abs(m).max()
    if np.abs(m - m.conj().T).max() > 1e-12 * max(1.0, scale):
        raise ContractError("matrix is not Hermitian within tolerance")
    b = np.asarray(b, dtype=np.complex128)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    if b.shape[0] != c:
        raise ShapeError(f"right-hand side shape {b.shape} incompatible with {m.shape}")
    x = _solve_loaded(m[None], b[None])[0]
    return x[:, 0] if squeeze else x


def trace_last2(a) -> Tensor:
    """Trace over the trailing two axes."""
    a = _as_tensor(a)
    c = a.shape[-1]
    if a.shape[-2] != c:
        raise ShapeError(f"trace_last2 needs square trailing axes, got {a.shape}")

    def vjp(g):
        buf = np.zeros_like(a.data)
        r = np.arange(c)
        buf[..., r, r] = g[..., None]
        return buf

    return _apply(np.trace(a.data, axis1=-2, axis2=-1), [(a, vjp)])


def diagonal_last2(a) -> Tensor:
    """Diagonal of the trailing two axes, shape (..., C)."""
    a = _as_tensor(a)
    c = a.shape[-1]
    if a.shape[-2] != c:
        raise ShapeError(f"diagonal_last2 needs square trailing axes, got {a.shape}")

    def vjp(g):
        buf = np.zeros_like(a.data)
        r = np.arange(c)
        buf[..., r, r] = g
        return buf

    return _apply(np.diagonal(a.data, axis1=-2, axis2=-1).copy(), [(a, vjp)])
