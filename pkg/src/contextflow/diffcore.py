"""Dense float64 arrays with a small reverse-mode gradient engine.

Values are plain ``numpy.ndarray`` objects (float64, row-major). A
:class:`Tensor` wraps one value and records, for every operation applied to
it, the parents together with a vector-Jacobian closure. The tape is rebuilt on
every evaluation and released by :func:`backward` unless ``retain_graph`` is
set.

Broadcasting follows numpy; gradients are summed back onto the parent shape.

All randomness in the package comes from :func:`make_rng` (a seeded PCG64
``numpy.random.Generator``) and its children produced by :func:`split_rng`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

PIVOT_TOL = 1e-12
MAX_MATRIX_SIDE = 1024

VJP = Callable[[np.ndarray], np.ndarray]


class SingularMatrixError(ArithmeticError):
    """A pivot fell below :data:`PIVOT_TOL` during LU factorization."""


class GradientError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# PRNG


def make_rng(seed: int | np.random.SeedSequence | None = 0) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def split_rng(rng: np.random.Generator, n: int = 2) -> list[np.random.Generator]:
    """Independent child streams; the parent stream is advanced."""
    return list(rng.spawn(n))


# --------------------------------------------------------------------------
# Tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "op", "name", "__weakref__")
    # make numpy scalars/arrays defer to the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[tuple[Tensor, VJP], ...] = ()
        self.op = "leaf"
        self.name = name

    # shape helpers
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # reductions / shape
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def tanh(self) -> Tensor:
        return tanh(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(value, parents: Iterable[tuple[Tensor, VJP]], op: str = "custom") -> Tensor:
    """Build a node from a value and ``(parent, vjp)`` pairs.

    ``vjp`` maps the upstream gradient (same shape as ``value``) to the
    gradient for that parent. Parents that do not require gradients are
    dropped, so constant inputs never enter the tape.
    """
    out = Tensor(value)
    out.op = op
    live = tuple((p, f) for p, f in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data - b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return custom_op(
        out,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * out / b.data, b.shape)),
        ],
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(-a.data, [(a, lambda g: -g)], "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data**p, [(a, lambda g: g * p * a.data ** (p - 1))], "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data * a.data, [(a, lambda g: 2.0 * g * a.data)], "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op(out, [(a, lambda g: g * out)], "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(np.log(a.data), [(a, lambda g: g / a.data)], "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return custom_op(out, [(a, lambda g: g * (1.0 - out * out))], "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)
    return custom_op(out, [(a, lambda g: g * out * (1.0 - out))], "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(
        np.logaddexp(0.0, a.data), [(a, lambda g: g * special.expit(a.data))], "softplus"
    )


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    return custom_op(
        -np.logaddexp(0.0, -a.data), [(a, lambda g: g * special.expit(-a.data))], "log_sigmoid"
    )


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero outside the interval."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return custom_op(np.clip(a.data, lo, hi), [(a, lambda g: g * inside)], "clamp")


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return custom_op(
        np.where(mask, a.data, b.data),
        [
            (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), a.shape)),
            (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), b.shape)),
        ],
        "where",
    )


# --------------------------------------------------------------------------
# reductions and shape ops


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return custom_op(
        a.data.sum(axis=axis, keepdims=keepdims),
        [(a, lambda g: _expand_reduced(g, a.shape, axis, keepdims))],
        "sum",
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.size(out), 1)
    return custom_op(
        out, [(a, lambda g: _expand_reduced(g / count, a.shape, axis, keepdims))], "mean"
    )


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    soft = e / s
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * soft

    return custom_op(out, [(a, vjp)], "logsumexp")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return custom_op(a.data.reshape(shape), [(a, lambda g: g.reshape(a.shape))], "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return custom_op(a.data.transpose(axes), [(a, lambda g: g.transpose(inv))], "transpose")


def swap_last(a) -> Tensor:
    """Transpose the two trailing axes (batched matrix transpose)."""
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros(a.shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return full

    return custom_op(a.data[idx], [(a, vjp)], "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)
    parents = []
    for i, t in enumerate(ts):
        sl = [slice(None)] * t.ndim
        sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
        sl = tuple(sl)
        parents.append((t, lambda g, sl=sl: g[sl]))
    return custom_op(np.concatenate([t.data for t in ts], axis=axis), parents, "concat")


def take(a, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather rows: ``a.take(indices, axis)`` with scatter-add gradient."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)

    def vjp(g):
        full = np.zeros(a.shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return full

    return custom_op(np.take(a.data, indices, axis=axis), [(a, vjp)], "take")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands must be at least 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    return custom_op(
        a.data @ b.data,
        [
            (a, lambda g: _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)),
            (b, lambda g: _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)),
        ],
        "matmul",
    )


class LUFactors:
    """Row-pivoted LU factors ``P A = L U`` of one matrix or a batch of them.

    ``lu`` stores the unit-lower ``L`` below the diagonal and ``U`` on and
    above it; ``perm[i]`` is the source row of row ``i``.
    """

    def __init__(self, lu: np.ndarray, perm: np.ndarray, sign: np.ndarray, logabsdet: np.ndarray):
        self.lu = lu
        self.perm = perm
        self.sign = sign
        self.logabsdet = logabsdet

    @property
    def n(self) -> int:
        return self.lu.shape[-1]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``A x = b`` for ``b`` of shape ``(..., n, k)``."""
        n = self.n
        b = np.asarray(b, dtype=np.float64)
        if self.lu.ndim == 2 and b.ndim > 2:
            # one matrix, many right-hand sides: fold the batch into columns
            k = b.shape[-1]
            cols = np.moveaxis(b, -2, 0).reshape(n, -1)
            out = self.solve(cols).reshape((n,) + b.shape[:-2] + (k,))
            return np.moveaxis(out, 0, -2)
        batch = np.broadcast_shapes(self.lu.shape[:-2], b.shape[:-2])
        lu = np.broadcast_to(self.lu, batch + (n, n)).reshape(-1, n, n)
        perm = np.broadcast_to(self.perm, batch + (n,)).reshape(-1, n)
        b = np.broadcast_to(b, batch + b.shape[-2:]).reshape(-1, n, b.shape[-1])
        rows = np.arange(lu.shape[0])[:, None]
        y = b[rows, perm].copy()
        for i in range(1, n):
            y[:, i] -= np.einsum("bj,bjk->bk", lu[:, i, :i], y[:, :i])
        for i in range(n - 1, -1, -1):
            if i + 1 < n:
                y[:, i] -= np.einsum("bj,bjk->bk", lu[:, i, i + 1 :], y[:, i + 1 :])
            y[:, i] /= lu[:, i, i : i + 1]
        return y.reshape(batch + (n, y.shape[-1]))

    def inverse(self) -> np.ndarray:
        eye = np.broadcast_to(np.eye(self.n), self.lu.shape)
        return self.solve(eye)


def lu_factor(m: np.ndarray, pivot_tol: float = PIVOT_TOL) -> LUFactors:
    """LU with partial pivoting over the trailing two axes.

    Raises :class:`SingularMatrixError` when a pivot magnitude is below
    ``pivot_tol``.
    """
    a = np.array(m, dtype=np.float64, copy=True)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    n = a.shape[-1]
    if n > MAX_MATRIX_SIDE:
        raise ValueError(f"matrix side {n} exceeds {MAX_MATRIX_SIDE}")
    batch = a.shape[:-2]
    A = a.reshape(-1, n, n)
    nb = A.shape[0]
    rows = np.arange(nb)
    perm = np.tile(np.arange(n), (nb, 1))
    sign = np.ones(nb)
    for k in range(n):
        p = k + np.argmax(np.abs(A[:, k:, k]), axis=1)
        pivots = np.abs(A[rows, p, k])
        if np.any(~(pivots >= pivot_tol)):
            bad = int(np.argmin(np.where(np.isnan(pivots), -1.0, pivots)))
            raise SingularMatrixError(
                f"pivot {pivots[bad]:.3e} < {pivot_tol:g} at column {k} (batch item {bad})"
            )
        swap = p != k
        if swap.any():
            idx, pk = rows[swap], p[swap]
            tmp = A[idx, k, :].copy()
            A[idx, k, :] = A[idx, pk, :]
            A[idx, pk, :] = tmp
            ptmp = perm[idx, k].copy()
            perm[idx, k] = perm[idx, pk]
            perm[idx, pk] = ptmp
            sign[swap] *= -1.0
        if k + 1 < n:
            A[:, k + 1 :, k] /= A[:, k : k + 1, k]
            A[:, k + 1 :, k + 1 :] -= A[:, k + 1 :, k : k + 1] * A[:, k : k + 1, k + 1 :]
    diag = A[:, np.arange(n), np.arange(n)]
    sign = sign * np.prod(np.sign(diag), axis=1)
    logabsdet = np.sum(np.log(np.abs(diag)), axis=1)
    return LUFactors(
        A.reshape(a.shape), perm.reshape(batch + (n,)), sign.reshape(batch), logabsdet.reshape(batch)
    )


def lu_logabsdet(m: np.ndarray) -> tuple[float, float]:
    """``(sign, log|det m|)`` of a single square matrix.

    >>> lu_logabsdet(np.diag([2.0, 3.0]))[1]  # doctest: +ELLIPSIS
    1.79175...
    """
    f = lu_factor(m)
    if f.lu.ndim != 2:
        raise ValueError("lu_logabsdet takes one matrix; use lu_factor for batches")
    return float(f.sign), float(f.logabsdet)


def logabsdet(a) -> Tensor:
    """Differentiable ``log|det|`` over the trailing two axes."""
    a = as_tensor(a)
    f = lu_factor(a.data)
    return custom_op(
        f.logabsdet,
        [(a, lambda g: np.asarray(g)[..., None, None] * np.swapaxes(f.inverse(), -1, -2))],
        "logabsdet",
    )


def solve(a, b) -> Tensor:
    """Differentiable ``a^{-1} b`` for ``a`` (..., n, n) and ``b`` (..., n, k)."""
    a, b = as_tensor(a), as_tensor(b)
    f = lu_factor(a.data)
    x = f.solve(b.data)
    cache: dict[str, np.ndarray] = {}

    def grad_b_full(g):
        if "gb" not in cache:
            cache["gb"] = np.swapaxes(f.inverse(), -1, -2) @ g
        return cache["gb"]

    return custom_op(
        x,
        [
            (a, lambda g: _unbroadcast(-grad_b_full(g) @ np.swapaxes(x, -1, -2), a.shape)),
            (b, lambda g: _unbroadcast(grad_b_full(g), b.shape)),
        ],
        "solve",
    )


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 'same' convolution. x: (N, Cin, H, W); w: (Cout, Cin, k, k), k odd."""
    x, w = as_tensor(x), as_tensor(w)
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, h, wd, cout).transpose(0, 3, 1, 2)
    parents = []

    def gflat(g):
        return g.transpose(0, 2, 3, 1).reshape(-1, cout)

    def vjp_x(g):
        dcols = (gflat(g) @ wmat).reshape(n, h, wd, cin, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + h, j : j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p : p + h, p : p + wd]

    parents.append((x, vjp_x))
    parents.append((w, lambda g: (gflat(g).T @ cols).reshape(w.shape)))
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return custom_op(np.ascontiguousarray(out), parents, "conv2d")


# --------------------------------------------------------------------------
# backward


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
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _nan_path(root: Tensor) -> str:
    path = [root.op]
    node = root
    while True:
        bad = [p for p, _ in node._parents if not np.all(np.isfinite(p.data))]
        if not bad:
            break
        node = bad[0]
        path.append(node.name or node.op)
    return " <- ".join(path)


def backward(loss: Tensor, retain_graph: bool = False) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns ``{leaf: gradient}`` for every leaf that requires gradients and
    also stores it on ``leaf.grad``. Leaves without a path to ``loss`` are
    absent. With ``retain_graph=False`` the tape is released afterwards.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise GradientError(f"non-finite loss; offending node path: {_nan_path(loss)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = _topo_order(loss)
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g
                leaves[node] = g
            continue
        for parent, vjp in node._parents:
            pg = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
        if not retain_graph:
            node._parents = ()
    return leaves


def finite_diff_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6
) -> float:
    """Max over parameter entries of ``|analytic - central| / max(1, |central|)``.

    ``f`` is re-evaluated with each entry of each parameter nudged by
    ``+/-eps`` in place; it must be deterministic. NaN comparisons count as
    ``inf``.
    """
    if not 1e-8 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-8, 1e-3]")
    for p in params:
        p.grad = None
    grads = backward(f())
    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros(p.shape))
        flat = p.data.reshape(-1)
        ga = analytic.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = float(f().data)
            flat[i] = old - eps
            down = float(f().data)
            flat[i] = old
            num = (up - down) / (2.0 * eps)
            err = abs(ga[i] - num) / max(1.0, abs(num))
            if not np.isfinite(err):
                return float("inf")
            worst = max(worst, err)
    return worst
